import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgate.gating import (
    EnergyBatch,
    GateConfig,
    batch_energies,
    energy,
    gated_private_loss,
    normalize_and_gate,
    per_sample_distill_param_grads,
    sigmoid,
    variational_gate_oracle,
)
from fedgate.models import ModelParams, ModelSpec, backward_per_sample, forward, init_model
from fedgate.numerics import finite_diff_grad, softmax_logsoftmax, supervised_loss

from test_numerics import rel_err

# logits whose softmax is exactly [0.9, 0.1] / [0.1, 0.9]
LOGITS_P = np.log([0.9, 0.1])
LOGITS_Q = np.log([0.1, 0.9])


def hand_symkl_energy():
    # both KL directions equal 0.8 ln 9; entropies are equal by symmetry
    sym = 0.8 * np.log(9.0)
    ent = -(0.9 * np.log(0.9) + 0.1 * np.log(0.1))
    return sym / (2.0 * ent + 1e-8)


class TestEnergies:
    def test_symkl_zero_at_equal_logits(self):
        z = np.array([1.0, -0.3, 0.7])
        assert energy("kd_symkl", z, z) == 0.0

    def test_symkl_hand_value(self):
        got = energy("kd_symkl", LOGITS_P, LOGITS_Q)
        assert got == pytest.approx(hand_symkl_energy(), abs=1e-10)
        assert got == pytest.approx(2.7036, abs=1e-3)

    def test_symkl_symmetry_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            zp = rng.normal(size=4)
            zq = rng.normal(size=4)
            assert energy("kd_symkl", zp, zq) == energy("kd_symkl", zq, zp)

    def test_symkl_needs_two_classes(self):
        with pytest.raises(ValueError, match="two classes"):
            energy("kd_symkl", [1.0], [0.5])

    def test_regression_energy(self):
        assert energy("regression_sq", [2.0], [0.0]) == 2.0
        assert energy("regression_sq", [1.5], [1.5]) == 0.0

    def test_margin(self):
        assert energy("margin", proxy_out=[3.0, 1.0]) == -2.0
        assert energy("margin", proxy_out=[1.0, 3.0, 0.0]) == -2.0

    def test_entropy_energy_prefers_confident(self):
        sharp = energy("entropy", proxy_out=[10.0, -10.0])
        flat = energy("entropy", proxy_out=[0.0, 0.0])
        assert sharp < flat

    def test_lse_max_shifted(self):
        val = energy("lse", proxy_out=[1000.0, 0.0])
        assert np.isfinite(val)
        assert val == pytest.approx(-1000.0, abs=1e-9)

    def test_feat_distance(self):
        assert energy("feat", private_feat=[0.0, 0.0], proxy_feat=[3.0, 4.0]) \
            == pytest.approx(5.0)

    def test_feat_requires_features(self):
        with pytest.raises(ValueError, match="feature"):
            energy("feat", private_feat=[1.0, 2.0])

    def test_all_variants_finite_on_random_logits(self):
        rng = np.random.default_rng(1)
        z_private = rng.normal(size=(10_000, 6)) * 20
        z_proxy = rng.normal(size=(10_000, 6)) * 20
        feats = rng.normal(size=(10_000, 5)) * 10
        for kind in ("kd_symkl", "entropy", "margin", "lse"):
            vals = batch_energies(kind, z_private, z_proxy)
            assert vals.shape == (10_000,)
            assert np.all(np.isfinite(vals))
        vals = batch_energies("feat", private_feat=feats,
                              proxy_feat=feats[::-1].copy())
        assert np.all(np.isfinite(vals))
        vals = batch_energies("regression_sq", z_private[:, :1], z_proxy[:, :1])
        assert np.all(np.isfinite(vals))

    def test_batch_matches_rowwise(self):
        rng = np.random.default_rng(2)
        zp = rng.normal(size=(32, 4))
        zq = rng.normal(size=(32, 4))
        batch = batch_energies("kd_symkl", zp, zq)
        rows = [energy("kd_symkl", zp[i], zq[i]) for i in range(32)]
        assert np.allclose(batch, rows, rtol=1e-12, atol=0)


class TestGate:
    def cfg(self, beta=1.0, **kw):
        return GateConfig(beta=beta, **kw)

    def test_singleton_batch_gates_at_half(self):
        eb = normalize_and_gate([3.7], self.cfg())
        assert eb.weights[0] == 0.5

    def test_equal_energies_gate_at_half(self):
        eb = normalize_and_gate([2.0, 2.0, 2.0], self.cfg(beta=8.0))
        assert np.all(eb.weights == 0.5)

    def test_hand_case(self):
        eb = normalize_and_gate([0.0, 1.0], self.cfg())
        assert np.allclose(eb.normalized, [-1.0, 1.0], atol=1e-6)
        assert np.allclose(eb.weights, [0.731059, 0.268941], atol=1e-6)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty batch"):
            normalize_and_gate([], self.cfg())

    @pytest.mark.parametrize("beta", [0.25, 1.0, 8.0])
    def test_monotonicity_and_bounds(self, beta):
        rng = np.random.default_rng(int(beta * 100))
        cfg = self.cfg(beta=beta)
        for _ in range(300):
            n = int(rng.integers(1, 257))
            scale = 10.0 ** rng.uniform(-3, 3)
            raw = rng.normal(size=n) * scale
            eb = normalize_and_gate(raw, cfg)
            order = np.argsort(raw, kind="stable")
            sorted_w = eb.weights[order]
            assert np.all(np.diff(sorted_w) <= 0.0)  # E up => w down
            assert np.all(eb.weights > 0.0) and np.all(eb.weights < 1.0)
            if n >= 2:
                lo = sigmoid(-beta * np.sqrt(n - 1.0))
                hi = sigmoid(beta * np.sqrt(n - 1.0))
                assert np.all(eb.weights >= lo) and np.all(eb.weights <= hi)
            else:
                assert eb.weights[0] == 0.5

    def test_shift_invariance(self):
        rng = np.random.default_rng(7)
        cfg = self.cfg()
        raw = rng.normal(size=64)
        base = normalize_and_gate(raw, cfg).weights
        shifted = normalize_and_gate(raw + 123.456, cfg).weights
        assert np.all(np.abs(base - shifted) <= 1e-12)

    def test_scale_invariance_up_to_eps(self):
        rng = np.random.default_rng(8)
        cfg = self.cfg()
        for _ in range(50):
            raw = rng.normal(size=32)
            if normalize_and_gate(raw, cfg).batch_std < 1e-3:
                continue
            base = normalize_and_gate(raw, cfg).weights
            scaled = normalize_and_gate(raw * 37.0, cfg).weights
            assert np.all(np.abs(base - scaled) <= 1e-6)

    @given(st.floats(-5, 5), st.floats(0.3, 8))
    @settings(max_examples=100, deadline=None)
    def test_variational_oracle_matches_closed_form(self, e_tilde, beta):
        grid = 1e-3
        argmin = variational_gate_oracle(e_tilde, beta, grid)
        assert abs(argmin - sigmoid(-beta * e_tilde)) <= grid + 1e-12

    def test_variational_symmetry_case(self):
        assert variational_gate_oracle(0.0, 1.0, 1e-3) == pytest.approx(0.5, abs=1e-3)
        assert variational_gate_oracle(1.0, 1.0, 1e-3) == \
            pytest.approx(0.268941, abs=1e-3)

    def test_grid_step_validated(self):
        with pytest.raises(ValueError):
            variational_gate_oracle(0.0, 1.0, grid_step=0.5)


def make_pair(seed=0, head="logits", d=5, out=3):
    private = init_model(ModelSpec((d, 8, out), head=head), seed=seed)
    proxy = init_model(ModelSpec((d, 4, out), head=head), seed=seed + 1)
    return private, proxy


class TestGatedLoss:
    def test_lambda_zero_equals_supervised(self):
        rng = np.random.default_rng(10)
        private, proxy = make_pair()
        x = rng.normal(size=(12, 5))
        y = rng.integers(0, 3, size=12)
        cfg = GateConfig(lambda_kd=0.0)
        res = gated_private_loss(x, y, private, proxy, cfg)
        trace = forward(private, x)
        sup = supervised_loss("cross_entropy", trace.output, y)
        from fedgate.models import backward
        assert res.loss == sup.loss
        assert np.array_equal(res.grad, backward(trace, sup.grad))

    def test_identical_models_distill_free(self):
        rng = np.random.default_rng(11)
        spec = ModelSpec((5, 8, 3))
        private = init_model(spec, seed=5)
        x = rng.normal(size=(6, 5))
        y = rng.integers(0, 3, size=6)
        cfg = GateConfig(lambda_kd=1.0)
        res = gated_private_loss(x, y, private, private, cfg)
        sup = supervised_loss("cross_entropy", forward(private, x).output, y)
        assert res.loss == pytest.approx(sup.loss, abs=1e-15)
        assert np.all(res.energies.weights == 0.5)

    def test_per_sample_param_grads_exact_products(self):
        rng = np.random.default_rng(12)
        private, proxy = make_pair(seed=2)
        x = rng.normal(size=(9, 5))
        trace = forward(private, x)
        p, _ = softmax_logsoftmax(trace.output)
        q, _ = softmax_logsoftmax(forward(proxy, x).output)
        weights = rng.uniform(0.05, 0.95, size=9)
        gated, ungated = per_sample_distill_param_grads(trace, p - q, weights)
        for i in range(9):
            assert np.array_equal(gated[i], weights[i] * ungated[i])

    def test_output_grad_is_p_minus_q_vs_finite_diff(self):
        # numerically differentiate KL(q || p) w.r.t. the private logits
        rng = np.random.default_rng(13)
        for _ in range(20):
            zp = rng.normal(size=4)
            zq = rng.normal(size=4)
            q, logq = softmax_logsoftmax(zq[None, :])

            def kl_of_logits(z):
                p, logp = softmax_logsoftmax(z[None, :])
                return float((q * (logq - logp)).sum())

            fd = finite_diff_grad(kl_of_logits, zp, h=1e-5)
            p, _ = softmax_logsoftmax(zp[None, :])
            assert np.max(np.abs(fd - (p - q)[0])) <= 1e-10

    def test_p_minus_q_norm_bound(self):
        rng = np.random.default_rng(14)
        zp = rng.normal(size=(1000, 6)) * 15
        zq = rng.normal(size=(1000, 6)) * 15
        p, _ = softmax_logsoftmax(zp)
        q, _ = softmax_logsoftmax(zq)
        norms = np.linalg.norm(p - q, axis=1)
        assert np.all(norms <= np.sqrt(2.0) + 1e-12)

    def test_regression_output_grad(self):
        rng = np.random.default_rng(15)
        private, proxy = make_pair(seed=3, head="scalar", out=1)
        x = rng.normal(size=(8, 5))
        f = forward(private, x).output
        g = forward(proxy, x).output
        w = rng.uniform(0.1, 0.9, size=8)
        # the gated output gradient of the squared distillation term
        gated_rows = w[:, None] * (2.0 * (f - g))
        assert np.array_equal(gated_rows, w[:, None] * 2.0 * (f - g))
        res = gated_private_loss(x, rng.normal(size=8), private, proxy,
                                 GateConfig(), weights_override=w)
        assert np.all(np.isfinite(res.grad))

    def test_gated_grad_vs_finite_diff_fixed_weights(self):
        rng = np.random.default_rng(16)
        for head in ("logits", "scalar"):
            out = 3 if head == "logits" else 1
            private, proxy = make_pair(seed=4, head=head, out=out)
            x = rng.normal(size=(5, 5))
            y = rng.integers(0, out, size=5) if head == "logits" \
                else rng.normal(size=5)
            w = rng.uniform(0.1, 0.9, size=5)
            cfg = GateConfig(lambda_kd=0.7)
            res = gated_private_loss(x, y, private, proxy, cfg,
                                     weights_override=w)

            def f(theta):
                return gated_private_loss(
                    x, y, ModelParams(private.spec, theta), proxy, cfg,
                    weights_override=w).loss

            fd = finite_diff_grad(f, private.theta, h=1e-6)
            assert rel_err(res.grad, fd) <= 1e-5

    def test_weights_override_scalar(self):
        rng = np.random.default_rng(17)
        private, proxy = make_pair(seed=6)
        x = rng.normal(size=(4, 5))
        y = rng.integers(0, 3, size=4)
        full = gated_private_loss(x, y, private, proxy, GateConfig(),
                                  weights_override=1.0)
        half_lambda = gated_private_loss(
            x, y, private, proxy, GateConfig(lambda_kd=0.5),
            weights_override=1.0)
        sup = supervised_loss("cross_entropy", forward(private, x).output, y).loss
        kd_full = full.loss - sup
        kd_half = half_lambda.loss - sup
        assert kd_half == pytest.approx(0.5 * kd_full, rel=1e-12)

    def test_regression_rejects_logit_energies(self):
        private, proxy = make_pair(seed=7, head="scalar", out=1)
        x = np.zeros((3, 5))
        with pytest.raises(ValueError, match="scalar heads"):
            gated_private_loss(x, np.zeros(3), private, proxy,
                               GateConfig(energy_kind="margin"))

    def test_feat_energy_path(self):
        rng = np.random.default_rng(18)
        private, proxy = make_pair(seed=8)
        x = rng.normal(size=(6, 5))
        y = rng.integers(0, 3, size=6)
        proj = rng.normal(size=(8, 4))  # private hidden 8 -> proxy hidden 4
        res = gated_private_loss(x, y, private, proxy,
                                 GateConfig(energy_kind="feat"),
                                 feat_projection=proj)
        assert isinstance(res.energies, EnergyBatch)
        assert np.all(res.energies.raw >= 0.0)
        with pytest.raises(ValueError, match="projection"):
            gated_private_loss(x, y, private, proxy,
                               GateConfig(energy_kind="feat"))
