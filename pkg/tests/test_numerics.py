import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgate.numerics import (
    AdamState,
    adam_init,
    adam_step,
    entropy,
    finite_diff_grad,
    kl_divergence,
    softmax_logsoftmax,
    supervised_loss,
)

LN2 = 0.6931471805599453
LN3 = 1.0986122886681098
LN4 = 1.3862943611198906


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


class TestSoftmax:
    def test_symmetric_pair(self):
        probs, logprobs = softmax_logsoftmax([[0.0, 0.0]])
        assert np.allclose(probs, [[0.5, 0.5]], atol=1e-15)
        assert np.allclose(logprobs, [[-LN2, -LN2]], atol=1e-15)

    def test_max_shift_stability(self):
        probs, logprobs = softmax_logsoftmax([[1000.0, 0.0]])
        assert np.all(np.isfinite(logprobs))
        assert probs[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert probs[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_log_ratio_row(self):
        # softmax of (ln 1, ln 3) normalizes the raw weights 1 and 3
        probs, _ = softmax_logsoftmax([[0.0, LN3]])
        assert np.allclose(probs, [[0.25, 0.75]], atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(50, 7)) * 10
        probs, logprobs = softmax_logsoftmax(logits)
        assert np.all(np.abs(probs.sum(axis=1) - 1.0) <= 1e-12)
        assert np.allclose(np.exp(logprobs), probs, rtol=0, atol=0)
        assert np.all(probs > 0) and np.all(probs <= 1)

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=8),
           st.floats(-30, 30))
    @settings(max_examples=200, deadline=None)
    def test_shift_invariance(self, row, c):
        base, _ = softmax_logsoftmax([row])
        shifted, _ = softmax_logsoftmax([[x + c for x in row]])
        assert np.all(np.abs(base - shifted) <= 1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite logits"):
            softmax_logsoftmax([[np.nan, 0.0]])
        with pytest.raises(ValueError, match="non-finite logits"):
            softmax_logsoftmax([[np.inf, 0.0]])


class TestEntropy:
    def test_one_hot_is_zero(self):
        assert entropy([1.0, 0.0, 0.0]) == 0.0

    def test_uniform_is_log_c(self):
        assert entropy([0.25] * 4) == pytest.approx(LN4, abs=1e-12)

    def test_hand_value(self):
        assert entropy([0.9, 0.1]) == pytest.approx(0.3250829733914484, abs=1e-12)

    def test_bounds_random(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            p = rng.dirichlet(np.ones(5))
            h = entropy(p)
            assert 0.0 <= h <= np.log(5) + 1e-12

    def test_rejects_negative(self):
        with pytest.raises(ValueError, match="negative"):
            entropy([1.1, -0.1])

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            entropy([0.5, 0.2])


class TestKL:
    def test_zero_at_equal(self):
        p = [0.2, 0.3, 0.5]
        assert kl_divergence(p, p) == 0.0
        assert kl_divergence(p, p, symmetric=True) == 0.0

    def test_hand_value_symmetric(self):
        # both directions equal 0.8 ln 9, so the symmetric value is the same
        got = kl_divergence([0.9, 0.1], [0.1, 0.9], symmetric=True)
        assert got == pytest.approx(0.8 * np.log(9.0), abs=1e-12)

    def test_gibbs_inequality(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            p = rng.dirichlet(np.ones(4))
            q = rng.dirichlet(np.ones(4))
            assert kl_divergence(p, q) >= 0.0

    def test_symmetric_is_symmetric(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            p = rng.dirichlet(np.ones(6))
            q = rng.dirichlet(np.ones(6))
            assert kl_divergence(p, q, symmetric=True) == \
                kl_divergence(q, p, symmetric=True)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])


class TestSupervisedLoss:
    def test_cross_entropy_hand_case(self):
        res = supervised_loss("cross_entropy", [[0.0, 0.0]], [0])
        assert res.loss == pytest.approx(LN2, abs=1e-12)
        assert np.allclose(res.grad, [[-0.5, 0.5]], atol=1e-15)

    def test_squared_error_zero_at_fit(self):
        res = supervised_loss("squared_error", [[1.0], [2.0]], [1.0, 2.0])
        assert res.loss == 0.0
        assert np.all(res.grad == 0.0)

    def test_squared_error_value_and_grad(self):
        res = supervised_loss("squared_error", [[2.0], [0.0]], [0.0, 1.0])
        assert res.loss == pytest.approx((4.0 + 1.0) / 2.0)
        assert np.allclose(res.grad, [[2.0], [-1.0]])

    def test_target_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            supervised_loss("cross_entropy", [[0.0, 0.0]], [2])

    @pytest.mark.parametrize("n,c", [(1, 2), (5, 3), (8, 6)])
    def test_cross_entropy_grad_vs_finite_diff(self, n, c):
        rng = np.random.default_rng(n * 10 + c)
        logits = rng.normal(size=(n, c))
        targets = rng.integers(0, c, size=n)
        res = supervised_loss("cross_entropy", logits, targets)

        def f(flat):
            return supervised_loss("cross_entropy",
                                   flat.reshape(n, c), targets).loss

        fd = finite_diff_grad(f, logits.ravel(), h=1e-6)
        assert rel_err(res.grad, fd) <= 1e-6


class TestFiniteDiff:
    def test_quadratic(self):
        grad = finite_diff_grad(lambda t: float(t[0] ** 2), np.array([3.0]))
        assert grad[0] == pytest.approx(6.0, abs=1e-5)

    def test_constant(self):
        grad = finite_diff_grad(lambda t: 7.0, np.zeros(4))
        assert np.all(grad == 0.0)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            finite_diff_grad(lambda t: float("nan"), np.zeros(2))


class TestAdam:
    def test_zero_grad_noop(self):
        state = adam_init(3, lr=0.1)
        params = np.array([1.0, -2.0, 0.5])
        new_state, new_params = adam_step(state, params, np.zeros(3))
        assert np.array_equal(new_params, params)
        assert new_state.step == 1

    def test_first_step_is_signed_lr(self):
        state = adam_init(4, lr=0.01)
        params = np.zeros(4)
        grad = np.array([1.0, -2.0, 0.5, -0.1])
        _, new_params = adam_step(state, params, grad)
        assert np.allclose(new_params, -0.01 * np.sign(grad), atol=1e-5)

    def test_quadratic_bowl_convergence(self):
        state = adam_init(5, lr=1e-2)
        theta = np.array([1.0, -1.5, 0.7, 2.0, -0.2])
        for _ in range(2000):
            state, theta = adam_step(state, theta, 2.0 * theta)
        assert np.linalg.norm(theta) < 1e-3

    def test_length_mismatch(self):
        state = adam_init(3)
        with pytest.raises(ValueError, match="mismatch"):
            adam_step(state, np.zeros(4), np.zeros(4))

    def test_state_not_mutated(self):
        state = adam_init(2, lr=0.1)
        params = np.ones(2)
        adam_step(state, params, np.ones(2))
        assert state.step == 0
        assert np.all(state.m == 0.0)
