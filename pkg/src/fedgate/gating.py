"""Disagreement energies, the batch-normalized logistic trust gate, and the
gated distillation objective for private-model updates.

The classification energy is the symmetric KL divergence between the private
and proxy predictive distributions, normalized by their total entropy, so
confident contradictions score high while diffuse disagreements score low.
The regression energy is half the squared prediction difference. Raw
energies are standardized within each minibatch (population mean/std) and
squashed through w = 1 / (1 + exp(beta * e_norm)): below-average energies
get weights above 1/2, above-average energies below 1/2, always strictly
inside (0, 1).

Trust weights are constants with respect to the model being trained; gating
rescales each sample's distillation gradient and can never reverse it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .numerics import as_matrix, as_vector, floored_log, softmax_logsoftmax, supervised_loss

ENERGY_KINDS = ("kd_symkl", "regression_sq", "entropy", "margin", "lse", "feat")

# "auto" resolves to the task's paired energy inside gated_private_loss:
# kd_symkl for logits heads, regression_sq for scalar heads.
CONFIG_ENERGY_KINDS = ("auto",) + ENERGY_KINDS


@dataclass(frozen=True)
class GateConfig:
    """Everything the energies, gate, and gated loss parameterize."""

    energy_kind: str = "auto"
    beta: float = 1.0
    lambda_kd: float = 1.0
    eps_b: float = 1e-8
    eps_h: float = 1e-8

    def __post_init__(self):
        if self.energy_kind not in CONFIG_ENERGY_KINDS:
            raise ValueError(f"unknown energy kind {self.energy_kind!r}")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        if self.lambda_kd < 0.0:
            raise ValueError("lambda_kd must be non-negative")
        if self.eps_b <= 0.0 or self.eps_h <= 0.0:
            raise ValueError("eps_b and eps_h must be positive")


@dataclass(frozen=True, eq=False)
class EnergyBatch:
    """Raw energies, their standardized form, and the resulting weights."""

    raw: np.ndarray
    normalized: np.ndarray
    weights: np.ndarray
    batch_mean: float
    batch_std: float

    def __len__(self) -> int:
        return self.raw.size


def sigmoid(t: np.ndarray | float) -> np.ndarray | float:
    """Numerically stable logistic function."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    et = np.exp(t[~pos])
    out[~pos] = et / (1.0 + et)
    if out.ndim == 0:
        return float(out)
    return out


def _symkl_energy_rows(p, logp, q, logq, eps_h: float) -> np.ndarray:
    kl_pq = (p * (floored_log(p) - floored_log(q))).sum(axis=1)
    kl_qp = (q * (floored_log(q) - floored_log(p))).sum(axis=1)
    ent_p = -(p * floored_log(p)).sum(axis=1)
    ent_q = -(q * floored_log(q)).sum(axis=1)
    return 0.5 * (kl_pq + kl_qp) / (ent_p + ent_q + eps_h)


def _margin_rows(z: np.ndarray) -> np.ndarray:
    top2 = np.sort(z, axis=1)[:, -2:]
    return -(top2[:, 1] - top2[:, 0])


def _lse_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1)
    return -(m + np.log(np.exp(z - m[:, None]).sum(axis=1)))


def batch_energies(kind: str, private_out=None, proxy_out=None,
                   private_feat=None, proxy_feat=None,
                   eps_h: float = 1e-8) -> np.ndarray:
    """Per-sample energies for a batch; rows of the inputs are samples.

    kd_symkl and regression_sq compare private against proxy outputs; the
    entropy, margin, and lse variants score the proxy logits (the knowledge
    source being trusted); feat compares feature rows, with the private
    features already projected to the proxy feature width.
    """
    if kind == "kd_symkl":
        zp = as_matrix(private_out, "private logits")
        zq = as_matrix(proxy_out, "proxy logits")
        if zp.shape != zq.shape:
            raise ValueError("private/proxy logit shape mismatch")
        if zp.shape[1] < 2:
            raise ValueError("kd_symkl needs at least two classes")
        p, logp = softmax_logsoftmax(zp)
        q, logq = softmax_logsoftmax(zq)
        return _symkl_energy_rows(p, logp, q, logq, eps_h)
    if kind == "regression_sq":
        f = as_matrix(private_out, "private output")
        g = as_matrix(proxy_out, "proxy output")
        if f.shape != g.shape:
            raise ValueError("private/proxy output shape mismatch")
        diff = f - g
        return 0.5 * (diff * diff).sum(axis=1)
    if kind == "entropy":
        z = as_matrix(proxy_out, "proxy logits")
        q, _ = softmax_logsoftmax(z)
        return -(q * np.log(q + eps_h)).sum(axis=1)
    if kind == "margin":
        z = as_matrix(proxy_out, "proxy logits")
        if z.shape[1] < 2:
            raise ValueError("margin needs at least two classes")
        return _margin_rows(z)
    if kind == "lse":
        return _lse_rows(as_matrix(proxy_out, "proxy logits"))
    if kind == "feat":
        if private_feat is None or proxy_feat is None:
            raise ValueError("feat energy needs both feature matrices")
        hp = as_matrix(private_feat, "private features")
        hq = as_matrix(proxy_feat, "proxy features")
        if hp.shape != hq.shape:
            raise ValueError("feature shape mismatch (projection missing?)")
        return np.sqrt(((hq - hp) ** 2).sum(axis=1))
    raise ValueError(f"unknown energy kind {kind!r}")


def energy(kind: str, private_out=None, proxy_out=None,
           private_feat=None, proxy_feat=None, eps_h: float = 1e-8) -> float:
    """Energy of a single sample; arguments are 1-D rows."""
    def rowify(x, name):
        if x is None:
            return None
        return as_vector(x, name)[None, :]

    vals = batch_energies(
        kind,
        private_out=rowify(private_out, "private row"),
        proxy_out=rowify(proxy_out, "proxy row"),
        private_feat=rowify(private_feat, "private feature row"),
        proxy_feat=rowify(proxy_feat, "proxy feature row"),
        eps_h=eps_h,
    )
    return float(vals[0])


def normalize_and_gate(raw, cfg: GateConfig) -> EnergyBatch:
    """Batch-standardize energies and map them to trust weights.

    Uses the population standard deviation (divide by n); a singleton batch
    or an all-equal batch therefore gates every sample at exactly 1/2.
    """
    e = as_vector(raw, "energies")
    if e.size < 1:
        raise ValueError("empty batch")
    if not np.all(np.isfinite(e)):
        raise ValueError("non-finite energies")
    mean = float(e.mean())
    std = float(np.sqrt(((e - mean) ** 2).mean()))
    normalized = (e - mean) / (std + cfg.eps_b)
    weights = sigmoid(-cfg.beta * normalized)
    return EnergyBatch(e, normalized, weights, mean, std)


def variational_gate_oracle(e_tilde: float, beta: float,
                            grid_step: float = 1e-3) -> float:
    """Grid-search minimizer of w*e + (1/beta) * [w ln w + (1-w) ln(1-w)]
    over w in {grid_step, 2*grid_step, ..., 1 - grid_step}.

    Independent check that the logistic gate solves the entropy-regularized
    soft trust assignment.
    """
    if not 0.0 < grid_step <= 0.01:
        raise ValueError("grid_step must be in (0, 0.01]")
    steps = int(round(1.0 / grid_step))
    w = np.arange(1, steps) * grid_step
    phi = w * e_tilde + (w * np.log(w) + (1.0 - w) * np.log(1.0 - w)) / beta
    return float(w[int(np.argmin(phi))])


@dataclass(frozen=True, eq=False)
class GatedLoss:
    """Loss value, flat parameter gradient, and the gate's energy log."""

    loss: float
    grad: np.ndarray
    energies: EnergyBatch


def per_sample_distill_param_grads(trace: models.ForwardTrace, out_grads,
                                   weights) -> tuple[np.ndarray, np.ndarray]:
    """(gated, ungated) per-sample parameter gradients of the distillation
    term. Row i of gated equals weights[i] * row i of ungated, coordinate by
    coordinate: the weight multiplies the finished per-sample gradient, so
    gating rescales but never redirects."""
    ungated = models.backward_per_sample(trace, out_grads)
    w = as_vector(weights, "weights")
    if w.size != ungated.shape[0]:
        raise ValueError("one weight per sample required")
    gated = w[:, None] * ungated
    return gated, ungated


def _distill_terms(task: str, private_trace, proxy_trace):
    """Per-sample distillation loss values and output-space gradients.

    Classification: loss KL(q || p) with the proxy as teacher; gradient
    w.r.t. the private logits is p - q. Regression: loss (f - g)^2 with
    gradient 2 (f - g).
    """
    if task == "classification":
        p, logp = softmax_logsoftmax(private_trace.output)
        q, logq = softmax_logsoftmax(proxy_trace.output)
        values = (q * (floored_log(q) - floored_log(p))).sum(axis=1)
        out_grads = p - q
    else:
        f = private_trace.output
        g = proxy_trace.output
        diff = f - g
        values = (diff * diff).sum(axis=1)
        out_grads = 2.0 * diff
    return values, out_grads


def gated_private_loss(inputs, targets, private: models.ModelParams,
                       global_proxy: models.ModelParams, cfg: GateConfig,
                       feat_projection: np.ndarray | None = None,
                       weights_override=None) -> GatedLoss:
    """Supervised loss plus the gated distillation term, with the gradient
    taken w.r.t. the private parameters only.

    Proxy outputs and trust weights are constants during differentiation.
    `weights_override` replaces the gate's weights in the loss (a scalar is
    broadcast; used for full-trust training and for fixed-weight gradient
    checks); the returned energy log always reflects the actual energies.
    """
    if private.spec.head != global_proxy.spec.head:
        raise ValueError("private and proxy heads disagree")
    task = "classification" if private.spec.head == "logits" else "regression"
    loss_kind = "cross_entropy" if task == "classification" else "squared_error"

    energy_kind = cfg.energy_kind
    if energy_kind == "auto":
        energy_kind = "kd_symkl" if task == "classification" else "regression_sq"
    elif task == "regression" and energy_kind in ("kd_symkl", "entropy",
                                                  "margin", "lse"):
        raise ValueError(f"{energy_kind} energy needs class logits; use "
                         "auto, regression_sq, or feat for scalar heads")

    private_trace = models.forward(private, inputs)
    proxy_trace = models.forward(global_proxy, inputs)
    if private_trace.output.shape != proxy_trace.output.shape:
        raise ValueError("private and proxy output shapes disagree")
    sup = supervised_loss(loss_kind, private_trace.output, targets)

    if energy_kind == "feat":
        if feat_projection is None:
            raise ValueError("feat energy requires a feature projection")
        raw = batch_energies(
            "feat",
            private_feat=private_trace.hidden_features @ feat_projection,
            proxy_feat=proxy_trace.hidden_features,
            eps_h=cfg.eps_h,
        )
    else:
        raw = batch_energies(energy_kind, private_trace.output,
                             proxy_trace.output, eps_h=cfg.eps_h)
    energies = normalize_and_gate(raw, cfg)

    if weights_override is None:
        weights = energies.weights
    else:
        weights = np.broadcast_to(
            np.asarray(weights_override, dtype=np.float64), raw.shape).copy()

    if cfg.lambda_kd == 0.0:
        # Exact supervised limit: no distillation arithmetic touches the
        # gradient, so the trajectory matches plain local training bitwise.
        grad = models.backward(private_trace, sup.grad)
        return GatedLoss(sup.loss, grad, energies)

    kd_values, kd_out_grads = _distill_terms(task, private_trace, proxy_trace)
    n = kd_values.size
    loss = sup.loss + cfg.lambda_kd * float((weights * kd_values).mean())
    gated, _ = per_sample_distill_param_grads(private_trace, kd_out_grads, weights)
    grad = models.backward(private_trace, sup.grad) \
        + (cfg.lambda_kd / n) * gated.sum(axis=0)
    return GatedLoss(loss, grad, energies)
