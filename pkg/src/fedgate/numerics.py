"""Probability transforms, losses with analytic gradients, a central
finite-difference oracle, and the Adam update rule.

A "matrix" throughout the package is a 2-D float64 numpy array in row-major
order. Logs of probabilities are taken on max(p, PROB_FLOOR) so that one-hot
rows and underflowed softmax entries never produce -inf; the floor is far
below any probability that survives a softmax of reasonable logits.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

PROB_FLOOR = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def as_vector(x, name: str = "vector") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def floored_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, PROB_FLOOR))


def softmax_logsoftmax(logits) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise softmax and log-softmax with the max-shift trick.

    Each row of the returned probabilities sums to one to within 1e-12 and
    the log-probabilities are exact logs of those probabilities.
    """
    z = as_matrix(logits, "logits")
    if z.shape[1] < 1:
        raise ValueError("logits need at least one column")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logprobs = shifted - lse
    probs = np.exp(logprobs)
    return probs, logprobs


def entropy(probs) -> float:
    """Shannon entropy -sum(p * ln p) in nats, with 0 * ln 0 = 0."""
    p = as_vector(probs, "probability row")
    if np.any(p < 0.0):
        raise ValueError("negative probability")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    return float(-(p * floored_log(p)).sum())


def kl_divergence(p, q, symmetric: bool = False) -> float:
    """KL(p || q) = sum p * ln(p / q); the symmetric flag returns
    (KL(p||q) + KL(q||p)) / 2."""
    pv = as_vector(p, "p")
    qv = as_vector(q, "q")
    if pv.shape != qv.shape:
        raise ValueError(f"shape mismatch: {pv.shape} vs {qv.shape}")
    forward = float((pv * (floored_log(pv) - floored_log(qv))).sum())
    if not symmetric:
        return forward
    backward = float((qv * (floored_log(qv) - floored_log(pv))).sum())
    return 0.5 * (forward + backward)


@dataclass(frozen=True, eq=False)
class LossGrad:
    """A scalar loss with its gradient w.r.t. the model output."""

    loss: float
    grad: np.ndarray


def supervised_loss(kind: str, output, targets) -> LossGrad:
    """Mean cross-entropy over logits or mean squared error.

    cross_entropy: `output` is an n x C logit matrix, `targets` are class
    indices; loss = mean(-logprob[target]), grad = (probs - onehot) / n.
    squared_error: `output` is n x 1, `targets` length n; loss =
    mean((yhat - y)^2), grad = 2 (yhat - y) / n.
    """
    out = as_matrix(output, "output")
    n = out.shape[0]
    if n < 1:
        raise ValueError("empty batch")
    if kind == "cross_entropy":
        t = np.asarray(targets, dtype=np.int64).reshape(-1)
        if t.shape[0] != n:
            raise ValueError("target count does not match batch size")
        if np.any(t < 0) or np.any(t >= out.shape[1]):
            raise ValueError("target index out of range")
        probs, logprobs = softmax_logsoftmax(out)
        loss = float(-logprobs[np.arange(n), t].mean())
        grad = probs.copy()
        grad[np.arange(n), t] -= 1.0
        return LossGrad(loss, grad / n)
    if kind == "squared_error":
        if out.shape[1] != 1:
            raise ValueError("squared_error expects an n x 1 output")
        y = np.asarray(targets, dtype=np.float64).reshape(n, 1)
        resid = out - y
        loss = float((resid * resid).mean())
        return LossGrad(loss, 2.0 * resid / n)
    raise ValueError(f"unknown loss kind {kind!r}")


def finite_diff_grad(f, params, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient oracle: (f(x + h e_i) - f(x - h e_i)) / 2h."""
    if h <= 0.0:
        raise ValueError("h must be positive")
    theta = np.asarray(params, dtype=np.float64).reshape(-1).copy()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        hi = float(f(theta))
        theta[i] = orig - h
        lo = float(f(theta))
        theta[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError("non-finite function value in finite differences")
        grad[i] = (hi - lo) / (2.0 * h)
    return grad


@dataclass(frozen=True, eq=False)
class AdamState:
    """First/second moment accumulators for one flat parameter vector."""

    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(num_params: int, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(0, np.zeros(num_params), np.zeros(num_params),
                     lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: np.ndarray,
              grad: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update; returns the new state and parameters."""
    theta = as_vector(params, "params")
    g = as_vector(grad, "grad")
    if theta.shape != g.shape or state.m.shape != theta.shape:
        raise ValueError("parameter/gradient length mismatch")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, step=t, m=m, v=v), new_theta
