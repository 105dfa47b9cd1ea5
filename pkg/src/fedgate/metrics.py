"""Accuracy, RMSE, per-client transfer deltas, and their aggregations.

A delta is the per-client change of the test metric relative to training
locally with the same budget: negative accuracy deltas and positive RMSE
deltas both mean the federation hurt that client.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import as_matrix, as_vector


def client_metric(task: str, predictions, targets) -> float:
    """Accuracy (argmax over logits, lowest index wins ties) or RMSE."""
    if task == "classification":
        logits = as_matrix(predictions, "logits")
        if logits.shape[0] < 1:
            raise ValueError("empty test set")
        labels = np.asarray(targets, dtype=np.int64).reshape(-1)
        return float((logits.argmax(axis=1) == labels).mean())
    if task == "regression":
        preds = np.asarray(predictions, dtype=np.float64).reshape(-1)
        if preds.size < 1:
            raise ValueError("empty test set")
        y = np.asarray(targets, dtype=np.float64).reshape(-1)
        return float(np.sqrt(((preds - y) ** 2).mean()))
    raise ValueError(f"unknown task {task!r}")


def percentile(values, p: float) -> float:
    """Linear interpolation between closest ranks: rank r = p * (n - 1)."""
    v = np.sort(as_vector(values, "values"))
    if v.size < 1:
        raise ValueError("empty values")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    r = p * (v.size - 1)
    lo = int(np.floor(r))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (r - lo) * (v[hi] - v[lo]))


@dataclass(frozen=True, eq=False)
class NegativeTransferReport:
    """Per-client metrics against the local baseline plus aggregates.

    For classification the worst delta is the minimum and the tail is the
    10th percentile; for regression (RMSE, lower is better) the worst delta
    is the maximum and the tail is the 90th percentile.
    """

    task: str
    per_client_metric: np.ndarray
    per_client_local: np.ndarray
    delta: np.ndarray
    avg_delta: float
    worst_delta: float
    tail_delta: float
    avg_metric: float
    worst_metric: float

    @property
    def tail_name(self) -> str:
        return "p10_delta" if self.task == "classification" else "p90_delta"

    def as_dict(self) -> dict:
        return {
            "task": self.task,
            "per_client_metric": [float(x) for x in self.per_client_metric],
            "per_client_local": [float(x) for x in self.per_client_local],
            "delta": [float(x) for x in self.delta],
            "avg_delta": self.avg_delta,
            "worst_delta": self.worst_delta,
            self.tail_name: self.tail_delta,
            "avg_metric": self.avg_metric,
            "worst_metric": self.worst_metric,
        }


def negative_transfer(metric_per_client, local_per_client,
                      task: str) -> NegativeTransferReport:
    metric = as_vector(metric_per_client, "metric_per_client")
    local = as_vector(local_per_client, "local_per_client")
    if metric.shape != local.shape:
        raise ValueError("per-client vectors differ in length")
    if metric.size < 1:
        raise ValueError("need at least one client")
    if task not in ("classification", "regression"):
        raise ValueError(f"unknown task {task!r}")
    delta = metric - local
    if task == "classification":
        worst_delta = float(delta.min())
        tail_delta = percentile(delta, 0.10)
        worst_metric = float(metric.min())
    else:
        worst_delta = float(delta.max())
        tail_delta = percentile(delta, 0.90)
        worst_metric = float(metric.max())
    return NegativeTransferReport(
        task=task,
        per_client_metric=metric,
        per_client_local=local,
        delta=delta,
        avg_delta=float(delta.mean()),
        worst_delta=worst_delta,
        tail_delta=tail_delta,
        avg_metric=float(metric.mean()),
        worst_metric=worst_metric,
    )
