"""Synthetic datasets and the heterogeneity machinery: Dirichlet label-skew
partitioning, k-means covariate-shift partitioning, and train/val/test
splits. All randomness is seed-driven through fedgate.rng, so partitions
reproduce across platforms from integer seeds alone.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64, derive_seed, stream

TASKS = ("classification", "regression")
PARTITION_MODES = ("label_skew", "covariate_shift")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Input matrix plus integer labels or scalar targets."""

    inputs: np.ndarray
    targets: np.ndarray
    task: str
    num_classes: int | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        inputs = np.asarray(self.inputs, dtype=np.float64)
        object.__setattr__(self, "inputs", inputs)
        if self.task == "classification":
            targets = np.asarray(self.targets, dtype=np.int64)
            if self.num_classes is None or self.num_classes < 2:
                raise ValueError("classification needs num_classes >= 2")
            if targets.size and (targets.min() < 0 or targets.max() >= self.num_classes):
                raise ValueError("labels out of range")
        else:
            targets = np.asarray(self.targets, dtype=np.float64)
            if not np.all(np.isfinite(targets)):
                raise ValueError("non-finite regression targets")
        object.__setattr__(self, "targets", targets)
        if inputs.shape[0] != targets.shape[0]:
            raise ValueError("inputs/targets row mismatch")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], self.task, self.num_classes)


@dataclass(frozen=True)
class DataConfig:
    """Knobs for gen_synthetic, bundled for the experiment runner."""

    task: str
    n: int
    d: int
    classes: int = 4
    noise: float = 0.1
    spread: float = 2.0
    latent_clusters: int = 5


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int
    alpha: float
    bins: int = 5
    mode: str = "label_skew"
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("need at least one client")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if self.bins < 1:
            raise ValueError("bins must be positive")
        if self.mode not in PARTITION_MODES:
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if len(self.split) != 3 or any(f <= 0.0 for f in self.split):
            raise ValueError("split needs three positive fractions")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def gen_synthetic(task: str, n: int, d: int, *, classes: int = 4,
                  noise: float = 0.1, seed: int = 0, spread: float = 2.0,
                  latent_clusters: int = 5) -> Dataset:
    """Deterministic synthetic data.

    Classification: `classes` unit-covariance Gaussian blobs with seed-drawn
    centers scaled by `spread`; the label is the blob id. Regression: inputs
    from `latent_clusters` Gaussian blobs (so covariate partitioning has
    structure) and targets y = w.x + b + noise * N(0,1) for seed-drawn w, b.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    rng = stream(seed, "synthetic")
    if task == "classification":
        if classes < 2:
            raise ValueError("need at least two classes")
        centers = spread * rng.normals((classes, d))
        labels = np.array([rng.below(classes) for _ in range(n)], dtype=np.int64)
        inputs = centers[labels] + rng.normals((n, d))
        return Dataset(inputs, labels, "classification", classes)
    if latent_clusters < 1:
        raise ValueError("need at least one latent cluster")
    centers = spread * rng.normals((latent_clusters, d))
    comps = np.array([rng.below(latent_clusters) for _ in range(n)], dtype=np.int64)
    inputs = centers[comps] + rng.normals((n, d))
    w_true = rng.normals((d,)) / np.sqrt(d)
    b_true = rng.normal()
    targets = inputs @ w_true + b_true + noise * rng.normals((n,))
    return Dataset(inputs, targets, "regression")


def min_shard_size(split: tuple[float, float, float]) -> int:
    """Smallest shard that gives every split at least one sample."""
    n = 1
    while True:
        cut1 = int(np.floor(split[0] * n))
        cut2 = int(np.floor((split[0] + split[1]) * n))
        if cut1 >= 1 and cut2 - cut1 >= 1 and n - cut2 >= 1:
            return n
        n += 1


def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to `total`, nearest to proportions * total.

    Leftover units go to the largest fractional remainders, lowest index
    winning ties, so the rounding is deterministic.
    """
    scaled = proportions * total
    counts = np.floor(scaled).astype(np.int64)
    leftover = total - int(counts.sum())
    if leftover > 0:
        fractional = scaled - counts
        order = np.lexsort((np.arange(len(counts)), -fractional))
        counts[order[:leftover]] += 1
    return counts


def _assign_groups(group_of_row: np.ndarray, num_groups: int,
                   cfg: PartitionConfig, rng: SplitMix64) -> np.ndarray:
    """Dirichlet assignment of rows to clients, group by group.

    For each group (class or covariate bin) the group's shuffled rows are
    dealt to clients according to a Dir(alpha) draw, largest-remainder
    rounded. Undersized shards are then repaired by moving single rows from
    the currently largest shard until every client can be split 3 ways.
    """
    n = group_of_row.shape[0]
    assignment = np.full(n, -1, dtype=np.int64)
    for g in range(num_groups):
        rows = np.flatnonzero(group_of_row == g)
        if rows.size == 0:
            continue
        rows = rows[rng.permutation(rows.size)]
        props = rng.dirichlet(cfg.alpha, cfg.num_clients)
        counts = _largest_remainder_counts(props, rows.size)
        offset = 0
        for k in range(cfg.num_clients):
            assignment[rows[offset:offset + counts[k]]] = k
            offset += counts[k]
    floor = min_shard_size(cfg.split)
    sizes = np.bincount(assignment, minlength=cfg.num_clients)
    while sizes.min() < floor:
        needy = int(np.argmin(sizes))
        donor = int(np.argmax(sizes))
        if donor == needy or sizes[donor] <= floor:
            raise ValueError("not enough samples to give every client a shard")
        moved = np.flatnonzero(assignment == donor)[-1]
        assignment[moved] = needy
        sizes[donor] -= 1
        sizes[needy] += 1
    return assignment


def partition_assignment(ds: Dataset, cfg: PartitionConfig) -> np.ndarray:
    """Client id per row under the configured partition mode."""
    if cfg.mode == "label_skew":
        if ds.task != "classification":
            raise ValueError("label_skew needs a classification dataset "
                             "(use covariate_shift for regression)")
        rng = stream(cfg.seed, "label_skew")
        return _assign_groups(ds.targets, ds.num_classes, cfg, rng)
    if len(ds) < cfg.bins:
        raise ValueError("fewer samples than covariate bins")
    km = kmeans(ds.inputs, cfg.bins, derive_seed(cfg.seed, "kmeans"))
    rng = stream(cfg.seed, "covariate_shift")
    return _assign_groups(km.labels, cfg.bins, cfg, rng)


def _shards_from_assignment(ds: Dataset, assignment: np.ndarray,
                            num_clients: int) -> list[Dataset]:
    return [ds.take(np.flatnonzero(assignment == k)) for k in range(num_clients)]


def dirichlet_label_partition(ds: Dataset, cfg: PartitionConfig) -> list[Dataset]:
    """Label-skew shards: per class, Dirichlet proportions across clients."""
    if cfg.mode != "label_skew":
        cfg = PartitionConfig(cfg.num_clients, cfg.alpha, cfg.bins,
                              "label_skew", cfg.split, cfg.seed)
    return _shards_from_assignment(ds, partition_assignment(ds, cfg), cfg.num_clients)


def covariate_partition(ds: Dataset, cfg: PartitionConfig) -> list[Dataset]:
    """Covariate-shift shards: k-means bins, then Dirichlet over the bins."""
    if cfg.mode != "covariate_shift":
        cfg = PartitionConfig(cfg.num_clients, cfg.alpha, cfg.bins,
                              "covariate_shift", cfg.split, cfg.seed)
    return _shards_from_assignment(ds, partition_assignment(ds, cfg), cfg.num_clients)


def partition(ds: Dataset, cfg: PartitionConfig) -> list[Dataset]:
    if cfg.mode == "label_skew":
        return dirichlet_label_partition(ds, cfg)
    return covariate_partition(ds, cfg)


def split_train_val_test(ds: Dataset, fractions=(0.6, 0.2, 0.2),
                         seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded permutation, then contiguous cuts at floor(f1*n) and
    floor((f1+f2)*n)."""
    n = len(ds)
    cut1 = int(np.floor(fractions[0] * n))
    cut2 = int(np.floor((fractions[0] + fractions[1]) * n))
    if cut1 < 1 or cut2 - cut1 < 1 or n - cut2 < 1:
        raise ValueError("client shard too small to split")
    perm = stream(seed, "split").permutation(n)
    return ds.take(perm[:cut1]), ds.take(perm[cut1:cut2]), ds.take(perm[cut2:])


@dataclass(frozen=True, eq=False)
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    sse_path: np.ndarray  # objective after each Lloyd iteration


def _nearest(X: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1), d2


def kmeans(X, k: int, seed: int, max_iter: int = 100,
           tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm with k-means++ style seeding.

    Ties go to the lowest centroid index; a cluster that empties is reseeded
    at the point currently farthest from its assigned centroid. Terminates
    when no centroid moves more than `tol` or after `max_iter` iterations,
    and always returns nearest-centroid labels under the final centroids.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < k:
        raise ValueError("fewer samples than clusters")
    rng = stream(seed, "seeding")
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.below(n)]
    for j in range(1, k):
        _, d2 = _nearest(X, centroids[:j])
        closest = d2.min(axis=1)
        total = closest.sum()
        if total <= 0.0:
            centroids[j] = X[rng.below(n)]
            continue
        cutoff = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(closest), cutoff, side="right"))
        centroids[j] = X[min(idx, n - 1)]

    sse_path = []
    for _ in range(max_iter):
        labels, d2 = _nearest(X, centroids)
        sse_path.append(float(d2[np.arange(n), labels].sum()))
        new_centroids = centroids.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new_centroids[c] = X[members].mean(axis=0)
        empties = [c for c in range(k) if not (labels == c).any()]
        if empties:
            point_err = ((X - new_centroids[labels]) ** 2).sum(axis=1)
            order = np.argsort(-point_err, kind="stable")
            for slot, c in enumerate(empties):
                new_centroids[c] = X[order[slot]]
        movement = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if movement < tol:
            break
    labels, d2 = _nearest(X, centroids)
    sse_path.append(float(d2[np.arange(n), labels].sum()))
    return KMeansResult(centroids, labels, np.asarray(sse_path))


def dump_dataset_csv(ds: Dataset, path) -> None:
    """One row per sample: feature columns x0..x{d-1} then the target."""
    d = ds.inputs.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{j}" for j in range(d)] + ["target"])
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.inputs[i]]
            if ds.task == "classification":
                row.append(str(int(ds.targets[i])))
            else:
                row.append(repr(float(ds.targets[i])))
            writer.writerow(row)


def write_partition_manifest(ds: Dataset, cfg: PartitionConfig,
                             assignment: np.ndarray, dataset_file: str,
                             path) -> None:
    """Sidecar that lets a dumped dataset be re-fed identically: the task,
    generation seed, partition settings, and per-row client assignment."""
    payload = {
        "schema_version": 1,
        "dataset_file": dataset_file,
        "task": ds.task,
        "num_classes": ds.num_classes,
        "num_samples": len(ds),
        "partition": {
            "num_clients": cfg.num_clients,
            "alpha": cfg.alpha,
            "bins": cfg.bins,
            "mode": cfg.mode,
            "split": list(cfg.split),
            "seed": cfg.seed,
        },
        "assignment": [int(a) for a in assignment],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
