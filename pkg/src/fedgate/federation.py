"""Single-process simulation of the communication round: forward proxy
distillation on every client, fixed-order proxy aggregation on the server,
broadcast, and the energy-gated private update. Direct parameter-averaging
baselines (local-only, FedAvg-style, FedProx-style) share the same
minibatch and seeding machinery so trajectories are comparable seed for
seed. "Communication" is bookkeeping over in-memory parameter vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import models
from .data import DataConfig, Dataset, PartitionConfig, gen_synthetic, partition, split_train_val_test
from .gating import GateConfig, gated_private_loss
from .metrics import NegativeTransferReport, client_metric, negative_transfer
from .numerics import AdamState, adam_init, adam_step, softmax_logsoftmax, supervised_loss
from .rng import derive_seed, stream

STRATEGIES = ("fedekd", "fedekd_ungated", "local_only", "fedavg_direct",
              "fedprox_direct")
PROXY_STRATEGIES = ("fedekd", "fedekd_ungated")
DIRECT_STRATEGIES = ("fedavg_direct", "fedprox_direct")

_STAGE_PROXY = "proxy_stage"
_STAGE_PRIVATE = "private_stage"


@dataclass(frozen=True, eq=False)
class ClientDataset:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass(frozen=True, eq=False)
class ClientState:
    """One client's models, optimizer slots, local splits, and seed."""

    id: int
    private: models.ModelParams
    proxy: models.ModelParams
    private_opt: AdamState
    proxy_opt: AdamState
    data: ClientDataset
    seed: int
    feat_projection: np.ndarray

    @property
    def task(self) -> str:
        return self.data.train.task


@dataclass(frozen=True)
class FederationConfig:
    strategy: str = "fedekd"
    rounds: int = 5
    local_epochs: int = 2
    batch_size: int = 64
    gate: GateConfig = field(default_factory=GateConfig)
    fedprox_mu: float = 0.01
    aggregation: str = "uniform"
    seed: int = 0
    learning_rate: float = 1e-4
    private_hidden: tuple[int, ...] = (64, 64)
    proxy_hidden: tuple[int, ...] = (16,)
    proxy_supervised: bool = False
    force_gate_weight: float | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("rounds, local_epochs, and batch_size must be >= 1")
        if self.fedprox_mu < 0.0:
            raise ValueError("fedprox_mu must be non-negative")
        if self.aggregation not in ("uniform", "sample_weighted"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")


@dataclass
class CostCounters:
    """Forward/backward and communication tallies; all monotone within a run."""

    private_forwards: int = 0
    private_backwards: int = 0
    proxy_forwards: int = 0
    proxy_backwards: int = 0
    uploaded_params: int = 0
    broadcast_params: int = 0

    def accumulate(self, other: "CostCounters") -> None:
        self.private_forwards += other.private_forwards
        self.private_backwards += other.private_backwards
        self.proxy_forwards += other.proxy_forwards
        self.proxy_backwards += other.proxy_backwards
        self.uploaded_params += other.uploaded_params
        self.broadcast_params += other.broadcast_params

    def as_dict(self) -> dict:
        return {
            "private_forwards": self.private_forwards,
            "private_backwards": self.private_backwards,
            "proxy_forwards": self.proxy_forwards,
            "proxy_backwards": self.proxy_backwards,
            "uploaded_params": self.uploaded_params,
            "broadcast_params": self.broadcast_params,
        }


@dataclass(frozen=True)
class UploadRecord:
    """One client-to-server payload: which model family and how many params."""

    client_id: int
    payload_kind: str  # "proxy" or "private"
    n_params: int


@dataclass(frozen=True, eq=False)
class RoundReport:
    """Per-client test metrics, transfer deltas, and the round's costs."""

    round_idx: int
    strategy: str
    task: str
    n_train: tuple[int, ...]
    m_forward: tuple[int, ...]
    m_backward: tuple[int, ...]
    metrics: np.ndarray
    mean_gate_weight: tuple[float | None, ...]
    counters: CostCounters
    uploads: tuple[UploadRecord, ...]
    local_metrics: np.ndarray | None = None
    deltas: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {
            "round": self.round_idx,
            "strategy": self.strategy,
            "task": self.task,
            "n_train": list(self.n_train),
            "m_forward": list(self.m_forward),
            "m_backward": list(self.m_backward),
            "metrics": [float(x) for x in self.metrics],
            "mean_gate_weight": [None if w is None else float(w)
                                 for w in self.mean_gate_weight],
            "counters": self.counters.as_dict(),
            "uploads": [[u.client_id, u.payload_kind, u.n_params]
                        for u in self.uploads],
            "local_metrics": None if self.local_metrics is None
            else [float(x) for x in self.local_metrics],
            "deltas": None if self.deltas is None
            else [float(x) for x in self.deltas],
        }


def _minibatch_order(cfg: FederationConfig, client_id: int, round_idx: int,
                     epoch: int, stage: str, n: int) -> np.ndarray:
    return stream(cfg.seed, "shuffle", client_id, round_idx, epoch,
                  stage).permutation(n)


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, order.size, batch_size):
        yield order[start:start + batch_size]


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def forward_proxy_distill(client: ClientState, cfg: FederationConfig,
                          round_idx: int) -> tuple[ClientState, CostCounters]:
    """Train the proxy to mimic the frozen private model on local data.

    Classification matches predictive distributions (KL from the private
    teacher to the proxy student); regression matches predictions with half
    squared error. Costs one private forward, one proxy forward, and one
    proxy backward per minibatch.
    """
    train = client.data.train
    if len(train) < 1:
        raise ValueError("empty train split")
    counters = CostCounters()
    proxy, proxy_opt = client.proxy, client.proxy_opt
    classification = train.task == "classification"
    for epoch in range(cfg.local_epochs):
        order = _minibatch_order(cfg, client.id, round_idx, epoch,
                                 _STAGE_PROXY, len(train))
        for idx in _batches(order, cfg.batch_size):
            x = train.inputs[idx]
            nb = idx.size
            teacher = models.forward(client.private, x)
            student = models.forward(proxy, x)
            if classification:
                p, _ = softmax_logsoftmax(teacher.output)
                q, _ = softmax_logsoftmax(student.output)
                out_grad = (q - p) / nb
            else:
                diff = student.output - teacher.output
                out_grad = diff / nb
            if cfg.proxy_supervised:
                kind = "cross_entropy" if classification else "squared_error"
                sup = supervised_loss(kind, student.output, train.targets[idx])
                out_grad = out_grad + sup.grad
            grad = models.backward(student, out_grad)
            proxy_opt, theta = adam_step(proxy_opt, proxy.theta, grad)
            proxy = models.ModelParams(proxy.spec, theta)
            counters.private_forwards += 1
            counters.proxy_forwards += 1
            counters.proxy_backwards += 1
    return replace(client, proxy=proxy, proxy_opt=proxy_opt), counters


def backward_private_update(
        client: ClientState, global_proxy: models.ModelParams,
        cfg: FederationConfig, round_idx: int,
) -> tuple[ClientState, list, CostCounters]:
    """Gated private update against the frozen global proxy.

    Returns the energy-batch log alongside the updated client. Costs one
    proxy forward, one private forward, and one private backward per
    minibatch; the gate itself is O(batch * classes) and uncounted.
    """
    train = client.data.train
    if len(train) < 1:
        raise ValueError("empty train split")
    override = 1.0 if cfg.strategy == "fedekd_ungated" else cfg.force_gate_weight
    counters = CostCounters()
    private, private_opt = client.private, client.private_opt
    energy_log = []
    for epoch in range(cfg.local_epochs):
        order = _minibatch_order(cfg, client.id, round_idx, epoch,
                                 _STAGE_PRIVATE, len(train))
        for idx in _batches(order, cfg.batch_size):
            result = gated_private_loss(
                train.inputs[idx], train.targets[idx], private, global_proxy,
                cfg.gate, feat_projection=client.feat_projection,
                weights_override=override)
            private_opt, theta = adam_step(private_opt, private.theta, result.grad)
            private = models.ModelParams(private.spec, theta)
            energy_log.append(result.energies)
            counters.proxy_forwards += 1
            counters.private_forwards += 1
            counters.private_backwards += 1
    new_client = replace(client, private=private, private_opt=private_opt)
    return new_client, energy_log, counters


def _supervised_private_update(
        client: ClientState, cfg: FederationConfig, round_idx: int,
        prox_anchor: np.ndarray | None = None,
) -> tuple[ClientState, CostCounters]:
    """Plain local training; the optional proximal anchor adds
    mu * (theta - anchor) to the gradient (FedProx-style)."""
    train = client.data.train
    if len(train) < 1:
        raise ValueError("empty train split")
    kind = "cross_entropy" if train.task == "classification" else "squared_error"
    counters = CostCounters()
    private, private_opt = client.private, client.private_opt
    for epoch in range(cfg.local_epochs):
        order = _minibatch_order(cfg, client.id, round_idx, epoch,
                                 _STAGE_PRIVATE, len(train))
        for idx in _batches(order, cfg.batch_size):
            trace = models.forward(private, train.inputs[idx])
            sup = supervised_loss(kind, trace.output, train.targets[idx])
            grad = models.backward(trace, sup.grad)
            if prox_anchor is not None and cfg.fedprox_mu > 0.0:
                grad = grad + cfg.fedprox_mu * (private.theta - prox_anchor)
            private_opt, theta = adam_step(private_opt, private.theta, grad)
            private = models.ModelParams(private.spec, theta)
            counters.private_forwards += 1
            counters.private_backwards += 1
    return replace(client, private=private, private_opt=private_opt), counters


def aggregate_proxies(proxies: list[models.ModelParams],
                      weights: str = "uniform",
                      sizes: list[int] | None = None) -> models.ModelParams:
    """Elementwise average in fixed input order, optionally weighted by
    client sample counts."""
    if not proxies:
        raise ValueError("nothing to aggregate")
    spec = proxies[0].spec
    if any(p.spec != spec for p in proxies):
        raise ValueError("spec mismatch in aggregation")
    if weights == "uniform":
        coef = np.full(len(proxies), 1.0 / len(proxies))
    elif weights == "sample_weighted":
        if sizes is None or len(sizes) != len(proxies):
            raise ValueError("sample_weighted aggregation needs one size per model")
        total = float(sum(sizes))
        coef = np.asarray(sizes, dtype=np.float64) / total
    else:
        raise ValueError(f"unknown aggregation {weights!r}")
    theta = np.zeros_like(proxies[0].theta)
    for c, p in zip(coef, proxies):
        theta += c * p.theta
    return models.ModelParams(spec, theta)


def evaluate_clients(clients: list[ClientState]) -> np.ndarray:
    """Per-client metric of the private model on the client's test split."""
    out = np.empty(len(clients))
    for i, client in enumerate(clients):
        test = client.data.test
        preds = models.forward(client.private, test.inputs).output
        out[i] = client_metric(client.task, preds, test.targets)
    return out


def with_baseline(report: RoundReport, local_metrics: np.ndarray) -> RoundReport:
    deltas = report.metrics - local_metrics
    return replace(report, local_metrics=local_metrics, deltas=deltas)


def run_round(clients: list[ClientState], cfg: FederationConfig,
              round_idx: int,
              local_metrics: np.ndarray | None = None,
              ) -> tuple[list[ClientState], models.ModelParams | None, RoundReport]:
    """One communication round under the configured strategy.

    Proxy strategies: every client's proxy update completes before the
    server aggregates, and every private update sees the post-aggregation
    global proxy. Direct strategies skip proxies and average the private
    models themselves; local_only communicates nothing.
    """
    if not clients:
        raise ValueError("need at least one client")
    counters = CostCounters()
    uploads: list[UploadRecord] = []
    k = len(clients)
    mean_w: list[float | None] = [None] * k
    m_fwd = [0] * k
    m_bwd = [0] * k
    bpe = [batches_per_epoch(len(c.data.train), cfg.batch_size) for c in clients]
    global_model: models.ModelParams | None = None

    if cfg.strategy in PROXY_STRATEGIES:
        staged = []
        for i, client in enumerate(clients):
            updated, delta = forward_proxy_distill(client, cfg, round_idx)
            counters.accumulate(delta)
            m_fwd[i] = cfg.local_epochs * bpe[i]
            staged.append(updated)
        for client in staged:
            uploads.append(UploadRecord(client.id, "proxy", client.proxy.theta.size))
            counters.uploaded_params += client.proxy.theta.size
        global_model = aggregate_proxies(
            [c.proxy for c in staged], cfg.aggregation,
            [len(c.data.train) for c in staged])
        new_clients = []
        for i, client in enumerate(staged):
            counters.broadcast_params += global_model.theta.size
            received = replace(client, proxy=global_model)
            updated, energy_log, delta = backward_private_update(
                received, global_model, cfg, round_idx)
            counters.accumulate(delta)
            m_bwd[i] = cfg.local_epochs * bpe[i]
            if cfg.strategy == "fedekd_ungated":
                mean_w[i] = 1.0
            elif cfg.force_gate_weight is not None:
                mean_w[i] = float(cfg.force_gate_weight)
            else:
                mean_w[i] = float(np.mean(np.concatenate(
                    [eb.weights for eb in energy_log])))
            new_clients.append(updated)
        clients = new_clients
    elif cfg.strategy in DIRECT_STRATEGIES:
        anchor = clients[0].private.theta.copy() \
            if cfg.strategy == "fedprox_direct" else None
        staged = []
        for i, client in enumerate(clients):
            updated, delta = _supervised_private_update(
                client, cfg, round_idx, prox_anchor=anchor)
            counters.accumulate(delta)
            m_bwd[i] = cfg.local_epochs * bpe[i]
            staged.append(updated)
        for client in staged:
            uploads.append(UploadRecord(client.id, "private",
                                        client.private.theta.size))
            counters.uploaded_params += client.private.theta.size
        global_model = aggregate_proxies(
            [c.private for c in staged], cfg.aggregation,
            [len(c.data.train) for c in staged])
        clients = []
        for client in staged:
            counters.broadcast_params += global_model.theta.size
            clients.append(replace(client, private=global_model))
    else:  # local_only
        staged = []
        for i, client in enumerate(clients):
            updated, delta = _supervised_private_update(client, cfg, round_idx)
            counters.accumulate(delta)
            m_bwd[i] = cfg.local_epochs * bpe[i]
            staged.append(updated)
        clients = staged

    metrics = evaluate_clients(clients)
    report = RoundReport(
        round_idx=round_idx,
        strategy=cfg.strategy,
        task=clients[0].task,
        n_train=tuple(len(c.data.train) for c in clients),
        m_forward=tuple(m_fwd),
        m_backward=tuple(m_bwd),
        metrics=metrics,
        mean_gate_weight=tuple(mean_w),
        counters=counters,
        uploads=tuple(uploads),
    )
    if local_metrics is not None:
        report = with_baseline(report, local_metrics)
    return clients, global_model, report


def build_clients(shards: list[Dataset], cfg: FederationConfig,
                  split: tuple[float, float, float] = (0.6, 0.2, 0.2),
                  ) -> list[ClientState]:
    """Split each shard 60/20/20 (by default) and initialize both models.

    Private models are seeded per client; direct-averaging strategies
    instead start every client from one server-seeded private model, the
    usual protocol for parameter averaging. Proxies are the communicated
    model family, so they share one server-seeded init the same way.
    """
    if not shards:
        raise ValueError("no client shards")
    d = shards[0].inputs.shape[1]
    task = shards[0].task
    out = shards[0].num_classes if task == "classification" else 1
    head = "logits" if task == "classification" else "scalar"
    private_spec = models.ModelSpec((d, *cfg.private_hidden, out), head=head)
    proxy_spec = models.ModelSpec((d, *cfg.proxy_hidden, out), head=head)
    common_private = None
    if cfg.strategy in DIRECT_STRATEGIES:
        common_private = models.init_model(
            private_spec, derive_seed(cfg.seed, "server_init"))
    common_proxy = models.init_model(
        proxy_spec, derive_seed(cfg.seed, "proxy_init"))
    clients = []
    for k, shard in enumerate(shards):
        client_seed = derive_seed(cfg.seed, "client", k)
        train, val, test = split_train_val_test(
            shard, split, derive_seed(cfg.seed, "split", k))
        private = common_private if common_private is not None \
            else models.init_model(private_spec, derive_seed(client_seed, "private"))
        proxy = common_proxy
        feat_in = private_spec.layer_sizes[-2]
        feat_out = proxy_spec.layer_sizes[-2]
        bound = np.sqrt(6.0 / (feat_in + feat_out))
        projection = stream(client_seed, "feat_proj").uniforms(
            (feat_in, feat_out)) * 2.0 * bound - bound
        clients.append(ClientState(
            id=k,
            private=private,
            proxy=proxy,
            private_opt=adam_init(private.theta.size, lr=cfg.learning_rate),
            proxy_opt=adam_init(proxy.theta.size, lr=cfg.learning_rate),
            data=ClientDataset(train, val, test),
            seed=client_seed,
            feat_projection=projection,
        ))
    return clients


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    task: str
    strategy: str
    local_reports: tuple[RoundReport, ...]
    reports: tuple[RoundReport, ...]
    final: NegativeTransferReport
    counters_total: CostCounters
    final_clients: tuple[ClientState, ...] = ()
    global_model: models.ModelParams | None = None


def _run_rounds(clients: list[ClientState], cfg: FederationConfig,
                local_rows: list[np.ndarray] | None,
                ) -> tuple[list[RoundReport], list[ClientState],
                           models.ModelParams | None]:
    reports = []
    global_model = None
    for r in range(cfg.rounds):
        local = local_rows[r] if local_rows is not None else None
        clients, global_model, report = run_round(clients, cfg, r,
                                                  local_metrics=local)
        reports.append(report)
    return reports, clients, global_model


def run_experiment(fed_cfg: FederationConfig, part_cfg: PartitionConfig,
                   data_cfg: DataConfig) -> ExperimentResult:
    """Generate data, partition, train the local baseline, then the
    configured strategy; deltas compare each round against the baseline at
    the same round (same seeds, same epoch budget)."""
    ds = gen_synthetic(
        data_cfg.task, data_cfg.n, data_cfg.d, classes=data_cfg.classes,
        noise=data_cfg.noise, seed=derive_seed(fed_cfg.seed, "data"),
        spread=data_cfg.spread, latent_clusters=data_cfg.latent_clusters)
    pcfg = replace(part_cfg, seed=derive_seed(fed_cfg.seed, "partition"))
    shards = partition(ds, pcfg)

    local_cfg = replace(fed_cfg, strategy="local_only")
    local_reports, local_clients, _ = _run_rounds(
        build_clients(shards, local_cfg, pcfg.split), local_cfg, None)
    local_rows = [r.metrics for r in local_reports]
    local_reports = [with_baseline(r, row)
                     for r, row in zip(local_reports, local_rows)]

    if fed_cfg.strategy == "local_only":
        reports, final_clients, global_model = local_reports, local_clients, None
    else:
        reports, final_clients, global_model = _run_rounds(
            build_clients(shards, fed_cfg, pcfg.split), fed_cfg, local_rows)

    totals = CostCounters()
    for r in reports:
        totals.accumulate(r.counters)
    final = negative_transfer(reports[-1].metrics, local_rows[-1], ds.task)
    return ExperimentResult(
        task=ds.task,
        strategy=fed_cfg.strategy,
        local_reports=tuple(local_reports),
        reports=tuple(reports),
        final=final,
        counters_total=totals,
        final_clients=tuple(final_clients),
        global_model=global_model,
    )
