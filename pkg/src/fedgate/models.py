"""Fixed-depth ReLU multilayer perceptrons with hand-written backprop.

Each model's parameters live in one flat float64 vector: for every layer,
the weight matrix (fan_in x fan_out, row-major) followed by the bias vector,
layers ordered from input to output. The output layer is always linear;
`head` selects between a C-column logits output and a single-column scalar
output. Keeping parameters flat makes averaging, optimizer state, and
checkpointing trivial.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import as_matrix
from .rng import stream

_CKPT_MAGIC = b"FGMLP001"
_HEADS = ("logits", "scalar")
_ACTIVATIONS = ("relu",)


@dataclass(frozen=True)
class ModelSpec:
    """Layer sizes from input to output plus activation and head kind."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    head: str = "logits"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("spec needs at least input and output sizes")
        if any(s <= 0 for s in self.layer_sizes):
            raise ValueError("layer sizes must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.head not in _HEADS:
            raise ValueError(f"unsupported head {self.head!r}")
        if self.head == "scalar" and self.layer_sizes[-1] != 1:
            raise ValueError("scalar head requires a single output unit")

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]


def param_count(spec: ModelSpec) -> int:
    sizes = spec.layer_sizes
    return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """A spec plus its flat parameter vector."""

    spec: ModelSpec
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "theta", theta)
        if theta.size != param_count(self.spec):
            raise ValueError(
                f"theta has {theta.size} entries, spec needs {param_count(self.spec)}")


def layer_views(params: ModelParams) -> list[tuple[np.ndarray, np.ndarray]]:
    """(weight, bias) views into theta per layer; no copies."""
    sizes = params.spec.layer_sizes
    views = []
    offset = 0
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        w = params.theta[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params.theta[offset:offset + fan_out]
        offset += fan_out
        views.append((w, b))
    return views


def init_model(spec: ModelSpec, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic in (spec, seed)."""
    rng = stream(seed, "init")
    theta = np.zeros(param_count(spec))
    sizes = spec.layer_sizes
    offset = 0
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniforms((fan_in * fan_out,)) * 2.0 * bound - bound
        theta[offset:offset + fan_in * fan_out] = w
        offset += fan_in * fan_out + fan_out  # biases stay zero
    return ModelParams(spec, theta)


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Per-layer pre-activations and activations retained for backprop.

    activations[0] is the input batch; activations[l] is the post-ReLU
    output of layer l (the raw linear output for the last layer).
    """

    params: ModelParams
    pre_activations: tuple[np.ndarray, ...]
    activations: tuple[np.ndarray, ...]

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]

    @property
    def hidden_features(self) -> np.ndarray:
        """Last hidden activation (the input batch for single-layer models)."""
        return self.activations[-2]


def forward(params: ModelParams, inputs) -> ForwardTrace:
    x = as_matrix(inputs, "inputs")
    if x.shape[1] != params.spec.input_size:
        raise ValueError(
            f"input width {x.shape[1]} does not match spec input size "
            f"{params.spec.input_size}")
    layers = layer_views(params)
    pre = []
    acts = [x]
    a = x
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        pre.append(z)
        a = z if i == len(layers) - 1 else np.maximum(z, 0.0)
        acts.append(a)
    return ForwardTrace(params, tuple(pre), tuple(acts))


def _check_output_grad(trace: ForwardTrace, grad_wrt_output) -> np.ndarray:
    g = as_matrix(grad_wrt_output, "grad_wrt_output")
    if g.shape != trace.output.shape:
        raise ValueError(
            f"gradient shape {g.shape} does not match trace output "
            f"{trace.output.shape} (stale trace?)")
    return g


def backward(trace: ForwardTrace, grad_wrt_output) -> np.ndarray:
    """Gradient of sum(output * grad_wrt_output) w.r.t. theta, flat."""
    g = _check_output_grad(trace, grad_wrt_output)
    layers = layer_views(trace.params)
    grads_w: list[np.ndarray] = [None] * len(layers)
    grads_b: list[np.ndarray] = [None] * len(layers)
    dz = g
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads_w[i] = trace.activations[i].T @ dz
        grads_b[i] = dz.sum(axis=0)
        if i > 0:
            da = dz @ w.T
            dz = da * (trace.pre_activations[i - 1] > 0.0)
    return np.concatenate([np.concatenate([gw.ravel(), gb])
                           for gw, gb in zip(grads_w, grads_b)])


def backward_per_sample(trace: ForwardTrace, grad_wrt_output) -> np.ndarray:
    """Per-sample parameter gradients, one flat row per batch row.

    Rows sum to backward(trace, grad_wrt_output) up to summation order.
    """
    g = _check_output_grad(trace, grad_wrt_output)
    layers = layer_views(trace.params)
    n = g.shape[0]
    pieces_w: list[np.ndarray] = [None] * len(layers)
    pieces_b: list[np.ndarray] = [None] * len(layers)
    dz = g
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        pieces_w[i] = np.einsum("ni,nj->nij", trace.activations[i], dz).reshape(n, -1)
        pieces_b[i] = dz
        if i > 0:
            da = dz @ w.T
            dz = da * (trace.pre_activations[i - 1] > 0.0)
    blocks = []
    for gw, gb in zip(pieces_w, pieces_b):
        blocks.append(gw)
        blocks.append(gb)
    return np.concatenate(blocks, axis=1)


def param_axpy(dst: ModelParams, src: ModelParams, alpha: float) -> ModelParams:
    """dst.theta + alpha * src.theta as a new ModelParams."""
    if dst.spec != src.spec:
        raise ValueError("spec mismatch in param_axpy")
    return ModelParams(dst.spec, dst.theta + alpha * src.theta)


def params_bytes(params: ModelParams) -> bytes:
    """Checkpoint encoding: magic, head/activation bytes, layer sizes, then
    theta as little-endian float64."""
    spec = params.spec
    parts = [
        _CKPT_MAGIC,
        struct.pack("<BB", _HEADS.index(spec.head),
                    _ACTIVATIONS.index(spec.activation)),
        struct.pack("<I", len(spec.layer_sizes)),
        struct.pack(f"<{len(spec.layer_sizes)}I", *spec.layer_sizes),
        params.theta.astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def save_params(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_bytes(params))


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a parameter checkpoint: {path}")
        head_idx, act_idx = struct.unpack("<BB", fh.read(2))
        (n_sizes,) = struct.unpack("<I", fh.read(4))
        sizes = struct.unpack(f"<{n_sizes}I", fh.read(4 * n_sizes))
        spec = ModelSpec(sizes, activation=_ACTIVATIONS[act_idx], head=_HEADS[head_idx])
        theta = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    return ModelParams(spec, theta)
