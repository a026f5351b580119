"""Minimal dense neural-network engine.

Float64 numpy throughout: the models are small and the tight precision keeps
finite-difference gradient checks meaningful. Backward passes are written by
hand; ``grad_check`` is the independent oracle for them.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError, TrainingError

ACTIVATIONS = ("relu", "identity", "sigmoid")

CHECKPOINT_FORMAT = "maskmlp-checkpoint"
CHECKPOINT_VERSION = 1


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _apply_activation(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "identity":
        return z
    if activation == "sigmoid":
        return sigmoid(z)
    raise ValueError(f"unknown activation {activation!r}")


def _activation_grad(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    if activation == "identity":
        return np.ones_like(z)
    if activation == "sigmoid":
        return a * (1.0 - a)
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class Layer:
    """One dense layer: ``a = act(x @ weight + bias)``."""

    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray    # (fan_out,)
    activation: str = "relu"

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"layer weight {self.weight.shape} incompatible with bias {self.bias.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class Mlp:
    """Encoder layers plus an optional sigmoid classification head."""

    layers: list[Layer]
    head: Layer | None = None

    def __post_init__(self) -> None:
        dims = [(l.fan_in, l.fan_out) for l in self.layers]
        for (_, out_prev), (in_next, _) in zip(dims, dims[1:]):
            if out_prev != in_next:
                raise ShapeError(f"layer dims do not chain: {dims}")
        if self.head is not None and self.layers and self.head.fan_in != self.layers[-1].fan_out:
            raise ShapeError(
                f"head fan_in {self.head.fan_in} != encoder width {self.layers[-1].fan_out}"
            )

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in if self.layers else (self.head.fan_in if self.head else 0)

    @property
    def hidden_size(self) -> int:
        return self.layers[-1].fan_out if self.layers else self.input_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[np.ndarray]:
        params: list[np.ndarray] = []
        for layer in self.layers:
            params.extend((layer.weight, layer.bias))
        if self.head is not None:
            params.extend((self.head.weight, self.head.bias))
        return params

    def parameter_names(self) -> list[str]:
        names: list[str] = []
        for i in range(len(self.layers)):
            names.extend((f"layer{i}.weight", f"layer{i}.bias"))
        if self.head is not None:
            names.extend(("head.weight", "head.bias"))
        return names

    def clone(self) -> "Mlp":
        return copy.deepcopy(self)


def init_mlp(
    input_dim: int,
    hidden_size: int = 64,
    depth: int = 3,
    rng: np.random.Generator | None = None,
    with_head: bool = False,
) -> Mlp:
    """He-style uniform fan-in initialization, zero biases.

    The default 3 x 64 ReLU encoder is the reference architecture.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    layers = []
    fan_in = input_dim
    for _ in range(depth):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, hidden_size))
        layers.append(Layer(w, np.zeros(hidden_size), "relu"))
        fan_in = hidden_size
    head = None
    if with_head:
        bound = np.sqrt(6.0 / fan_in)
        head = Layer(rng.uniform(-bound, bound, size=(fan_in, 1)), np.zeros(1), "sigmoid")
    return Mlp(layers, head)


def init_head(hidden_size: int, rng: np.random.Generator) -> Layer:
    bound = np.sqrt(6.0 / hidden_size)
    return Layer(rng.uniform(-bound, bound, size=(hidden_size, 1)), np.zeros(1), "sigmoid")


@dataclass
class ForwardCache:
    """Everything backward needs to replay a forward pass exactly."""

    inputs: list[np.ndarray]      # layer inputs, length = n layers
    preacts: list[np.ndarray]     # pre-activation z per layer
    outputs: list[np.ndarray]     # activated output per layer
    signature: list[tuple] = field(default_factory=list)


def _layers_signature(layers: Sequence[Layer]) -> list[tuple]:
    return [(l.weight.shape, l.activation) for l in layers]


def forward_layers(layers: Sequence[Layer], batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run ``batch`` (n, d) through a layer stack; returns output and cache."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {x.shape}")
    if layers and x.shape[1] != layers[0].fan_in:
        raise ShapeError(f"batch has {x.shape[1]} columns, model expects {layers[0].fan_in}")
    if not np.isfinite(x).all():
        raise NumericError("non-finite values in forward input")

    cache = ForwardCache([], [], [], _layers_signature(layers))
    for layer in layers:
        z = x @ layer.weight + layer.bias
        a = _apply_activation(z, layer.activation)
        cache.inputs.append(x)
        cache.preacts.append(z)
        cache.outputs.append(a)
        x = a
    return x, cache


def backward_layers(
    layers: Sequence[Layer], cache: ForwardCache, grad_out: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exact gradients of the scalar loss whose output-gradient is ``grad_out``.

    Returns one ``(d_weight, d_bias)`` pair per layer, in layer order.
    """
    if cache.signature != _layers_signature(layers):
        raise ContractError("activation cache does not match these layers")
    if len(cache.inputs) != len(layers):
        raise ContractError("stale activation cache")
    grad = np.asarray(grad_out, dtype=np.float64)
    if grad.ndim == 1:
        grad = grad[None, :]
    out_ref = cache.outputs[-1] if layers else None
    if layers and grad.shape != out_ref.shape:
        raise ContractError(
            f"grad shape {grad.shape} does not match forward output {out_ref.shape}"
        )

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        dz = grad * _activation_grad(cache.preacts[i], cache.outputs[i], layer.activation)
        grads[i] = (cache.inputs[i].T @ dz, dz.sum(axis=0))
        grad = dz @ layer.weight.T
    return grads


def input_gradient(layers: Sequence[Layer], cache: ForwardCache, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the stack's input batch."""
    if cache.signature != _layers_signature(layers):
        raise ContractError("activation cache does not match these layers")
    grad = np.asarray(grad_out, dtype=np.float64)
    if grad.ndim == 1:
        grad = grad[None, :]
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        dz = grad * _activation_grad(cache.preacts[i], cache.outputs[i], layer.activation)
        grad = dz @ layer.weight.T
    return grad


def forward(model: Mlp, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Encoder forward pass: returns (embedding, cache)."""
    return forward_layers(model.layers, batch)


def backward(model: Mlp, cache: ForwardCache, grad_embedding: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Encoder backward pass for a loss with the given embedding gradient."""
    return backward_layers(model.layers, cache, grad_embedding)


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy from logits; returns (loss, d_loss/d_logits).

    The sigmoid is fused into the loss so saturated heads stay stable.
    """
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} vs labels {y.shape}")
    # log(1 + e^z) computed as max(z, 0) + log1p(exp(-|z|))
    loss = float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    grad = (sigmoid(z) - y) / z.size
    return loss, grad


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators for a fixed parameter list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], learning_rate: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    names: Sequence[str] | None = None,
) -> None:
    """One in-place Adam update. Raises on non-finite gradients."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"parameter/gradient/state count mismatch: {len(params)}/{len(grads)}/{len(state.m)}"
        )
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            name = names[i] if names is not None else f"param[{i}]"
            raise TrainingError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / (1.0 - b1 ** t)
        v_hat = state.v[i] / (1.0 - b2 ** t)
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def grad_check(
    loss_fn: Callable[[], tuple[float, list[np.ndarray]]],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn`` must read ``params`` in place and return (loss, grads aligned
    with params). Relative error per entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    """
    _, analytic = loss_fn()
    worst = 0.0
    for p, g in zip(params, analytic):
        flat_p = p.reshape(-1)
        flat_g = np.asarray(g, dtype=np.float64).reshape(-1)
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + step
            up, _ = loss_fn()
            flat_p[j] = orig - step
            down, _ = loss_fn()
            flat_p[j] = orig
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(flat_g[j]), abs(numeric), 1e-12)
            worst = max(worst, abs(flat_g[j] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint format: one JSON header line, then named float64 arrays, packed
# little-endian in header order.
# ---------------------------------------------------------------------------

def save_arrays(path, named_arrays: list[tuple[str, np.ndarray]], meta: dict) -> None:
    """Write a version-1 checkpoint file."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in named_arrays],
        **meta,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, a in named_arrays:
            data = np.ascontiguousarray(a, dtype="<f8")
            fh.write(data.tobytes())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint written by :func:`save_arrays`."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays: dict[str, np.ndarray] = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ContractError(f"{path}: truncated array {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    meta = {k: v for k, v in header.items() if k not in ("format", "version", "arrays")}
    return arrays, meta


def model_to_arrays(model: Mlp) -> tuple[list[tuple[str, np.ndarray]], dict]:
    """Flatten a model into named arrays plus an architecture description."""
    named = []
    acts = []
    for i, layer in enumerate(model.layers):
        named.append((f"layer{i}.weight", layer.weight))
        named.append((f"layer{i}.bias", layer.bias))
        acts.append(layer.activation)
    arch = {
        "input_dim": model.input_dim,
        "hidden_size": model.hidden_size,
        "depth": model.depth,
        "activations": acts,
        "head": model.head is not None,
    }
    if model.head is not None:
        named.append(("head.weight", model.head.weight))
        named.append(("head.bias", model.head.bias))
        arch["head_activation"] = model.head.activation
    return named, arch


def model_from_arrays(arrays: dict[str, np.ndarray], arch: dict) -> Mlp:
    layers = [
        Layer(arrays[f"layer{i}.weight"], arrays[f"layer{i}.bias"], act)
        for i, act in enumerate(arch["activations"])
    ]
    head = None
    if arch.get("head"):
        head = Layer(arrays["head.weight"], arrays["head.bias"], arch.get("head_activation", "sigmoid"))
    return Mlp(layers, head)


def save_model(path, model: Mlp, schema_hash: str, kind: str, extra: dict | None = None) -> None:
    named, arch = model_to_arrays(model)
    meta = {"schema_hash": schema_hash, "kind": kind, "arch": arch}
    if extra:
        meta["extra"] = extra
    save_arrays(path, named, meta)


def load_model(path) -> tuple[Mlp, dict]:
    arrays, meta = load_arrays(path)
    return model_from_arrays(arrays, meta["arch"]), meta
