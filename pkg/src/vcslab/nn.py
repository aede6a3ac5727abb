"""Small feed-forward network engine.

Networks are plain float64 vectors (``params``) paired with a :class:`NetSpec`
describing the layer widths. Layout is per layer: weight matrix of shape
``(fan_in, fan_out)`` in row-major order, then the bias vector. Hidden layers
use ReLU, the output layer is affine.

Everything works on batches: ``x`` may be a single input vector or a
``(batch, width)`` matrix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DivergenceError,
    FormatError,
    TruncatedFileError,
    UnsupportedVersionError,
)

PARAMS_MAGIC = b"VCSP"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class NetSpec:
    layer_widths: tuple[int, ...]
    nonlinearity: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ValueError("a network needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.nonlinearity != "relu":
            raise ValueError(f"unsupported nonlinearity {self.nonlinearity!r}")
        object.__setattr__(self, "layer_widths", widths)
        offsets, pos = [], 0
        for i in range(len(widths) - 1):
            b0 = pos + widths[i] * widths[i + 1]
            offsets.append((pos, b0, b0 + widths[i + 1]))
            pos = b0 + widths[i + 1]
        object.__setattr__(self, "_offsets", tuple(offsets))
        object.__setattr__(self, "_n_params", pos)

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        return self._n_params

    def offsets(self) -> tuple[tuple[int, int, int], ...]:
        """(weight_start, bias_start, bias_end) for every layer."""
        return self._offsets


def unpack(params: np.ndarray, spec: NetSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``(W, b)`` into ``params`` for each layer."""
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    w = spec.layer_widths
    layers = []
    for i, (w0, b0, b1) in enumerate(spec.offsets()):
        layers.append((params[w0:b0].reshape(w[i], w[i + 1]), params[b0:b1]))
    return layers


def net_init(spec: NetSpec, seed: int) -> np.ndarray:
    """Fan-in uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.n_params)
    for (W, _), fan_in in zip(unpack(params, spec), spec.layer_widths[:-1]):
        bound = 1.0 / np.sqrt(fan_in)
        W[...] = rng.uniform(-bound, bound, size=W.shape)
    return params


@dataclass
class Cache:
    """Activations recorded by :func:`forward` for one backward pass."""

    params: np.ndarray
    spec: NetSpec
    inputs: list[np.ndarray]  # input to each layer
    preacts: list[np.ndarray]  # pre-activation of each hidden layer
    squeeze: bool = False


@dataclass
class Gradient:
    wrt_params: np.ndarray
    wrt_input: np.ndarray


def forward(params: np.ndarray, spec: NetSpec, x) -> tuple[np.ndarray, Cache]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != spec.in_dim:
        raise ValueError(f"input width {h.shape[-1]} does not match network input {spec.in_dim}")
    layers = unpack(params, spec)
    inputs, preacts = [], []
    for i, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W + b
        if i < len(layers) - 1:
            preacts.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
    cache = Cache(params=params, spec=spec, inputs=inputs, preacts=preacts, squeeze=squeeze)
    return (h[0] if squeeze else h), cache


def predict(params: np.ndarray, spec: NetSpec, x) -> np.ndarray:
    return forward(params, spec, x)[0]


def _deltas(params, spec, cache, output_grad):
    """Backpropagated signal at the output of every layer, last layer first."""
    if cache.params is not params or cache.spec != spec:
        raise ValueError("cache was produced by a different parameter vector or spec")
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :] if g.ndim == 1 else g
    batch = cache.inputs[0].shape[0]
    if g.shape != (batch, spec.out_dim):
        raise ValueError(f"output_grad shape {g.shape} does not match output ({batch}, {spec.out_dim})")
    layers = unpack(params, spec)
    deltas = [None] * len(layers)
    delta = g
    for i in range(len(layers) - 1, -1, -1):
        deltas[i] = delta
        if i > 0:
            delta = (delta @ layers[i][0].T) * (cache.preacts[i - 1] > 0.0)
    return layers, deltas


def backward(params: np.ndarray, spec: NetSpec, cache: Cache, output_grad) -> Gradient:
    """Exact gradient of ``sum(output_grad * output)`` w.r.t. params and input.

    Parameter gradients are summed over the batch; the input gradient keeps
    one row per sample.
    """
    layers, deltas = _deltas(params, spec, cache, output_grad)
    grad = np.empty(spec.n_params)
    for (w0, b0, b1), a, d in zip(spec.offsets(), cache.inputs, deltas):
        grad[w0:b0] = (a.T @ d).ravel()
        grad[b0:b1] = d.sum(axis=0)
    dx = deltas[0] @ layers[0][0].T
    return Gradient(wrt_params=grad, wrt_input=dx[0] if cache.squeeze else dx)


def input_gradient(params: np.ndarray, spec: NetSpec, x, output_grad=None) -> tuple[np.ndarray, np.ndarray]:
    """Output and d(output)/d(input) for a scalar-output network (batched)."""
    out, cache = forward(params, spec, x)
    if output_grad is None:
        output_grad = np.ones_like(out)
    layers, deltas = _deltas(params, spec, cache, output_grad)
    dx = deltas[0] @ layers[0][0].T
    return out, (dx[0] if cache.squeeze else dx)


def per_sample_grads(params: np.ndarray, spec: NetSpec, x) -> np.ndarray:
    """Row ``i`` is the parameter gradient of the scalar output at ``x[i]``."""
    if spec.out_dim != 1:
        raise ValueError("per-sample gradients are defined for scalar-output networks")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, cache = forward(params, spec, x)
    _, deltas = _deltas(params, spec, cache, np.ones((x.shape[0], 1)))
    out = np.empty((x.shape[0], spec.n_params))
    for (w0, b0, b1), a, d in zip(spec.offsets(), cache.inputs, deltas):
        out[:, w0:b0] = (a[:, :, None] * d[:, None, :]).reshape(x.shape[0], -1)
        out[:, b0:b1] = d
    return out


# -- optimisation -------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), **kw)


def adam_step(params, grad, state: AdamState, lr: float, weight_decay: float = 0.0):
    """One bias-corrected Adam update with decoupled weight decay.

    Returns ``(new_params, new_state)``; inputs are left untouched.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and optimizer state shapes differ")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient", step=state.step_count)
    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * (grad * grad)
    denom = np.sqrt(v / (1.0 - b2**t))
    denom += state.eps
    step = m / denom
    step *= lr / (1.0 - b1**t)
    new = params * (1.0 - lr * weight_decay) if weight_decay else params.copy()
    new -= step
    return new, AdamState(m=m, v=v, step_count=t, beta1=b1, beta2=b2, eps=state.eps)


def polyak_update(target: np.ndarray, online: np.ndarray, rate: float) -> np.ndarray:
    """``rate * online + (1 - rate) * target``."""
    if target.shape != online.shape:
        raise ValueError("target and online parameter layouts differ")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"target update rate must lie in [0, 1], got {rate}")
    if rate == 1.0:
        return online.copy()
    if rate == 0.0:
        return target.copy()
    return rate * online + (1.0 - rate) * target


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_steps: int = 0

    def __call__(self, step: int) -> float:
        if self.warmup_steps > 0:
            return self.base_lr * min(1.0, (step + 1) / self.warmup_steps)
        return self.base_lr


# -- serialisation -----------------------------------------------------------


def params_to_bytes(params: np.ndarray, spec: NetSpec) -> bytes:
    if params.shape != (spec.n_params,):
        raise ValueError("parameter vector does not match spec")
    w = spec.layer_widths
    head = PARAMS_MAGIC + struct.pack(f"<II{len(w)}I", PARAMS_VERSION, len(w), *w)
    return head + np.asarray(params, dtype="<f8").tobytes()


def params_from_bytes(buf: bytes) -> tuple[np.ndarray, NetSpec]:
    if len(buf) < 12:
        raise TruncatedFileError("parameter file shorter than its header")
    if buf[:4] != PARAMS_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {PARAMS_MAGIC!r}")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != PARAMS_VERSION:
        raise UnsupportedVersionError(f"unsupported parameter file version {version}")
    end = 12 + 4 * n
    if len(buf) < end:
        raise TruncatedFileError("parameter file truncated inside the width table")
    try:
        spec = NetSpec(struct.unpack_from(f"<{n}I", buf, 12))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    size = 8 * spec.n_params
    if len(buf) < end + size:
        raise TruncatedFileError("parameter file truncated inside the value block")
    if len(buf) > end + size:
        raise FormatError("trailing bytes after parameter values")
    params = np.frombuffer(buf, dtype="<f8", count=spec.n_params, offset=end).astype(np.float64)
    return params, spec


def save_params(path, params: np.ndarray, spec: NetSpec) -> None:
    Path(path).write_bytes(params_to_bytes(params, spec))


def load_params(path) -> tuple[np.ndarray, NetSpec]:
    return params_from_bytes(Path(path).read_bytes())
