"""Dense network core: MLP feature extractor, linear head, exact gradients, SGD.

All arithmetic is float64 with a fixed evaluation order, so training is
bitwise reproducible and analytic gradients can be checked against central
finite differences. Frozen parameter sets (the pretrained extractor and the
probed head snapshot) are stored as read-only arrays; any attempt to mutate
them raises.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .rng import substream

_ACTIVATIONS = ("relu", "tanh")


class ShapeError(ValueError):
    """Array dimensions do not match the declared parameter shapes."""


def _as_f64(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def array_checksum(*arrays: np.ndarray) -> str:
    """SHA-256 over the raw little-endian float64 bytes of the given arrays."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class MlpParams:
    """Feed-forward extractor: weights[i] is [out x in], activation after
    every layer except the last."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix, at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i} input width {w.shape[1]} != layer {i-1} output "
                    f"width {self.weights[i - 1].shape[0]}"
                )
        if not all(np.isfinite(w).all() and np.isfinite(b).all()
                   for w, b in zip(self.weights, self.biases)):
            raise ValueError("non-finite parameter entries")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation)

    def frozen_copy(self) -> "MlpParams":
        out = self.copy()
        for a in out.weights + out.biases:
            _freeze(a)
        return out

    def checksum(self) -> str:
        return array_checksum(*self.weights, *self.biases)


@dataclass
class HeadParams:
    """Linear classifier over extractor features: logits = x @ W.T + b."""

    weight: np.ndarray  # [C x d]
    bias: np.ndarray    # [C]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("head weight must be 2-D, bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"head rows {self.weight.shape[0]} != bias size {self.bias.shape[0]}")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ValueError("non-finite head entries")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "HeadParams":
        return HeadParams(self.weight.copy(), self.bias.copy())

    def frozen_copy(self) -> "HeadParams":
        out = self.copy()
        _freeze(out.weight)
        _freeze(out.bias)
        return out

    def checksum(self) -> str:
        return array_checksum(self.weight, self.bias)


@dataclass
class ModelState:
    """Trainable extractor f and head h, alongside the frozen pretrained
    snapshot f0 and the frozen probed head h_lp (set after probing)."""

    f: MlpParams
    h: HeadParams
    f0: MlpParams
    h_lp: HeadParams | None = None

    def __post_init__(self):
        if self.f.feature_dim != self.h.feature_dim:
            raise ShapeError("head feature width does not match extractor output")

    def set_probe_snapshot(self, head: HeadParams) -> None:
        self.h_lp = head.frozen_copy()

    def copy_trainables(self) -> tuple[MlpParams, HeadParams]:
        return self.f.copy(), self.h.copy()


@dataclass
class GradSet:
    """One gradient buffer per trainable buffer in (f, h), same shapes."""

    f_weights: list[np.ndarray]
    f_biases: list[np.ndarray]
    h_weight: np.ndarray
    h_bias: np.ndarray

    @classmethod
    def zeros_like(cls, state: ModelState) -> "GradSet":
        return cls(
            [np.zeros_like(w) for w in state.f.weights],
            [np.zeros_like(b) for b in state.f.biases],
            np.zeros_like(state.h.weight),
            np.zeros_like(state.h.bias),
        )

    def buffers(self) -> list[np.ndarray]:
        return [*self.f_weights, *self.f_biases, self.h_weight, self.h_bias]


@dataclass
class OptimizerState:
    """Plain SGD with a single step-decay milestone."""

    learning_rate: float = 0.001
    decay_epoch: int = 24
    decay_factor: float = 0.1
    epoch: int = 0

    @property
    def effective_lr(self) -> float:
        passed = 1 if self.epoch >= self.decay_epoch else 0
        return self.learning_rate * self.decay_factor ** passed


def init_mlp(input_dim: int, hidden_dims: tuple[int, ...], seed: int,
             activation: str = "relu", stream: tuple = ("init", "mlp")) -> MlpParams:
    """Uniform[-s, s] weights with s = sqrt(1/fan_in), zero biases; one named
    stream per layer."""
    dims = [input_dim, *hidden_dims]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        s = np.sqrt(1.0 / fan_in)
        rng = substream(seed, *stream, f"layer{i}")
        weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation)


def init_head(num_classes: int, feature_dim: int, seed: int,
              stream: tuple = ("init", "head")) -> HeadParams:
    s = np.sqrt(1.0 / feature_dim)
    rng = substream(seed, *stream)
    return HeadParams(rng.uniform(-s, s, size=(num_classes, feature_dim)),
                      np.zeros(num_classes))


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Features for a batch: post-activation output of the final layer."""
    return mlp_forward_cached(params, x)[0]


def mlp_forward_cached(params: MlpParams, x: np.ndarray):
    x = _as_f64(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.input_dim:
        raise ShapeError(
            f"input width {x.shape[1]} != first layer width {params.input_dim}")
    cache = []  # (layer input, pre-activation) per layer
    a = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        cache.append((a, z))
        a = z if i == last else _activate(z, params.activation)
    return a, cache


def mlp_backward(params: MlpParams, cache, d_out: np.ndarray):
    """Gradients of a scalar loss w.r.t. every layer's weights and biases,
    given d_out = dL/d(features)."""
    n = len(params.weights)
    d_ws = [None] * n
    d_bs = [None] * n
    d = d_out
    for i in range(n - 1, -1, -1):
        a_in, z = cache[i]
        if i != n - 1:
            d = d * _activate_grad(z, params.activation)
        d_ws[i] = d.T @ a_in
        d_bs[i] = d.sum(axis=0)
        if i > 0:
            d = d @ params.weights[i]
    return d_ws, d_bs


def head_forward(h: HeadParams, features: np.ndarray) -> np.ndarray:
    features = _as_f64(features)
    if features.ndim == 1:
        features = features[None, :]
    if features.shape[1] != h.feature_dim:
        raise ShapeError(
            f"feature width {features.shape[1]} != head width {h.feature_dim}")
    return features @ h.weight.T + h.bias


def head_backward(h: HeadParams, features: np.ndarray, d_logits: np.ndarray):
    d_w = d_logits.T @ features
    d_b = d_logits.sum(axis=0)
    d_features = d_logits @ h.weight
    return d_w, d_b, d_features


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; safe for |z| up to ~1e3."""
    z = _as_f64(z)
    if not np.isfinite(z).all():
        raise ValueError("non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = _as_f64(z)
    if not np.isfinite(z).all():
        raise ValueError("non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def per_sample_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logits = _as_f64(logits)
    if logits.ndim == 1:
        logits = logits[None, :]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    c = logits.shape[1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label out of range [0, {c})")
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over the batch."""
    return float(per_sample_cross_entropy(logits, labels).mean())


def softmax_ce_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean cross-entropy w.r.t. the logits: (softmax - onehot)/B."""
    p = softmax(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    g = p.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def sgd_step(state: ModelState, grads: GradSet, opt: OptimizerState) -> ModelState:
    """p <- p - lr_effective * g for every trainable buffer, in place.

    Frozen buffers (f0, h_lp) are never referenced, let alone written.
    """
    lr = opt.effective_lr
    params = [*state.f.weights, *state.f.biases, state.h.weight, state.h.bias]
    bufs = grads.buffers()
    if len(params) != len(bufs):
        raise ShapeError("gradient buffer count mismatch")
    for p, g in zip(params, bufs):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p -= lr * g
    return state
