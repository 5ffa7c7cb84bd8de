"""Two-layer ReLU MLP with manual backprop and heavy-ball SGD.

Training runs in float32; gradient-fidelity checks build float64 params and
get float64 math throughout. Checkpoints store float32 regardless.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError, DivergenceError

_MAGIC = b"CADRCK01"
_HEADER = struct.Struct("<III")

# Probabilities are clamped to this range before any log.
P_LO = 1e-7
P_HI = 1.0 - 1e-7


@dataclass
class ModelParams:
    """Weights w1 (h, d), b1 (h,), w2 (C, h), b2 (C,). Also used as a gradient container."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def class_count(self) -> int:
        return self.w2.shape[0]

    def tensors(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)


@dataclass
class OptimizerState:
    """Heavy-ball velocities, one per parameter tensor."""

    vw1: np.ndarray
    vb1: np.ndarray
    vw2: np.ndarray
    vb2: np.ndarray
    learning_rate: float
    momentum: float

    def tensors(self) -> tuple[np.ndarray, ...]:
        return (self.vw1, self.vb1, self.vw2, self.vb2)


@dataclass
class AugmentConfig:
    """Gaussian-noise augmentation; the strong kind also zeroes random coordinates."""

    weak_noise_sigma: float
    strong_noise_sigma: float
    strong_mask_fraction: float

    def __post_init__(self):
        if self.weak_noise_sigma < 0 or self.strong_noise_sigma < 0:
            raise ConfigError("noise sigmas must be non-negative")
        if self.strong_noise_sigma < self.weak_noise_sigma:
            raise ConfigError("strong_noise_sigma must be >= weak_noise_sigma")
        if not 0 <= self.strong_mask_fraction < 1:
            raise ConfigError("strong_mask_fraction must be in [0, 1)")


def init_params(feature_dim: int, hidden_dim: int, class_count: int, seed: int,
                dtype=np.float32) -> ModelParams:
    """He-scaled random weights, zero biases."""
    if min(feature_dim, hidden_dim) < 1 or class_count < 2:
        raise ConfigError("bad model dimensions")
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((hidden_dim, feature_dim)) * np.sqrt(2.0 / feature_dim)
    w2 = rng.standard_normal((class_count, hidden_dim)) * np.sqrt(2.0 / hidden_dim)
    return ModelParams(
        w1=w1.astype(dtype),
        b1=np.zeros(hidden_dim, dtype=dtype),
        w2=w2.astype(dtype),
        b2=np.zeros(class_count, dtype=dtype),
    )


def init_optimizer(params: ModelParams, learning_rate: float, momentum: float) -> OptimizerState:
    if learning_rate <= 0:
        raise ConfigError("learning_rate must be positive")
    if not 0 <= momentum < 1:
        raise ConfigError("momentum must be in [0, 1)")
    zeros = [np.zeros_like(t) for t in params.tensors()]
    return OptimizerState(*zeros, learning_rate=learning_rate, momentum=momentum)


def forward(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Logits = w2 @ relu(w1 @ x + b1) + b2, row-wise over the batch."""
    x = np.asarray(batch, dtype=params.w1.dtype)
    hidden = np.maximum(x @ params.w1.T + params.b1, 0.0)
    return hidden @ params.w2.T + params.b2


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1 within 1e-12."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Argmax class per row of un-augmented features."""
    if batch.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(forward(params, batch), axis=1)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample -log p[label], with the probability clamped to [P_LO, P_HI]."""
    p = probs[np.arange(len(labels)), labels]
    return -np.log(np.clip(p, P_LO, P_HI))


def cross_entropy_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample d(-log clamp(p_y))/d(logits) rows: softmax minus one-hot.

    Rows where the clamp is active are zero: there the loss is locally
    constant, and finite differences of the actual computed loss agree.
    """
    n = len(labels)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    p = probs[np.arange(n), labels]
    active = (p > P_LO) & (p < P_HI)
    grad[~active] = 0.0
    return grad


def augment(batch: np.ndarray, cfg: AugmentConfig, kind: str, seed) -> np.ndarray:
    """Return a noised copy of batch; kind is "weak" or "strong".

    Weak adds N(0, weak_sigma^2) per coordinate. Strong adds N(0, strong_sigma^2)
    and then zeroes round(strong_mask_fraction * d) coordinates per row, chosen
    uniformly. `seed` may be an int or a live np.random.Generator.
    """
    if kind not in ("weak", "strong"):
        raise ConfigError(f"augment kind must be 'weak' or 'strong', got {kind!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.array(batch, dtype=np.float64, copy=True)
    if x.shape[0] == 0:
        return x.astype(batch.dtype)
    sigma = cfg.weak_noise_sigma if kind == "weak" else cfg.strong_noise_sigma
    if sigma > 0:
        x += sigma * rng.standard_normal(x.shape)
    if kind == "strong":
        d = x.shape[1]
        k = int(np.floor(cfg.strong_mask_fraction * d + 0.5))
        if k > 0:
            # k lowest uniform draws per row pick the zeroed coordinates.
            cols = np.argsort(rng.random(x.shape), axis=1)[:, :k]
            np.put_along_axis(x, cols, 0.0, axis=1)
    return x.astype(batch.dtype)


def backward(params: ModelParams, batch: np.ndarray, upstream: np.ndarray) -> ModelParams:
    """Exact chain rule from d(loss)/d(logits) rows to parameter gradients.

    Linear in upstream, so per-sample gradients compose by summation; loss
    functions bake any 1/N factors into the upstream rows they return.
    """
    x = np.asarray(batch, dtype=params.w1.dtype)
    g = np.asarray(upstream, dtype=params.w1.dtype)
    pre = x @ params.w1.T + params.b1
    hidden = np.maximum(pre, 0.0)
    dw2 = g.T @ hidden
    db2 = g.sum(axis=0)
    dhidden = g @ params.w2
    dhidden = dhidden * (pre > 0)
    dw1 = dhidden.T @ x
    db1 = dhidden.sum(axis=0)
    return ModelParams(w1=dw1, b1=db1, w2=dw2, b2=db2)


def sgd_step(params: ModelParams, state: OptimizerState, grads: ModelParams) -> None:
    """v <- momentum * v + g; theta <- theta - lr * v. Mutates params and state."""
    for theta, v, g in zip(params.tensors(), state.tensors(), grads.tensors()):
        v *= state.momentum
        v += g
        theta -= state.learning_rate * v
    for theta in params.tensors():
        if not np.all(np.isfinite(theta)):
            raise DivergenceError("non-finite parameter after SGD step")


def save_checkpoint(params: ModelParams, state: OptimizerState, path) -> None:
    """Binary checkpoint: magic, u32 (d, h, C), then params and velocities as float32 LE."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER.pack(params.feature_dim, params.hidden_dim, params.class_count))
        for t in params.tensors() + state.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, ModelParams]:
    """Read a checkpoint; returns (params, velocities), both float32."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    if blob[: len(_MAGIC)] != _MAGIC:
        raise DataFormatError(f"{path}: bad magic; not a checkpoint file")
    d, h, c = _HEADER.unpack_from(blob, len(_MAGIC))
    shapes = [(h, d), (h,), (c, h), (c,)] * 2
    offset = len(_MAGIC) + _HEADER.size
    expected = offset + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: size mismatch (found {len(blob)} bytes, header implies {expected})"
        )
    tensors = []
    for shape in shapes:
        count = int(np.prod(shape))
        tensors.append(
            np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        )
        offset += 4 * count
    return ModelParams(*tensors[:4]), ModelParams(*tensors[4:])
