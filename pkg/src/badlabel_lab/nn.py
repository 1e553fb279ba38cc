"""Dense rectifier networks in plain numpy with hand-written backprop.

Everything is float64. A model is a list of ``(in, out)`` weight matrices and
bias vectors; hidden layers use ReLU and the output layer is linear (logits).
"""
from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, DataError, NumericError, ShapeError


def single_threaded(fn):
    """Run ``fn`` with one BLAS thread.

    Multi-threaded GEMM splits reductions by core count, which changes the last
    bits of every product; pinning keeps results independent of the machine.
    """
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with threadpool_limits(limits=1, user_api="blas"):
            return fn(*args, **kwargs)
    return wrapper


EPS = 1e-12

CHECKPOINT_MAGIC = b"BLAB"
CHECKPOINT_VERSION = 1


@dataclass
class MlpModel:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_features(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "MlpModel":
        return MlpModel(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def parameters(self) -> list[np.ndarray]:
        """Weights and biases interleaved per layer (W0, b0, W1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.parameters())


@dataclass
class SgdConfig:
    """Mini-batch SGD settings.

    ``schedule`` holds ``(epoch, multiplier)`` pairs; from ``epoch`` onward the
    learning rate is multiplied by ``multiplier`` (multipliers accumulate).
    """

    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: tuple[tuple[int, float], ...] = ()
    batch_size: int = 64

    def __post_init__(self):
        self.schedule = tuple((int(e), float(m)) for e, m in self.schedule)
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        epochs = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigError(f"schedule epochs must be strictly increasing: {epochs}")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for start, mult in self.schedule:
            if epoch >= start:
                lr *= mult
        return lr


@dataclass
class SgdState:
    """Momentum buffers, one per parameter array (same order as ``parameters()``)."""

    velocity: list[np.ndarray] = field(default_factory=list)
    steps: int = 0

    @classmethod
    def for_model(cls, model: MlpModel) -> "SgdState":
        return cls([np.zeros_like(p) for p in model.parameters()])


def init_mlp(layer_dims: Sequence[int], seed: int) -> MlpModel:
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ConfigError(f"need at least input and output dims, got {dims}")
    if any(d <= 0 for d in dims):
        raise ConfigError(f"layer dims must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(dims, weights, biases)


def _check_features(model: MlpModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ShapeError(
            f"expected features of shape (n, {model.n_features}), got {X.shape}"
        )
    return X


def forward(model: MlpModel, X: np.ndarray, return_cache: bool = False):
    """Logits for ``X``. With ``return_cache`` also returns layer inputs for backprop."""
    h = _check_features(model, X)
    cache = [h]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
            cache.append(h)
    if return_cache:
        return h, cache
    return h


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise NumericError("softmax received non-finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _match(Y: np.ndarray, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Y = np.asarray(Y, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if Y.shape != P.shape:
        raise ShapeError(f"label shape {Y.shape} does not match prediction shape {P.shape}")
    return Y, P


def cross_entropy_soft(Y: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Per-row ``-sum_j Y_ij log P_ij`` with probabilities clamped at ``EPS``."""
    Y, P = _match(Y, P)
    return -(Y * np.log(np.maximum(P, EPS))).sum(axis=-1)


def entropy(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    return -(P * np.log(np.maximum(P, EPS))).sum(axis=-1)


def label_gradient(Y: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Gradient of :func:`cross_entropy_soft` with respect to the label matrix.

    The loss is linear in ``Y`` so the gradient is ``-log P`` whatever ``Y`` is.
    """
    Y, P = _match(Y, P)
    return -np.log(np.maximum(P, EPS))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def penalized_loss(logits: np.ndarray, Y: np.ndarray, cp_weight: float = 0.0):
    """Per-sample ``CE - cp_weight * H`` and its gradient w.r.t. the logits.

    The gradient is that of the *mean* over rows, ready for :func:`backward`.
    """
    P = softmax(logits)
    Y, P = _match(Y, P)
    n = P.shape[0]
    loss = cross_entropy_soft(Y, P)
    grad = P * Y.sum(axis=1, keepdims=True) - Y
    if cp_weight:
        H = entropy(P)
        loss = loss - cp_weight * H
        logp = np.log(np.maximum(P, EPS))
        # dH/dz_k = -p_k (log p_k + H)
        grad = grad + cp_weight * P * (logp + H[:, None])
    return loss, grad / n


def backward(model: MlpModel, cache: list[np.ndarray], dlogits: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients (same order as ``model.parameters()``)."""
    grads: list[np.ndarray] = []
    delta = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        h_in = cache[i]
        grads.append(delta.sum(axis=0))
        grads.append(h_in.T @ delta)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (h_in > 0)
    grads.reverse()
    return grads


def sgd_update(
    model: MlpModel, grads: list[np.ndarray], state: SgdState, cfg: SgdConfig, lr: float
) -> None:
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in model.parameters()]
    params = model.parameters()
    for k, (p, g, v) in enumerate(zip(params, grads, state.velocity)):
        if k % 2 == 0 and cfg.weight_decay:
            g = g + cfg.weight_decay * p
        v *= cfg.momentum
        v -= lr * g
        p += v
    state.steps += 1


def train_step(
    model: MlpModel,
    X: np.ndarray,
    Y: np.ndarray,
    state: SgdState,
    cfg: SgdConfig,
    cp_weight: float = 0.0,
    lr: float | None = None,
    context: str = "",
) -> float:
    """One SGD step on the batch, minimizing ``mean(CE - cp_weight * H)``.

    Updates ``model`` and ``state`` in place and returns the pre-step mean loss.
    """
    if len(X) == 0:
        raise DataError("train_step received an empty batch")
    logits, cache = forward(model, X, return_cache=True)
    if not np.isfinite(logits).all():
        raise NumericError(f"non-finite logits {context}".strip())
    loss, dlogits = penalized_loss(logits, Y, cp_weight)
    mean_loss = float(loss.mean())
    if not np.isfinite(mean_loss):
        raise NumericError(f"non-finite loss {context}".strip())
    grads = backward(model, cache, dlogits)
    sgd_update(model, grads, state, cfg, cfg.learning_rate if lr is None else lr)
    return mean_loss


def train_epoch(
    model: MlpModel,
    X: np.ndarray,
    Y: np.ndarray,
    state: SgdState,
    cfg: SgdConfig,
    epoch: int,
    rng: np.random.Generator,
    cp_weight: float = 0.0,
) -> float:
    """Shuffle once, sweep mini-batches, return the sample-weighted mean loss."""
    n = len(X)
    order = rng.permutation(n)
    lr = cfg.lr_at(epoch)
    total = 0.0
    for b, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        loss = train_step(
            model, X[idx], Y[idx], state, cfg, cp_weight, lr,
            context=f"at epoch {epoch}, batch {b}",
        )
        total += loss * len(idx)
    return total / max(n, 1)


def predict_proba(model: MlpModel, X: np.ndarray) -> np.ndarray:
    return softmax(forward(model, X))


def per_sample_loss(model: MlpModel, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Cross-entropy of each sample's hard label under the model's prediction."""
    labels = np.asarray(labels)
    C = model.n_classes
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise DataError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    P = predict_proba(model, X)
    return cross_entropy_soft(one_hot(labels, C), P)


def accuracy(model: MlpModel, X: np.ndarray, labels: np.ndarray) -> float:
    return float((forward(model, X).argmax(axis=1) == np.asarray(labels)).mean())


def save_checkpoint(model: MlpModel, path) -> None:
    """Write ``BLAB`` + u16 version + u16 layer count + u32 dims, then float64 params.

    Layer count is the number of weight matrices, so ``count + 1`` dims follow.
    Parameters are little-endian, row-major, ordered W0, b0, W1, b1, ...
    """
    n_layers = len(model.weights)
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<HH", CHECKPOINT_VERSION, n_layers),
        struct.pack(f"<{n_layers + 1}I", *model.layer_dims),
    ]
    for p in model.parameters():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> MlpModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    version, n_layers = struct.unpack_from("<HH", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    offset = 8
    need = offset + 4 * (n_layers + 1)
    if len(raw) < need:
        raise DataError(f"{path}: truncated dimension list")
    dims = list(struct.unpack_from(f"<{n_layers + 1}I", raw, offset))
    offset = need
    expected = sum(a * b + b for a, b in zip(dims[:-1], dims[1:])) * 8
    if len(raw) - offset != expected:
        raise DataError(f"{path}: expected {expected} parameter bytes, found {len(raw) - offset}")
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(raw, dtype="<f8", count=a * b, offset=offset).reshape(a, b)
        offset += 8 * a * b
        bias = np.frombuffer(raw, dtype="<f8", count=b, offset=offset)
        offset += 8 * b
        weights.append(w.astype(np.float64))
        biases.append(bias.astype(np.float64))
    return MlpModel(dims, weights, biases)
