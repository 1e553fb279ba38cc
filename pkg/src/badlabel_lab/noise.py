"""Label-noise generators and audits.

Four generators share one output type, :class:`NoisyLabels`:

* symmetric  - exactly ``floor(rho * n)`` samples moved to a uniformly drawn other class
* asymmetric - per class, ``floor(rho * n_c)`` samples moved along a class mapping
* idn        - instance-dependent flips, concentrated near class boundaries
* badlabel   - adversarial flips driven by a per-sample class-affinity table
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .datasets import Dataset, NoisyLabels
from .errors import ConfigError, NumericError

__all__ = [
    "BadLabelConfig", "FlagArray", "NoisyLabels", "apply_asymmetric", "apply_idn",
    "apply_symmetric", "craft_badlabel", "make_noise", "noise_rate", "transition_matrix",
    "update_flag", "write_transition_csv",
]


def _flip_count(ratio: float, n: int) -> int:
    # the epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    return int(math.floor(ratio * n + 1e-9))


def _check_ratio(ratio: float, upper_inclusive: bool = True) -> None:
    ok = 0.0 <= ratio <= 1.0 if upper_inclusive else 0.0 <= ratio < 1.0
    if not ok:
        raise ConfigError(f"noise ratio out of range: {ratio}")


def apply_symmetric(D: Dataset, ratio: float, seed: int) -> NoisyLabels:
    _check_ratio(ratio)
    C, n = D.n_classes, len(D)
    k = _flip_count(ratio, n)
    if k and C < 2:
        raise ConfigError("symmetric noise needs at least two classes")
    rng = np.random.default_rng(seed)
    noisy = D.y.copy()
    chosen = rng.choice(n, size=k, replace=False)
    if k:
        noisy[chosen] = (D.y[chosen] + rng.integers(1, C, size=k)) % C
    return NoisyLabels(np.arange(n), D.y.copy(), noisy, C, "symmetric", ratio, seed)


def apply_asymmetric(
    D: Dataset, ratio: float, seed: int, mapping: Mapping[int, int] | Sequence[int] | None = None
) -> NoisyLabels:
    _check_ratio(ratio)
    C = D.n_classes
    if mapping is None:
        target = (np.arange(C) + 1) % C
    elif isinstance(mapping, Mapping):
        target = np.array([mapping.get(c, -1) for c in range(C)])
    else:
        target = np.asarray(mapping)
    if target.shape != (C,) or target.min() < 0 or target.max() >= C:
        raise ConfigError(f"mapping must send every class in [0, {C}) to a class in range")
    fixed = np.flatnonzero(target == np.arange(C))
    if fixed.size:
        raise ConfigError(f"mapping has fixed points: classes {fixed.tolist()}")
    rng = np.random.default_rng(seed)
    noisy = D.y.copy()
    for c in range(C):
        members = np.flatnonzero(D.y == c)
        k = _flip_count(ratio, len(members))
        if k:
            noisy[rng.choice(members, size=k, replace=False)] = target[c]
    return NoisyLabels(np.arange(len(D)), D.y.copy(), noisy, C, "asymmetric", ratio, seed)


def boundary_margin(D: Dataset) -> np.ndarray:
    """Distance to the nearest foreign class centroid minus distance to the own centroid."""
    cents = D.centroids()
    dist = np.linalg.norm(D.X[:, None, :] - cents[None, :, :], axis=2)
    own = dist[np.arange(len(D)), D.y]
    dist[np.arange(len(D)), D.y] = np.inf
    dist[:, np.isnan(cents).any(axis=1)] = np.inf
    return dist.min(axis=1) - own


def apply_idn(D: Dataset, ratio: float, seed: int, std: float = 0.1) -> NoisyLabels:
    """Instance-dependent noise.

    Per-sample flip rates ``q_i ~ N(ratio, std)`` clipped to [0, 1] fix how many
    samples flip (one Bernoulli draw each). Which samples flip is drawn without
    replacement with weight ``exp(-margin_i / s)``, ``margin_i`` being the
    centroid margin of :func:`boundary_margin` and ``s`` the pooled per-feature
    spread, so flips pile up near class boundaries. Each flipped sample takes a
    wrong class drawn from the softmax of a random linear projection of its
    features.
    """
    _check_ratio(ratio, upper_inclusive=False)
    C, n = D.n_classes, len(D)
    rng = np.random.default_rng(seed)
    q = np.clip(rng.normal(ratio, std, size=n), 0.0, 1.0)
    k = int((rng.random(n) < q).sum())
    noisy = D.y.copy()
    if k == 0 or C < 2:
        return NoisyLabels(np.arange(n), D.y.copy(), noisy, C, "idn", ratio, seed)

    cents = D.centroids()
    spread = np.sqrt(np.mean((D.X - cents[D.y]) ** 2)) or 1.0
    logits = -boundary_margin(D) / spread
    # Gumbel-top-k == sequential sampling without replacement, weights exp(logits)
    keys = logits + rng.gumbel(size=n)
    chosen = np.sort(np.argsort(-keys, kind="stable")[:k])

    proj = rng.standard_normal((C, D.n_features, C))
    for i in chosen:
        wrong = np.delete(np.arange(C), D.y[i])
        p = nn.softmax((D.X[i] @ proj[D.y[i]])[wrong])
        noisy[i] = wrong[rng.choice(len(wrong), p=p)]
    return NoisyLabels(np.arange(n), D.y.copy(), noisy, C, "idn", ratio, seed)


@dataclass
class FlagArray:
    """Per-sample class affinity table; low affinity marks an attractive flip target."""

    z: np.ndarray
    t: int = 0

    @classmethod
    def from_labels(cls, y: np.ndarray, n_classes: int) -> "FlagArray":
        return cls(nn.one_hot(y, n_classes), 0)


def update_flag(flag: FlagArray, P: np.ndarray, alpha: float, normalize: bool = True) -> FlagArray:
    """Gradient step ``z - alpha * dCE/dY`` (``= z + alpha * log P``), then row softmax."""
    z = np.asarray(flag.z, dtype=np.float64)
    grad = nn.label_gradient(z, P)
    z_new = z - alpha * grad
    if not np.isfinite(z_new).all():
        raise NumericError(f"flag array became non-finite at iteration {flag.t + 1}")
    if normalize:
        z_new = nn.softmax(z_new)
    return FlagArray(z_new, flag.t + 1)


@dataclass
class BadLabelConfig:
    epochs: int = 30
    alpha: float = 0.1
    sgd: nn.SgdConfig | None = None
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.sgd is None:
            T = self.epochs
            self.sgd = nn.SgdConfig(
                learning_rate=0.1, momentum=0.9, weight_decay=5e-4,
                schedule=((T // 2, 0.1), (3 * T // 4, 0.1)) if T >= 4 else (),
                batch_size=64,
            )

    @classmethod
    def mnist(cls, seed: int = 0) -> "BadLabelConfig":
        return cls(
            epochs=20, alpha=0.1, seed=seed,
            sgd=nn.SgdConfig(learning_rate=0.01, momentum=0.5, weight_decay=5e-4, batch_size=64),
        )


@nn.single_threaded
def craft_badlabel(D: Dataset, ratio: float, cfg: BadLabelConfig | None = None):
    """Adversarial label flipping; returns ``(NoisyLabels, FlagArray)``.

    Stage I trains one network on the clean labels, continuing across epochs,
    and after every epoch moves the affinity table against the loss gradient.
    Stage II sorts samples by their smallest affinity (stable, so ties keep
    index order) and flips the first ``floor(ratio * n)`` of them to their
    lowest-affinity class, falling back to the second lowest when the lowest is
    the clean class.
    """
    _check_ratio(ratio)
    cfg = cfg or BadLabelConfig()
    C, n = D.n_classes, len(D)
    Y = nn.one_hot(D.y, C)
    model = nn.init_mlp([D.n_features, *cfg.hidden, C], cfg.seed)
    state = nn.SgdState.for_model(model)
    rng = np.random.default_rng([cfg.seed, 1])

    flag = FlagArray.from_labels(D.y, C)
    for t in range(cfg.epochs):
        nn.train_epoch(model, D.X, Y, state, cfg.sgd, epoch=t, rng=rng)
        flag = update_flag(flag, nn.predict_proba(model, D.X), cfg.alpha)

    noisy = D.y.copy()
    k = _flip_count(ratio, n)
    if k:
        if C < 2:
            raise ConfigError("cannot flip labels with a single class")
        order = np.argsort(flag.z.min(axis=1), kind="stable")[:k]
        ranked = np.argsort(flag.z[order], axis=1, kind="stable")
        lowest = ranked[:, 0]
        target = np.where(lowest == D.y[order], ranked[:, 1], lowest)
        noisy[order] = target
    labels = NoisyLabels(np.arange(n), D.y.copy(), noisy, C, "badlabel", ratio, cfg.seed)
    return labels, flag


def make_noise(kind: str, D: Dataset, ratio: float, seed: int, badlabel: BadLabelConfig | None = None):
    """Dispatch by noise name; returns ``NoisyLabels``."""
    if kind == "symmetric":
        return apply_symmetric(D, ratio, seed)
    if kind == "asymmetric":
        return apply_asymmetric(D, ratio, seed)
    if kind == "idn":
        return apply_idn(D, ratio, seed)
    if kind == "badlabel":
        cfg = badlabel or BadLabelConfig(seed=seed)
        return craft_badlabel(D, ratio, cfg)[0]
    raise ConfigError(f"unknown noise kind {kind!r}")


def transition_matrix(labels: NoisyLabels, n_classes: int | None = None) -> np.ndarray:
    """Row-normalised clean->noisy counts. Classes absent from the clean labels give NaN rows."""
    C = labels.n_classes if n_classes is None else n_classes
    counts = np.zeros((C, C))
    np.add.at(counts, (labels.clean, labels.noisy), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), np.nan)


def noise_rate(labels: NoisyLabels) -> float:
    return float(np.mean(labels.noisy != labels.clean))


def write_transition_csv(path, M: np.ndarray) -> None:
    C = M.shape[0]
    buf = io.StringIO()
    buf.write("clean\\noisy," + ",".join(str(c) for c in range(C)) + "\n")
    for c in range(C):
        buf.write(f"{c}," + ",".join(repr(float(v)) for v in M[c]) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")
