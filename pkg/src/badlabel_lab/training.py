"""Plain empirical-risk training on (possibly noisy) labels, the baseline every defense is compared with."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError
from .metrics import EpochRecord, RunMetrics


def _default_sgd() -> nn.SgdConfig:
    return nn.SgdConfig(
        learning_rate=0.02, momentum=0.9, weight_decay=5e-4,
        schedule=((20, 0.1), (30, 0.1)), batch_size=64,
    )


@dataclass
class StandardConfig:
    hidden: tuple[int, ...] = (64, 64)
    epochs: int = 40
    cp_weight: float = 0.0
    sgd: nn.SgdConfig = field(default_factory=_default_sgd)
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.cp_weight < 0:
            raise ConfigError(f"cp_weight must be >= 0, got {self.cp_weight}")


@nn.single_threaded
def train_standard(X, labels, cfg: StandardConfig | None = None, test=None, n_classes=None):
    """Train one network with cross-entropy on ``labels``; returns ``(model, RunMetrics)``."""
    cfg = cfg or StandardConfig()
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    C = int(n_classes or labels.max() + 1)
    model = nn.init_mlp([X.shape[1], *cfg.hidden, C], cfg.seed)
    state = nn.SgdState.for_model(model)
    rng = np.random.default_rng([cfg.seed, 1])
    Y = nn.one_hot(labels, C)
    metrics = RunMetrics()
    for e in range(cfg.epochs):
        loss = nn.train_epoch(model, X, Y, state, cfg.sgd, e, rng, cfg.cp_weight)
        rec = EpochRecord(epoch=e, train_loss=float(loss))
        if test is not None:
            rec.test_acc = nn.accuracy(model, test[0], test[1])
        metrics.add(rec)
    return model, metrics
