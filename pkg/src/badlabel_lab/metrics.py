"""Loss histograms, clean/noisy separability, division quality and run tracking."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

METRICS_HEADER = (
    "epoch", "train_loss", "test_acc", "labeled_precision", "labeled_recall",
    "gmm_converged", "gmm_iters",
)
HISTOGRAM_HEADER = ("bin_left", "bin_right", "count_clean", "count_noisy")


def _pair(losses, clean_mask) -> tuple[np.ndarray, np.ndarray]:
    losses = np.asarray(losses, dtype=np.float64).ravel()
    clean_mask = np.asarray(clean_mask, dtype=bool).ravel()
    if losses.size == 0:
        raise DataError("no loss values given")
    if losses.shape != clean_mask.shape:
        raise DataError(f"{losses.size} losses but {clean_mask.size} mask entries")
    return losses, clean_mask


def loss_histogram(losses, clean_mask, bins: int = 20) -> np.ndarray:
    """Equal-width histogram over ``[min, max]``.

    Returns an array with columns ``bin_left, bin_right, count_clean, count_noisy``.
    """
    losses, clean_mask = _pair(losses, clean_mask)
    if bins < 1:
        raise DataError(f"bins must be >= 1, got {bins}")
    lo, hi = float(losses.min()), float(losses.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    clean, _ = np.histogram(losses[clean_mask], bins=edges)
    noisy, _ = np.histogram(losses[~clean_mask], bins=edges)
    return np.column_stack([edges[:-1], edges[1:], clean, noisy])


def separability_auc(losses, clean_mask) -> float:
    """Probability that a random noisy sample has a higher loss than a random clean one.

    Ties count one half (midranks).
    """
    losses, clean_mask = _pair(losses, clean_mask)
    n_clean = int(clean_mask.sum())
    n_noisy = clean_mask.size - n_clean
    if n_clean == 0 or n_noisy == 0:
        raise DataError("separability needs both clean and noisy samples")
    ranks = rankdata(losses)
    rank_sum = ranks[~clean_mask].sum()
    return float((rank_sum - n_noisy * (n_noisy + 1) / 2) / (n_noisy * n_clean))


def division_quality(labeled_idx, clean_mask) -> tuple[float, float]:
    """(precision, recall) of a labeled set against the ground-truth clean mask."""
    clean_mask = np.asarray(clean_mask, dtype=bool)
    labeled_idx = np.asarray(labeled_idx, dtype=np.int64)
    if labeled_idx.size == 0:
        raise DataError("labeled set is empty")
    hits = int(clean_mask[labeled_idx].sum())
    total_clean = int(clean_mask.sum())
    precision = hits / labeled_idx.size
    recall = hits / total_clean if total_clean else math.nan
    return precision, recall


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float = math.nan
    test_acc: float = math.nan
    labeled_precision: float = math.nan
    labeled_recall: float = math.nan
    gmm_converged: bool | None = None
    gmm_iters: int | None = None


@dataclass
class RunMetrics:
    records: list[EpochRecord] = field(default_factory=list)

    def add(self, record: EpochRecord) -> None:
        expected = len(self.records)
        if record.epoch != expected:
            raise DataError(f"epoch {record.epoch} recorded out of order (expected {expected})")
        self.records.append(record)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.test_acc for r in self.records])

    @property
    def best(self) -> float:
        return track(self)[0]

    @property
    def last_mean(self) -> float:
        return track(self)[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(METRICS_HEADER) + "\n")
        for r in self.records:
            cells = []
            for f in fields(EpochRecord):
                v = getattr(r, f.name)
                if v is None:
                    cells.append("")
                elif isinstance(v, (bool, np.bool_)):
                    cells.append(str(int(v)))
                elif isinstance(v, (float, np.floating)):
                    cells.append(repr(float(v)))
                else:
                    cells.append(str(v))
            buf.write(",".join(cells) + "\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="\n")


def track(metrics: RunMetrics | list[float]) -> tuple[float, float]:
    """Best accuracy over all epochs and the mean of the final ``min(10, E)``."""
    acc = metrics.accuracies if isinstance(metrics, RunMetrics) else np.asarray(metrics, float)
    if acc.size == 0:
        raise DataError("no epochs recorded")
    return float(np.nanmax(acc)), float(np.nanmean(acc[-10:]))


def write_histogram_csv(path, table: np.ndarray) -> None:
    buf = io.StringIO()
    buf.write(",".join(HISTOGRAM_HEADER) + "\n")
    for left, right, c, n in table:
        buf.write(f"{float(left)!r},{float(right)!r},{int(c)},{int(n)}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")
