"""Datasets, the synthetic three-blob generator, IDX parsing, and file formats.

File formats
------------
Dataset CSV
    header ``index,f0,...,f{d-1},label``; one row per sample.
Label CSV
    header ``index,clean_label,noisy_label``, rows sorted by index, LF endings.
    Provenance (noise kind, ratio, seed, class count) goes to a ``.json`` sidecar.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

LABEL_HEADER = ["index", "clean_label", "noisy_label"]

DEFAULT_CENTERS = ((0.0, 0.0), (4.0, 0.0), (2.0, 3.5))


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.X.shape}")
        if len(self.X) != len(self.y):
            raise DataError(f"{len(self.X)} feature rows but {len(self.y)} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def centroids(self) -> np.ndarray:
        """Per-class feature means; NaN rows for absent classes."""
        out = np.full((self.n_classes, self.n_features), np.nan)
        for c in range(self.n_classes):
            mask = self.y == c
            if mask.any():
                out[c] = self.X[mask].mean(axis=0)
        return out

    def centroid_distance(self) -> np.ndarray:
        """Distance of every sample to the centroid of its own clean class."""
        return np.linalg.norm(self.X - self.centroids()[self.y], axis=1)


@dataclass
class SyntheticSpec:
    centers: Sequence[Sequence[float]] = DEFAULT_CENTERS
    std: float | Sequence[float] = 0.7
    n_train_per_class: int = 1000
    n_test_per_class: int = 500
    seed: int = 0

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        C = len(self.centers)
        self.std = np.broadcast_to(np.asarray(self.std, dtype=np.float64), (C,)).copy()
        if (self.std <= 0).any():
            raise ConfigError("class std must be positive")
        if self.n_train_per_class < 1 or self.n_test_per_class < 0:
            raise ConfigError("need at least one training sample per class")
        if len({tuple(c) for c in self.centers.tolist()}) != C:
            raise ConfigError("class centers must be distinct")


def gen_synthetic(spec: SyntheticSpec | None = None) -> tuple[Dataset, Dataset]:
    """Isotropic Gaussian blobs around ``spec.centers``; returns (train, test)."""
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.seed)
    C, d = spec.centers.shape

    def draw(per_class: int, split: str) -> Dataset:
        X = np.concatenate([
            spec.centers[c] + spec.std[c] * rng.standard_normal((per_class, d))
            for c in range(C)
        ]) if per_class else np.zeros((0, d))
        y = np.repeat(np.arange(C), per_class)
        order = rng.permutation(len(y))
        return Dataset(X[order], y[order], C, split)

    train = draw(spec.n_train_per_class, "train")
    test = draw(spec.n_test_per_class, "test")
    return train, test


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    header = 4 * (1 + ndim)
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    found = struct.unpack_from(">I", raw)[0]
    if found != magic:
        raise DataError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    shape = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(shape))
    if len(raw) - header < size:
        raise DataError(f"{path}: truncated IDX payload ({len(raw) - header} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(shape)


def load_idx(images_path, labels_path, limit: int | None = None, n_classes: int = 10) -> Dataset:
    """Load an MNIST-style IDX pair; pixels become ``[0, 1]`` floats."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DataError(
            f"{labels_path}: {len(labels)} labels but {images_path} holds {len(images)} images"
        )
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    if labels.size and labels.max() >= n_classes:
        raise DataError(f"{labels_path}: label {labels.max()} outside [0, {n_classes})")
    X = images.reshape(len(images), int(np.prod(images.shape[1:]))).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), n_classes)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, r, c = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def save_dataset(path, ds: Dataset) -> None:
    d = ds.n_features
    buf = io.StringIO()
    buf.write(",".join(["index", *(f"f{j}" for j in range(d)), "label"]) + "\n")
    for i, (row, label) in enumerate(zip(ds.X, ds.y)):
        buf.write(f"{i}," + ",".join(repr(float(v)) for v in row) + f",{int(label)}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def load_dataset(path, n_classes: int | None = None, split: str = "train") -> Dataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    lines = text.splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[0] != "index" or header[-1] != "label":
        raise DataError(f"{path}: unexpected header {lines[0]!r}")
    d = len(header) - 2
    X = np.zeros((len(lines) - 1, d))
    y = np.zeros(len(lines) - 1, dtype=np.int64)
    for k, line in enumerate(lines[1:]):
        cells = line.split(",")
        if len(cells) != d + 2:
            raise DataError(f"{path}: line {k + 2}: expected {d + 2} fields, got {len(cells)}")
        try:
            if int(cells[0]) != k:
                raise DataError(f"{path}: line {k + 2}: index {cells[0]} out of sequence")
            X[k] = [float(v) for v in cells[1:-1]]
            y[k] = int(cells[-1])
        except ValueError as exc:
            raise DataError(f"{path}: line {k + 2}: {exc}") from exc
    if n_classes is None:
        n_classes = int(y.max()) + 1 if y.size else 0
    return Dataset(X, y, n_classes, split)


def save_dataset_dir(out_dir, train: Dataset, test: Dataset | None = None, **meta) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_dataset(out_dir / "train.csv", train)
    if test is not None:
        save_dataset(out_dir / "test.csv", test)
    info = {"n_classes": train.n_classes, "n_features": train.n_features, **meta}
    (out_dir / "meta.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def load_dataset_dir(data_dir) -> tuple[Dataset, Dataset | None]:
    data_dir = Path(data_dir)
    meta_path = data_dir / "meta.json"
    if not meta_path.exists():
        raise DataError(f"{data_dir}: missing meta.json")
    try:
        C = int(json.loads(meta_path.read_text())["n_classes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{meta_path}: malformed ({exc})") from None
    train = load_dataset(data_dir / "train.csv", C, "train")
    test_path = data_dir / "test.csv"
    test = load_dataset(test_path, C, "test") if test_path.exists() else None
    return train, test


@dataclass
class NoisyLabels:
    """Clean/noisy label pairs with the provenance of the noise that produced them."""

    index: np.ndarray
    clean: np.ndarray
    noisy: np.ndarray
    n_classes: int
    kind: str = "none"
    ratio: float = 0.0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.index = np.asarray(self.index, dtype=np.int64)
        self.clean = np.asarray(self.clean, dtype=np.int64)
        self.noisy = np.asarray(self.noisy, dtype=np.int64)
        if not (len(self.index) == len(self.clean) == len(self.noisy)):
            raise DataError("index, clean and noisy arrays differ in length")
        if len(np.unique(self.index)) != len(self.index):
            raise DataError("duplicate sample indices")
        for name, arr in (("clean", self.clean), ("noisy", self.noisy)):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n_classes):
                raise DataError(f"{name} label outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.index)

    @property
    def flipped(self) -> np.ndarray:
        return self.noisy != self.clean

    @classmethod
    def identity(cls, y: np.ndarray, n_classes: int, **kw) -> "NoisyLabels":
        y = np.asarray(y)
        return cls(np.arange(len(y)), y.copy(), y.copy(), n_classes, **kw)

    def __eq__(self, other) -> bool:
        if not isinstance(other, NoisyLabels):
            return NotImplemented
        return (
            np.array_equal(self.index, other.index)
            and np.array_equal(self.clean, other.clean)
            and np.array_equal(self.noisy, other.noisy)
            and self.n_classes == other.n_classes
            and self.kind == other.kind
            and self.ratio == other.ratio
            and self.seed == other.seed
        )


def save_labels(path, labels: NoisyLabels) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise DataError(f"{path.parent}: directory does not exist")
    order = np.argsort(labels.index, kind="stable")
    lines = [",".join(LABEL_HEADER)]
    lines += [
        f"{i},{c},{n}"
        for i, c, n in zip(labels.index[order], labels.clean[order], labels.noisy[order])
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    meta = {
        "kind": labels.kind,
        "ratio": labels.ratio,
        "seed": labels.seed,
        "n_classes": labels.n_classes,
    }
    Path(f"{path}.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def load_labels(path, n_classes: int | None = None) -> NoisyLabels:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    meta_path = Path(f"{path}.json")
    try:
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    except ValueError as exc:
        raise DataError(f"{meta_path}: malformed ({exc})") from None
    if n_classes is None:
        n_classes = meta.get("n_classes")

    rows = list(csv.reader(text.splitlines()))
    if not rows or rows[0] != LABEL_HEADER:
        raise DataError(f"{path}: line 1: header must be {','.join(LABEL_HEADER)}")
    index, clean, noisy = [], [], []
    seen: set[int] = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise DataError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
        try:
            i, c, n = (int(v) for v in row)
        except ValueError as exc:
            raise DataError(f"{path}: line {lineno}: malformed row {row!r}") from exc
        if i in seen:
            raise DataError(f"{path}: line {lineno}: duplicate index {i}")
        if i < 0 or c < 0 or n < 0:
            raise DataError(f"{path}: line {lineno}: negative value in {row!r}")
        if n_classes is not None and (c >= n_classes or n >= n_classes):
            raise DataError(f"{path}: line {lineno}: label not below class count {n_classes}")
        seen.add(i)
        index.append(i)
        clean.append(c)
        noisy.append(n)
    if n_classes is None:
        n_classes = max(clean + noisy, default=-1) + 1
    return NoisyLabels(
        np.array(index, dtype=np.int64),
        np.array(clean, dtype=np.int64),
        np.array(noisy, dtype=np.int64),
        int(n_classes),
        kind=meta.get("kind", "unknown"),
        ratio=float(meta.get("ratio", 0.0)),
        seed=int(meta.get("seed", 0)),
    )
