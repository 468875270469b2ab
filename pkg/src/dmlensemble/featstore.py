"""Feature datasets: file I/O, zero-shot class splits, batch sampling, synthetic data."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BIN_MAGIC = b"FSTO"


class FeatureFormatError(ValueError):
    """Raised when a feature file cannot be parsed."""


@dataclass
class FeatureDataset:
    """Feature matrix (n, d) with contiguous integer labels in [0, C)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[1] < 1:
            raise ValueError("features must be an (n, d) matrix with d >= 1")
        if len(self.labels) != len(self.features):
            raise ValueError("features and labels differ in length")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if len(self.labels):
            uniq = np.unique(self.labels)
            if uniq[0] != 0 or uniq[-1] != len(uniq) - 1:
                raise ValueError("labels must form a contiguous range [0, C)")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_count(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, classes) -> "FeatureDataset":
        """Records whose label is in ``classes``, re-indexed in the given class order."""
        classes = list(classes)
        lookup = {c: i for i, c in enumerate(classes)}
        mask = np.isin(self.labels, classes)
        labels = np.array([lookup[c] for c in self.labels[mask]], dtype=np.int64)
        return FeatureDataset(self.features[mask], labels)


@dataclass
class ZslSplit:
    train: FeatureDataset
    test: FeatureDataset


@dataclass
class MiniBatch:
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.indices)


def remap_labels(raw) -> np.ndarray:
    """Map arbitrary labels onto [0, C) in order of first appearance."""
    lookup: dict = {}
    out = np.empty(len(raw), dtype=np.int64)
    for i, y in enumerate(raw):
        out[i] = lookup.setdefault(y, len(lookup))
    return out


def load_features(path, format: str = "csv") -> FeatureDataset:
    path = Path(path)
    if format == "csv":
        feats, raw = _read_csv(path)
    elif format == "bin":
        feats, raw = _read_bin(path)
    else:
        raise ValueError(f"unknown feature format {format!r}")
    return FeatureDataset(feats, remap_labels(raw.tolist()))


def save_features(ds: FeatureDataset, path, format: str = "csv") -> None:
    path = Path(path)
    if format == "csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"f{j}" for j in range(ds.dim)] + ["label"])
            for x, y in zip(ds.features, ds.labels):
                # repr() gives the shortest round-tripping decimal
                w.writerow([repr(float(v)) for v in x] + [int(y)])
    elif format == "bin":
        n, d = ds.features.shape
        with path.open("wb") as fh:
            fh.write(BIN_MAGIC)
            fh.write(struct.pack("<II", n, d))
            fh.write(ds.features.astype("<f8").tobytes())
            fh.write(ds.labels.astype("<u4").tobytes())
    else:
        raise ValueError(f"unknown feature format {format!r}")


def _read_csv(path: Path):
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise FeatureFormatError(f"{path}: empty file (no records)")
    header = rows[0]
    if not header or header[-1].strip() != "label":
        raise FeatureFormatError(f"{path}: row 1: header must end with 'label'")
    feats, labels = [], []
    d = None
    for rowno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) < 2:
            raise FeatureFormatError(f"{path}: row {rowno}: malformed row")
        if d is None:
            d = len(row) - 1
        elif len(row) - 1 != d:
            raise FeatureFormatError(
                f"{path}: row {rowno}: inconsistent dimension {len(row) - 1} (expected {d})"
            )
        try:
            x = [float(v) for v in row[:-1]]
            y = int(row[-1])
        except ValueError:
            raise FeatureFormatError(f"{path}: row {rowno}: malformed row") from None
        if y < 0:
            raise FeatureFormatError(f"{path}: row {rowno}: malformed row (negative label)")
        if not all(math.isfinite(v) for v in x):
            raise FeatureFormatError(f"{path}: row {rowno}: non-finite value")
        feats.append(x)
        labels.append(y)
    if not feats:
        raise FeatureFormatError(f"{path}: empty file (no records)")
    return np.array(feats, dtype=np.float64), np.array(labels, dtype=np.int64)


def _read_bin(path: Path):
    blob = path.read_bytes()
    if len(blob) == 0:
        raise FeatureFormatError(f"{path}: empty file")
    if blob[:4] != BIN_MAGIC or len(blob) < 12:
        raise FeatureFormatError(f"{path}: bad magic or truncated header")
    n, d = struct.unpack_from("<II", blob, 4)
    if n == 0:
        raise FeatureFormatError(f"{path}: empty file (no records)")
    if d == 0:
        raise FeatureFormatError(f"{path}: zero feature dimension")
    expected = 12 + 8 * n * d + 4 * n
    if len(blob) != expected:
        raise FeatureFormatError(f"{path}: size {len(blob)} does not match n={n}, d={d}")
    feats = np.frombuffer(blob, dtype="<f8", count=n * d, offset=12).reshape(n, d)
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=12 + 8 * n * d)
    bad = np.flatnonzero(~np.isfinite(feats).all(axis=1))
    if len(bad):
        raise FeatureFormatError(f"{path}: record {bad[0] + 1}: non-finite value")
    return feats.astype(np.float64), labels.astype(np.int64)


def zsl_split(ds: FeatureDataset) -> ZslSplit:
    """First ceil(C/2) classes train, the rest test; both re-indexed from 0."""
    C = ds.class_count
    if C < 2:
        raise ValueError(f"need at least 2 classes for a disjoint split, got {C}")
    n_train = (C + 1) // 2
    return ZslSplit(ds.subset(range(n_train)), ds.subset(range(n_train, C)))


def sample_batch(ds: FeatureDataset, P: int, K: int, rng: np.random.Generator) -> MiniBatch:
    """P distinct classes, K samples each (with replacement only for classes smaller than K)."""
    if P < 2 or K < 2:
        raise ValueError("P and K must both be >= 2")
    C = ds.class_count
    if C < P:
        raise ValueError(f"batch needs {P} classes, dataset has {C}")
    classes = rng.choice(C, size=P, replace=False)
    idx = []
    for c in classes:
        members = np.flatnonzero(ds.labels == c)
        idx.append(rng.choice(members, size=K, replace=len(members) < K))
    idx = np.concatenate(idx)
    return MiniBatch(idx, ds.features[idx], ds.labels[idx])


def epoch_batches(ds: FeatureDataset, P: int, K: int, rng: np.random.Generator):
    """Enough batches to cover roughly one pass over ``ds``."""
    n_batches = max(1, math.ceil(len(ds) / (P * K)))
    for _ in range(n_batches):
        yield sample_batch(ds, P, K, rng)


def synth_gaussians(classes: int, per_class: int, d: int, sep: float,
                    warp: str = "none", rng: np.random.Generator | None = None) -> FeatureDataset:
    """Isotropic Gaussian classes with means on a sphere of radius ``sep``.

    ``warp="tanh-mix"`` pushes every sample through a fixed random two-layer
    tanh map, which bends the class clusters so a linear head has work to do.
    """
    if classes < 2 or per_class < 2 or d < 1:
        raise ValueError("classes and per_class must be >= 2 and d >= 1")
    if sep < 0:
        raise ValueError("sep must be non-negative")
    if warp not in ("none", "tanh-mix"):
        raise ValueError(f"unknown warp {warp!r}")
    rng = np.random.default_rng() if rng is None else rng
    dirs = rng.standard_normal((classes, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = sep * dirs
    labels = np.repeat(np.arange(classes), per_class)
    X = means[labels] + rng.standard_normal((len(labels), d))
    if warp == "tanh-mix":
        X = tanh_mix(X, rng, scale=max(sep, 1.0))
    return FeatureDataset(X, labels)


def tanh_mix(X: np.ndarray, rng: np.random.Generator, scale: float = 1.0,
             gain_range=(0.1, 10.0)) -> np.ndarray:
    """Fixed random warp: a residual tanh mixing layer, then a rotation with
    log-spaced per-axis gains.

    The gains make raw Euclidean distances dominated by a few axes, so an
    embedding that learns to reweight directions beats the raw features.
    """
    d = X.shape[1]
    A = rng.standard_normal((d, 2 * d)) * (2.0 / (scale * math.sqrt(d)))
    B = rng.standard_normal((2 * d, d)) / math.sqrt(2 * d)
    Y = scale * (np.tanh(X @ A) @ B) + 0.25 * X
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (Y @ Q) * np.geomspace(gain_range[0], gain_range[1], d)
