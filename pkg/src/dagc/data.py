"""Skewed worker weights, non-IID partitioning, and desk-scale datasets."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .alloc import WeightVector
from .errors import IdxFormatError

__all__ = [
    "LabeledDataset",
    "Partition",
    "skewed_weights",
    "dichotomous_weights",
    "dirichlet_label_partition",
    "load_idx",
    "synthetic_classification",
]

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix in [0, 1] with integer class labels."""

    features: np.ndarray  # (num_samples, num_features) float64
    labels: np.ndarray    # (num_samples,) int64, < num_classes
    num_classes: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise ValueError("labels length must match feature rows")
        if feats.size and (feats.min() < -1e-9 or feats.max() > 1.0 + 1e-9):
            raise ValueError("features must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Partition:
    """Disjoint per-worker sample-index shards of one dataset."""

    shards: tuple[np.ndarray, ...]

    def __post_init__(self):
        shards = tuple(np.asarray(s, dtype=np.int64) for s in self.shards)
        seen: set[int] = set()
        for s in shards:
            if s.size == 0:
                raise ValueError("every shard must be non-empty")
            ids = set(s.tolist())
            if len(ids) != s.size or seen & ids:
                raise ValueError("shards must be disjoint")
            seen |= ids
        sizes = [s.size for s in shards]
        if any(sizes[i] < sizes[i + 1] for i in range(len(sizes) - 1)):
            raise ValueError("shard sizes must be descending")
        object.__setattr__(self, "shards", shards)

    @property
    def n(self) -> int:
        return len(self.shards)

    def realized_weights(self) -> np.ndarray:
        sizes = np.array([s.size for s in self.shards], dtype=np.float64)
        return sizes / sizes.sum()

    def to_manifest_json(self) -> str:
        """Audit manifest: worker number (1-based) -> sample indices."""
        manifest = {str(i + 1): s.tolist() for i, s in enumerate(self.shards)}
        return json.dumps(manifest, indent=2, sort_keys=True)


def dichotomous_weights(n: int, p_large: float) -> WeightVector:
    """One large worker holding ``p_large``; the rest split the remainder equally."""
    if not 0.0 < p_large < 1.0:
        raise ValueError(f"p_large must be in (0, 1), got {p_large!r}")
    if n < 2:
        raise ValueError("need at least 2 workers")
    small = (1.0 - p_large) / (n - 1)
    if p_large < small:
        raise ValueError("p_large must be at least the small-worker share")
    return WeightVector([p_large] + [small] * (n - 1))


def skewed_weights(n: int, skew_ratio: float, rng: np.random.Generator) -> WeightVector:
    """Descending weights with endpoint ratio ``skew_ratio``.

    A descending arithmetic series from ``skew_ratio`` down to 1 is perturbed
    on its interior entries with centered Dirichlet(0.5) noise, capped at
    half the series step so the ordering survives, then simplex-normalized.
    Endpoints stay untouched, so ``p_1 / p_n`` equals ``skew_ratio`` exactly.
    """
    if n < 2:
        raise ValueError("need at least 2 workers")
    if skew_ratio < 1.0:
        raise ValueError(f"skew ratio must be >= 1, got {skew_ratio!r}")
    raw = np.linspace(skew_ratio, 1.0, n)
    if n > 2 and skew_ratio > 1.0:
        step = (skew_ratio - 1.0) / (n - 1)
        noise = rng.dirichlet(np.full(n - 2, 0.5))
        noise = noise - noise.mean()
        peak = np.abs(noise).max()
        if peak > 0.0:
            raw[1:-1] += noise * (step / 2.0) / peak
    return WeightVector(raw / raw.sum())


def _size_targets(weights: np.ndarray, total: int) -> np.ndarray:
    # Largest-remainder apportionment: every target lands within one sample
    # of round(w_i * total) and the targets sum to the dataset size.
    raw = weights * total
    base = np.floor(raw).astype(np.int64)
    leftover = total - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:leftover]] += 1
    return base


def dirichlet_label_partition(
    ds: LabeledDataset,
    w,
    alpha: float,
    rng: np.random.Generator,
) -> Partition:
    """Label-skewed shards whose sizes follow the worker weights.

    Each label class is split across workers by Dirichlet(alpha) proportions,
    then shards are rebalanced so worker sizes hit their targets: sizes are
    hard constraints, label proportions are best effort.
    """
    if alpha <= 0.0:
        raise ValueError(f"alpha must be positive, got {alpha!r}")
    weights = w.as_array() if isinstance(w, WeightVector) else np.asarray(w, np.float64)
    n = weights.size
    total = len(ds)
    if total < n:
        raise ValueError(f"dataset of {total} samples cannot feed {n} workers")
    if n == 1:
        return Partition((np.arange(total, dtype=np.int64),))

    targets = _size_targets(weights, total)
    if np.any(targets == 0):
        raise ValueError("dataset too small: some worker would receive no samples")

    assigned: list[list[int]] = [[] for _ in range(n)]
    for cls in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == cls)
        if members.size == 0:
            continue
        members = rng.permutation(members)
        props = rng.dirichlet(np.full(n, alpha))
        counts = _size_targets(props, members.size)
        pos = 0
        for i in range(n):
            assigned[i].extend(members[pos : pos + counts[i]].tolist())
            pos += counts[i]

    # Rebalance: pull surplus samples into a pool, refill deficits.
    pool: list[int] = []
    for i in range(n):
        surplus = len(assigned[i]) - int(targets[i])
        if surplus > 0:
            pool.extend(assigned[i][-surplus:])
            del assigned[i][-surplus:]
    for i in range(n):
        deficit = int(targets[i]) - len(assigned[i])
        if deficit > 0:
            assigned[i].extend(pool[-deficit:])
            del pool[-deficit:]

    return Partition(tuple(np.sort(np.asarray(s, dtype=np.int64)) for s in assigned))


def _read_exact(blob: bytes, fmt: str, offset: int, what: str):
    size = struct.calcsize(fmt)
    if len(blob) < offset + size:
        raise IdxFormatError(f"truncated file while reading {what}", offset)
    return struct.unpack_from(fmt, blob, offset)


def load_idx(path_images, path_labels) -> LabeledDataset:
    """Load an IDX image/label pair (big-endian, unsigned-byte pixels).

    Pixels are scaled to [0, 1] by dividing by 255. The label count must
    match the image count.
    """
    with open(path_images, "rb") as fh:
        img_blob = fh.read()
    with open(path_labels, "rb") as fh:
        lbl_blob = fh.read()

    (img_magic,) = _read_exact(img_blob, ">I", 0, "image magic")
    if img_magic != _IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"bad image magic {img_magic:#010x}", 0)
    count, rows, cols = _read_exact(img_blob, ">III", 4, "image dimensions")
    expected = 16 + count * rows * cols
    if len(img_blob) != expected:
        raise IdxFormatError(
            f"image payload is {len(img_blob)} bytes, expected {expected}",
            min(len(img_blob), expected),
        )

    (lbl_magic,) = _read_exact(lbl_blob, ">I", 0, "label magic")
    if lbl_magic != _IDX_LABELS_MAGIC:
        raise IdxFormatError(f"bad label magic {lbl_magic:#010x}", 0)
    (lbl_count,) = _read_exact(lbl_blob, ">I", 4, "label count")
    if len(lbl_blob) != 8 + lbl_count:
        raise IdxFormatError(
            f"label payload is {len(lbl_blob)} bytes, expected {8 + lbl_count}",
            min(len(lbl_blob), 8 + lbl_count),
        )
    if lbl_count != count:
        raise IdxFormatError(
            f"label count {lbl_count} does not match image count {count}", 4
        )

    pixels = np.frombuffer(img_blob, dtype=np.uint8, offset=16)
    features = pixels.astype(np.float64).reshape(count, rows * cols) / 255.0
    labels = np.frombuffer(lbl_blob, dtype=np.uint8, offset=8).astype(np.int64)
    return LabeledDataset(features, labels, int(labels.max()) + 1 if count else 1)


def synthetic_classification(
    num_samples: int,
    num_features: int,
    num_classes: int,
    rng: np.random.Generator,
    centroid_scale: float = 3.0,
) -> LabeledDataset:
    """Gaussian class clusters around random centroids, min-max scaled to [0, 1].

    ``centroid_scale`` controls cluster separation relative to the
    unit-variance within-class noise.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if num_samples <= 0:
        raise ValueError("need a positive number of samples")
    centroids = rng.normal(0.0, centroid_scale, size=(num_classes, num_features))
    labels = rng.permutation(np.arange(num_samples, dtype=np.int64) % num_classes)
    features = centroids[labels] + rng.normal(0.0, 1.0, size=(num_samples, num_features))
    lo, hi = features.min(), features.max()
    features = (features - lo) / (hi - lo)
    return LabeledDataset(features, labels, num_classes)
