"""Gradient sparsifiers, error feedback, and the adaptive-ratio baseline.

All compressors are pure functions over 1-D float64 arrays. A compressed
gradient is a :class:`SparseUpdate`; its ``nnz`` is the unit of traffic
accounting throughout the simulator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import ceil
from typing import Callable, Optional

import numpy as np

__all__ = [
    "SparseUpdate",
    "AccordionState",
    "ensure_dense",
    "top_k",
    "random_k",
    "hard_threshold",
    "compress_with_feedback",
    "accordion_select",
]

Compressor = Callable[[np.ndarray], "SparseUpdate"]


def ensure_dense(x, name: str = "vector") -> np.ndarray:
    """Coerce to a 1-D float64 array, rejecting NaN/Inf entries."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SparseUpdate:
    """Index/value pairs of a compressed gradient of dimension ``dim``."""

    indices: np.ndarray  # strictly increasing int64, all < dim
    values: np.ndarray   # float64, same length
    dim: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be matching 1-D arrays")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.dim):
            raise ValueError("indices must be strictly increasing and < dim")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def densify(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=np.float64)
        out[self.indices] = self.values
        return out

    def to_bytes(self) -> bytes:
        """Little-endian: u32 nnz, u32 dim, then (u32 index, f32 value) pairs."""
        pairs = np.empty(self.nnz, dtype=[("i", "<u4"), ("v", "<f4")])
        pairs["i"] = self.indices
        pairs["v"] = self.values
        return struct.pack("<II", self.nnz, self.dim) + pairs.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SparseUpdate":
        nnz, dim = struct.unpack_from("<II", blob, 0)
        pairs = np.frombuffer(blob, dtype=[("i", "<u4"), ("v", "<f4")], count=nnz, offset=8)
        return cls(pairs["i"].astype(np.int64), pairs["v"].astype(np.float64), dim)


def _keep_count(ratio: float, dim: int) -> int:
    # Never send zero elements under a relative budget; the ceiling keeps
    # realized traffic >= nominal and the accountant reports realized nnz.
    return max(1, ceil(ratio * dim))


def top_k(x, ratio: float) -> SparseUpdate:
    """Keep the ``max(1, ceil(ratio * d))`` largest-magnitude coordinates.

    Deterministic: equal magnitudes are broken toward the lower index.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio!r}")
    arr = ensure_dense(x)
    if arr.size == 0:
        raise ValueError("cannot compress an empty vector")
    k = _keep_count(ratio, arr.size)
    order = np.argsort(-np.abs(arr), kind="stable")  # stable: lower index wins ties
    keep = np.sort(order[:k])
    return SparseUpdate(keep, arr[keep], arr.size)


def random_k(x, ratio: float, rng: np.random.Generator) -> SparseUpdate:
    """Keep ``max(1, ceil(ratio * d))`` uniformly sampled distinct coordinates."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio!r}")
    arr = ensure_dense(x)
    if arr.size == 0:
        raise ValueError("cannot compress an empty vector")
    k = _keep_count(ratio, arr.size)
    keep = np.sort(rng.choice(arr.size, size=k, replace=False))
    return SparseUpdate(keep, arr[keep], arr.size)


def hard_threshold(x, threshold: float) -> SparseUpdate:
    """Keep exactly the coordinates with ``|x_j| > threshold`` (strict).

    The residual obeys ``||C(x) - x||^2 <= d * threshold^2`` for every input;
    the update may be empty.
    """
    if threshold <= 0.0:
        raise ValueError(f"threshold must be positive, got {threshold!r}")
    arr = ensure_dense(x)
    keep = np.flatnonzero(np.abs(arr) > threshold)
    return SparseUpdate(keep, arr[keep], arr.size)


def compress_with_feedback(
    e, g, compressor: Compressor
) -> tuple[SparseUpdate, np.ndarray]:
    """One error-feedback step: compress ``e + g``, keep the remainder.

    Returns ``(update, e_next)`` with ``densify(update) + e_next == e + g``
    exactly: kept coordinates leave a residual of exactly zero, dropped
    coordinates pass through untouched.
    """
    e = ensure_dense(e, "error")
    g = ensure_dense(g, "gradient")
    if e.shape != g.shape:
        raise ValueError(f"dimension mismatch: error {e.shape} vs gradient {g.shape}")
    target = e + g
    update = compressor(target)
    e_next = target.copy()
    e_next[update.indices] = 0.0
    return update, e_next


@dataclass(frozen=True)
class AccordionState:
    """Epoch-level switching state for the adaptive-ratio baseline.

    Starts aggressive (no norm history yet). Afterwards the regime is
    "critical" iff the epoch gradient norm moved by more than
    ``switch_threshold`` relative to the previous epoch.
    """

    previous_epoch_grad_norm: Optional[float] = None
    current_mode: str = "aggressive"
    switch_threshold: float = 0.5


def accordion_select(
    state: AccordionState,
    epoch_grad_norm: float,
    aggressive,
    conservative,
) -> tuple[object, AccordionState]:
    """Pick the compression parameter for the coming epoch.

    Critical regime (first epoch, or a relative norm change above the switch
    threshold) selects the aggressive parameter; a stable norm selects the
    conservative one.
    """
    if epoch_grad_norm < 0.0:
        raise ValueError("epoch_grad_norm must be non-negative")
    prev = state.previous_epoch_grad_norm
    if prev is None or prev == 0.0:
        critical = True
    else:
        critical = abs(prev - epoch_grad_norm) / prev > state.switch_threshold
    mode = "aggressive" if critical else "conservative"
    new_state = AccordionState(
        previous_epoch_grad_norm=float(epoch_grad_norm),
        current_mode=mode,
        switch_threshold=state.switch_threshold,
    )
    return (aggressive if critical else conservative), new_state
