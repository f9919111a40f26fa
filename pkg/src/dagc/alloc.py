"""Per-worker compression-parameter allocation.

Solves two budgeted allocation problems over the worker weights:

* relative compressors: pick ratios ``delta_i`` summing to ``n * mean_ratio``
  that minimize the convergence factor
  ``phi = (sum_i p_i / sqrt(delta_i)) / sqrt(min_i delta_i)``;
* absolute compressors: pick thresholds ``lambda_i`` with harmonic mean
  ``mean_threshold`` that minimize ``sum_i p_i^2 * lambda_i^2``.

Both have closed forms built from the 2/3-power law; brute-force oracles
used by the test suite live here as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import BudgetInfeasibleError

__all__ = [
    "WeightVector",
    "RatioAllocation",
    "ThresholdAllocation",
    "phi",
    "q_factor",
    "local_optimum",
    "dagc_r",
    "dagc_a",
    "key_factor_absolute",
    "lagrange_bound_check",
    "oracle_min_phi",
    "uniform_ratios",
    "uniform_thresholds",
]

_SIMPLEX_ATOL = 1e-12
_BUDGET_RTOL = 1e-10


@dataclass(frozen=True)
class WeightVector:
    """Per-worker training weights: positive, descending, summing to 1."""

    weights: tuple[float, ...]

    def __init__(self, weights) -> None:
        w = tuple(float(x) for x in weights)
        if len(w) < 2:
            raise ValueError("need at least 2 workers")
        if any(x <= 0.0 for x in w):
            raise ValueError("weights must be strictly positive")
        if abs(sum(w) - 1.0) > _SIMPLEX_ATOL:
            raise ValueError(f"weights must sum to 1 (got {sum(w)!r})")
        if any(w[i] < w[i + 1] for i in range(len(w) - 1)):
            raise ValueError("weights must be sorted descending")
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def skew_ratio(self) -> float:
        return self.weights[0] / self.weights[-1]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)


@dataclass(frozen=True)
class RatioAllocation:
    """Relative-compressor ratios satisfying ``sum(ratios) == n * mean_ratio``."""

    ratios: tuple[float, ...]
    mean_ratio: float

    def __init__(self, ratios, mean_ratio: float) -> None:
        r = tuple(float(x) for x in ratios)
        if any(x <= 0.0 for x in r):
            raise ValueError("ratios must be strictly positive")
        budget = len(r) * float(mean_ratio)
        if abs(sum(r) - budget) > _BUDGET_RTOL * budget:
            raise ValueError(
                f"ratios sum {sum(r)!r} violates the budget {budget!r}"
            )
        object.__setattr__(self, "ratios", r)
        object.__setattr__(self, "mean_ratio", float(mean_ratio))

    @property
    def n(self) -> int:
        return len(self.ratios)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.ratios, dtype=np.float64)


@dataclass(frozen=True)
class ThresholdAllocation:
    """Absolute-compressor thresholds with fixed harmonic mean."""

    thresholds: tuple[float, ...]
    mean_threshold: float

    def __init__(self, thresholds, mean_threshold: float) -> None:
        t = tuple(float(x) for x in thresholds)
        if any(x <= 0.0 for x in t):
            raise ValueError("thresholds must be strictly positive")
        harmonic = len(t) / sum(1.0 / x for x in t)
        if abs(harmonic - mean_threshold) > _BUDGET_RTOL * mean_threshold:
            raise ValueError(
                f"harmonic mean {harmonic!r} != target {mean_threshold!r}"
            )
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "mean_threshold", float(mean_threshold))

    @property
    def n(self) -> int:
        return len(self.thresholds)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.thresholds, dtype=np.float64)


def phi(alloc: RatioAllocation, w: WeightVector) -> float:
    """Convergence factor ``(sum_i p_i / sqrt(d_i)) / sqrt(min_i d_i)``.

    Homogeneous of degree -1: scaling every ratio by ``c`` divides the
    result by ``c``.
    """
    if alloc.n != w.n:
        raise ValueError(f"length mismatch: {alloc.n} ratios vs {w.n} weights")
    d = alloc.as_array()
    p = w.as_array()
    return float(np.sum(p / np.sqrt(d)) / np.sqrt(d.min()))


def _phi_raw(ratios: np.ndarray, p: np.ndarray) -> float:
    return float(np.sum(p / np.sqrt(ratios)) / np.sqrt(ratios.min()))


def q_factor(j: int, w: WeightVector) -> float:
    """Case factor for pivot worker ``j`` (1-based).

    ``(P - p_j^(2/3)) / p_n^(2/3)`` for ``j < n`` and
    ``(P - p_n^(2/3)) / p_{n-1}^(2/3)`` for ``j == n``,
    with ``P = sum_i p_i^(2/3)``. Uniform weights give ``n - 1`` for any j.
    """
    n = w.n
    if not 1 <= j <= n:
        raise ValueError(f"pivot index {j} out of range [1, {n}]")
    p = w.as_array()
    p23 = p ** (2.0 / 3.0)
    big_p = p23.sum()
    ref = p23[-1] if j < n else p23[-2]
    return float((big_p - p23[j - 1]) / ref)


def local_optimum(
    j: int, w: WeightVector, mean_ratio: float
) -> tuple[RatioAllocation, float]:
    """Best allocation under the constraint that worker ``j`` gets the
    smallest ratio.

    Pivot gets ``n * mean_ratio / (Q_j + 1)``; every other worker gets the
    pivot value scaled by ``(p_i / p_ref)^(2/3)`` where ``p_ref`` is ``p_n``
    (or ``p_{n-1}`` when the pivot is worker n). Returns the allocation and
    its exact objective value.
    """
    n = w.n
    if not 1 <= j <= n:
        raise ValueError(f"pivot index {j} out of range [1, {n}]")
    if not 0.0 < mean_ratio < 1.0:
        raise ValueError(f"mean_ratio must be in (0, 1), got {mean_ratio!r}")

    p = w.as_array()
    p23 = p ** (2.0 / 3.0)
    ref = p[-1] if j < n else p[-2]
    ref23 = ref ** (2.0 / 3.0)
    q = q_factor(j, w)

    budget = n * mean_ratio
    pivot_ratio = budget / (q + 1.0)
    ratios = pivot_ratio * p23 / ref23
    ratios[j - 1] = pivot_ratio

    worst = int(np.argmax(ratios))
    if ratios[worst] > 1.0:
        raise BudgetInfeasibleError(worst + 1, float(ratios[worst]), mean_ratio)

    partner = p[-1] if j < n else p[-2]
    phi_j = (p[j - 1] * (1.0 + q) + partner * q * (1.0 + q)) / budget
    # Renormalize away the accumulated rounding so the budget invariant
    # holds to the constructor's tolerance.
    ratios *= budget / ratios.sum()
    return RatioAllocation(ratios, mean_ratio), float(phi_j)


def _clamped_candidate(
    j: int, p: np.ndarray, budget: float
) -> tuple[np.ndarray, float]:
    """Best allocation with workers ``j..n`` (1-based) tied at the minimum.

    At any minimizer of ``phi`` the ratios are descending (rearrangement
    inequality), so the set of workers holding the minimum ratio is a
    suffix of the weight ordering. Clamping that suffix at a common value
    ``s`` and giving the prefix its Lemma-style ``p^(2/3)`` split leaves a
    single-variable objective

        F(s) = P_S / s + B^(3/2) / sqrt((budget - m*s) * s),

    with ``m`` clamped workers of total weight ``P_S`` and prefix
    2/3-power mass ``B``. F decreases up to ``budget / (2m)``, then has at
    most one interior stationary point; the feasible range is capped at
    ``s_max`` where the smallest prefix ratio would meet the clamp.
    Returns the minimizing ratios (unnormalized) and the exact objective.
    """
    n = p.size
    m = n - j + 1
    if j == 1:
        ratios = np.full(n, budget / n)
        return ratios, float(p.sum() * n / budget)

    p23 = p ** (2.0 / 3.0)
    tail_weight = float(p[j - 1 :].sum())
    prefix_mass = float(p23[: j - 1].sum())
    edge = float(p23[j - 2])
    s_max = budget * edge / (prefix_mass + m * edge)
    coeff = prefix_mass**1.5

    def f_prime(s: float) -> float:
        free = budget - m * s
        return -tail_weight / s**2 + 0.5 * coeff * (2.0 * m * s - budget) / (
            s * free
        ) ** 1.5

    s_flat = budget / (2.0 * m)
    if s_max <= s_flat or f_prime(s_max) <= 0.0:
        s = s_max
    else:
        s = float(brentq(f_prime, s_flat, s_max, xtol=1e-14 * budget, rtol=1e-13))

    free_total = budget - m * s
    ratios = np.empty(n)
    ratios[: j - 1] = free_total * p23[: j - 1] / prefix_mass
    ratios[j - 1 :] = s
    value = tail_weight / s + coeff / np.sqrt(free_total * s)
    return ratios, float(value)


def dagc_r(w: WeightVector, mean_ratio: float) -> RatioAllocation:
    """Ratio allocation minimizing ``phi`` under the fixed budget.

    Uniform weights short-circuit to the uniform allocation. Otherwise the
    n candidate pivots are scanned from worker n down to worker 1 per the
    closed form, skipping a pivot whose weight repeats the previous one
    (its objective is already the running minimum). The pivot candidates
    alone can miss minimizers where several light workers tie at the
    minimum ratio, so the scan is refined with the clamped-suffix
    candidates, which always contain a global minimizer; on ties the
    refinement with the largest clamped suffix wins.
    """
    if not 0.0 < mean_ratio < 1.0:
        raise ValueError(f"mean_ratio must be in (0, 1), got {mean_ratio!r}")
    n = w.n
    p = w.weights
    if all(x == p[0] for x in p):
        return RatioAllocation(np.full(n, mean_ratio), mean_ratio)

    best: RatioAllocation | None = None
    phi_min = np.inf
    for j in range(n, 0, -1):
        if j < n and j >= 2 and p[j - 1] == p[j - 2]:
            continue  # duplicate weight: same objective as an earlier pivot
        alloc, phi_j = local_optimum(j, w, mean_ratio)
        if phi_j < phi_min:
            phi_min = phi_j
            best = alloc

    arr = w.as_array()
    budget = n * mean_ratio
    for j in range(n, 0, -1):
        ratios, value = _clamped_candidate(j, arr, budget)
        if value <= phi_min and ratios.max() <= 1.0:
            phi_min = value
            ratios = ratios * (budget / ratios.sum())
            best = RatioAllocation(ratios, mean_ratio)
    assert best is not None
    return best


def dagc_a(w: WeightVector, mean_threshold: float) -> ThresholdAllocation:
    """Threshold allocation minimizing ``sum_i p_i^2 lambda_i^2``.

    Closed form ``lambda_i = mean_threshold * P / n * p_i^(-2/3)`` with
    ``P = sum_i p_i^(2/3)``; the harmonic-mean budget holds by algebra and
    thresholds are ordered inversely to the weights.
    """
    if mean_threshold <= 0.0:
        raise ValueError(f"mean_threshold must be positive, got {mean_threshold!r}")
    if all(x == w.weights[0] for x in w.weights):
        return ThresholdAllocation(np.full(w.n, mean_threshold), mean_threshold)
    p = w.as_array()
    big_p = float(np.sum(p ** (2.0 / 3.0)))
    lam = mean_threshold * big_p / w.n * p ** (-2.0 / 3.0)
    return ThresholdAllocation(lam, mean_threshold)


def key_factor_absolute(w: WeightVector, t: ThresholdAllocation) -> float:
    """Convergence factor of the absolute compressor: ``sum_i p_i^2 lambda_i^2``."""
    if t.n != w.n:
        raise ValueError(f"length mismatch: {t.n} thresholds vs {w.n} weights")
    p = w.as_array()
    lam = t.as_array()
    return float(np.sum(p * p * lam * lam))


def uniform_ratios(n: int, mean_ratio: float) -> RatioAllocation:
    """The one-size-fits-all baseline: every worker gets the mean ratio."""
    return RatioAllocation([mean_ratio] * n, mean_ratio)


def uniform_thresholds(n: int, mean_threshold: float) -> ThresholdAllocation:
    """Uniform thresholds; harmonic mean is trivially the common value."""
    return ThresholdAllocation([mean_threshold] * n, mean_threshold)


def lagrange_bound_check(b, a, big_a: float) -> tuple[float, float]:
    """Both sides of ``sum_i b_i/sqrt(a_i) >= A^(-1/2) (sum_i b_i^(2/3))^(3/2)``.

    Requires ``sum(a) == A``. Equality holds at
    ``a_i = A * b_i^(2/3) / sum_k b_k^(2/3)``.
    """
    b = np.asarray(b, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if b.shape != a.shape:
        raise ValueError("b and a must have matching lengths")
    if np.any(b <= 0.0) or np.any(a <= 0.0) or big_a <= 0.0:
        raise ValueError("all inputs must be positive")
    if abs(a.sum() - big_a) > 1e-10 * max(1.0, abs(big_a)):
        raise ValueError(f"sum(a) = {a.sum()!r} does not match A = {big_a!r}")
    lhs = float(np.sum(b / np.sqrt(a)))
    rhs = float(big_a ** -0.5 * np.sum(b ** (2.0 / 3.0)) ** 1.5)
    return lhs, rhs


def oracle_min_phi(
    w: WeightVector, mean_ratio: float, grid_steps: int
) -> tuple[RatioAllocation, float]:
    """Exhaustive grid minimizer of ``phi`` on the budget simplex.

    Test oracle only. The budget ``n * mean_ratio`` is split into
    ``grid_steps`` quanta and every allocation made of positive multiples of
    one quantum is considered, so the per-coordinate resolution is
    ``n * mean_ratio / grid_steps``.

    The search enumerates only descending allocations: for any allocation,
    sorting the ratios descending (to match the descending weights) can only
    decrease ``phi`` by the rearrangement inequality, so the minimum over
    descending grid points equals the minimum over the full grid.
    """
    n = w.n
    if n > 6:
        raise ValueError(f"grid oracle refuses n = {n} > 6 (combinatorial blowup)")
    if grid_steps < 20:
        raise ValueError(f"grid_steps must be >= 20, got {grid_steps}")
    if not 0.0 < mean_ratio < 1.0:
        raise ValueError(f"mean_ratio must be in (0, 1), got {mean_ratio!r}")

    p = w.as_array()
    h = n * mean_ratio / grid_steps
    # inv_sq[u] = 1 / sqrt(u * h) for unit counts 1..grid_steps
    inv_sq = np.empty(grid_steps + 1)
    inv_sq[0] = np.inf
    inv_sq[1:] = 1.0 / np.sqrt(np.arange(1, grid_steps + 1) * h)
    # Hoelder lower bound mass of each weight suffix, for pruning
    p23 = p ** (2.0 / 3.0)
    tail_mass = np.sqrt(np.cumsum(p23[::-1])[::-1] ** 3)

    best_phi = np.inf
    best_units: np.ndarray | None = None

    def tail2(prefix: list[int], remaining: int, bound: int, prefix_sum: float):
        # vectorized last two descending coordinates: a >= rem - a >= 1, a <= bound
        nonlocal best_phi, best_units
        lo = (remaining + 1) // 2
        hi = min(bound, remaining - 1)
        if hi < lo:
            return
        a = np.arange(lo, hi + 1)
        last = remaining - a
        vals = (prefix_sum + p[-2] * inv_sq[a] + p[-1] * inv_sq[last]) * inv_sq[last]
        k = int(np.argmin(vals))
        if vals[k] < best_phi:
            best_phi = float(vals[k])
            best_units = np.array(prefix + [int(a[k]), int(last[k])])

    def tail3(prefix: list[int], remaining: int, bound: int, prefix_sum: float):
        # vectorized last three descending coordinates b >= a >= last >= 1;
        # (b, a) enumerated in lexicographic order so the first argmin is the
        # lexicographically smallest minimizer of the block
        nonlocal best_phi, best_units
        lo_b = -(-remaining // 3)
        hi_b = min(bound, remaining - 2)
        if hi_b < lo_b:
            return
        b_parts = []
        a_parts = []
        for b in range(lo_b, hi_b + 1):
            rest = remaining - b
            lo_a = (rest + 1) // 2
            hi_a = min(b, rest - 1)
            if hi_a < lo_a:
                continue
            a = np.arange(lo_a, hi_a + 1)
            b_parts.append(np.full(a.size, b))
            a_parts.append(a)
        if not b_parts:
            return
        b = np.concatenate(b_parts)
        a = np.concatenate(a_parts)
        last = remaining - b - a
        vals = (
            prefix_sum
            + p[-3] * inv_sq[b]
            + p[-2] * inv_sq[a]
            + p[-1] * inv_sq[last]
        ) * inv_sq[last]
        k = int(np.argmin(vals))
        if vals[k] < best_phi:
            best_phi = float(vals[k])
            best_units = np.array(prefix + [int(b[k]), int(a[k]), int(last[k])])

    def scan(prefix: list[int], remaining: int, bound: int, prefix_sum: float):
        slots = n - len(prefix)
        if slots == 2:
            tail2(prefix, remaining, bound, prefix_sum)
            return
        # prune: suffix sum >= Hoelder bound at the pooled budget, and the
        # smallest of `slots` descending coordinates is at most their mean
        i = len(prefix)
        pooled = np.sqrt(remaining * h)
        lower = (prefix_sum + tail_mass[i] / pooled) * np.sqrt(slots) / pooled
        if lower >= best_phi:
            return
        if slots == 3:
            tail3(prefix, remaining, bound, prefix_sum)
            return
        # descending: this coordinate between ceil(remaining/slots) and bound;
        # ascending iteration plus strict < keeps the lexicographically
        # smallest minimizer among ties
        lo = -(-remaining // slots)
        hi = min(bound, remaining - (slots - 1))
        for u in range(lo, hi + 1):
            scan(prefix + [u], remaining - u, u, prefix_sum + p[i] * inv_sq[u])

    scan([], grid_steps, grid_steps, 0.0)
    assert best_units is not None
    ratios = best_units * h
    ratios = ratios * (n * mean_ratio / ratios.sum())
    return RatioAllocation(ratios, mean_ratio), best_phi
