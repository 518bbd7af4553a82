"""Exact null distribution of the two-sample rank-sum statistic.

Counts are kept as exact integers over the shifted Mann-Whitney support
``u = k - m(m+1)/2`` so that tails down to 1e-10 and below are not
polluted by accumulation error. Probabilities are formed only at the end.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb

import numpy as np

DEFAULT_SUPPORT_CAP = 10**7

_cache: dict[tuple[int, int], "ExactRankDistribution"] = {}
_cache_lock = threading.Lock()


class SupportTooLarge(ValueError):
    """Requested (m, n) exceeds the configured support cap."""


@dataclass(frozen=True)
class ExactRankDistribution:
    """Null distribution of S = sum of test ranks for ``m`` test and ``n`` reference samples.

    ``counts[u]`` is the number of arrangements with ``S = u + m(m+1)/2``.
    """

    m: int
    n: int
    counts: tuple[int, ...]
    total: int
    _suffix: tuple[int, ...] = field(repr=False, compare=False)

    @property
    def offset(self) -> int:
        """Smallest attainable S, ``m(m+1)/2``."""
        return self.m * (self.m + 1) // 2

    @property
    def support_max(self) -> int:
        """Largest attainable S, ``m(m+2n+1)/2``."""
        return self.offset + self.m * self.n

    def tail_count(self, threshold: int) -> int:
        """Exact number of arrangements with ``S >= threshold``."""
        u = threshold - self.offset
        if u <= 0:
            return self.total
        if u > self.m * self.n:
            return 0
        return self._suffix[u]

    def pmf(self) -> np.ndarray:
        """P{S = k} for k over the support, as floats."""
        return np.array([c / self.total for c in self.counts])

    def mean(self) -> Fraction:
        return Fraction(sum((u + self.offset) * c for u, c in enumerate(self.counts)), self.total)

    def variance(self) -> Fraction:
        mu = self.mean()
        second = Fraction(
            sum((u + self.offset) ** 2 * c for u, c in enumerate(self.counts)), self.total
        )
        return second - mu * mu

    def mw_tail_table(self) -> np.ndarray:
        """``table[r] = P{R_MW >= r}`` for r = 0..m*n, float64."""
        return np.array([s / self.total for s in self._suffix], dtype=np.float64)


@dataclass(frozen=True)
class RankThreshold:
    """Decision threshold on S (``t_w``) and on R_MW (``t_mw``)."""

    t_w: int
    t_mw: int
    achieved_pfa: float


def _mw_counts(m: int, n: int) -> list[int]:
    # c[i][u] counts arrangements of i test and j reference samples with R_MW = u.
    # Mann-Whitney form of the recurrence: c_{i,j}(u) = c_{i,j-1}(u) + c_{i-1,j}(u - j),
    # obtained from pi_{i,j}(k) = pi_{i,j-1}(k) + pi_{i-1,j}(k - i - j) by the shift
    # u = k - i(i+1)/2. Boundary: c_{i,0} = c_{0,j} = [1].
    total = comb(m + n, m)
    dtype = np.int64 if total < 2**62 else object
    rows = [np.ones(1, dtype=dtype) for _ in range(m + 1)]
    for j in range(1, n + 1):
        for i in range(1, m + 1):
            prev_same = rows[i]  # c_{i,j-1}, length i*(j-1)+1
            lower = rows[i - 1]  # c_{i-1,j}, already advanced to column j
            new = np.zeros(i * j + 1, dtype=dtype)
            new[: prev_same.size] += prev_same
            new[j : j + lower.size] += lower
            rows[i] = new
    return [int(c) for c in rows[m]]


def build_distribution(m: int, n: int, *, cap: int = DEFAULT_SUPPORT_CAP) -> ExactRankDistribution:
    """Exact null distribution for ``m`` test and ``n`` reference samples.

    Results are memoized per ``(m, n)``; the returned object is immutable.
    """
    m, n = int(m), int(n)
    if m < 0 or n < 0 or m + n < 1:
        raise ValueError(f"need m >= 0, n >= 0, m + n >= 1 (got m={m}, n={n})")
    if m * n > cap:
        raise SupportTooLarge(f"support m*n = {m * n} exceeds cap {cap}")
    key = (m, n)
    dist = _cache.get(key)
    if dist is not None:
        return dist
    # The table is symmetric in (m, n) over u; recurse on the smaller side.
    counts = _mw_counts(min(m, n), max(m, n)) if m * n else [1]
    suffix = [0] * (len(counts) + 1)
    acc = 0
    for u in range(len(counts) - 1, -1, -1):
        acc += counts[u]
        suffix[u] = acc
    dist = ExactRankDistribution(
        m=m,
        n=n,
        counts=tuple(counts),
        total=comb(m + n, m),
        _suffix=tuple(suffix[:-1]),
    )
    with _cache_lock:
        return _cache.setdefault(key, dist)


def tail_probability(dist: ExactRankDistribution, threshold: int) -> float:
    """P{S >= threshold} under the null hypothesis."""
    return dist.tail_count(threshold) / dist.total


def threshold_for_pfa(dist: ExactRankDistribution, design_pfa: float) -> RankThreshold:
    """Smallest ``t_w`` whose exact tail does not exceed ``design_pfa``.

    If no point of the support is rare enough the threshold is set one past
    the support maximum and the detector never fires.
    """
    if not 0 < design_pfa <= 1:
        raise ValueError(f"design_pfa must be in (0, 1], got {design_pfa}")
    limit = Fraction(design_pfa) * dist.total
    suffix = dist._suffix
    # suffix is nonincreasing; find the first u with suffix[u] <= limit
    lo, hi = 0, len(suffix)
    while lo < hi:
        mid = (lo + hi) // 2
        if suffix[mid] <= limit:
            hi = mid
        else:
            lo = mid + 1
    t_w = lo + dist.offset
    return RankThreshold(
        t_w=t_w,
        t_mw=lo,
        achieved_pfa=tail_probability(dist, t_w),
    )


def mann_whitney_statistic(test, reference) -> int:
    """Number of (test, reference) pairs with ``test >= reference``.

    Ties score for the test sample.
    """
    x = np.asarray(test, dtype=np.float64).ravel()
    y = np.sort(np.asarray(reference, dtype=np.float64).ravel())
    if x.size == 0 or y.size == 0:
        raise ValueError("test and reference must be nonempty")
    return int(np.searchsorted(y, x, side="right").sum())


def wilcoxon_statistic(test, reference) -> int:
    """Rank-sum statistic ``S = R_MW + m(m+1)/2``."""
    m = np.asarray(test).size
    return mann_whitney_statistic(test, reference) + m * (m + 1) // 2


def mann_whitney_batch(test: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Row-wise R_MW for ``test`` of shape (B, m) and ``reference`` of shape (B, n)."""
    test = np.asarray(test)
    reference = np.asarray(reference)
    out = np.zeros(test.shape[0], dtype=np.int64)
    for i in range(test.shape[1]):
        out += np.count_nonzero(test[:, i : i + 1] >= reference, axis=1)
    return out
