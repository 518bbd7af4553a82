"""Decision rules: the rank-sum (Mann-Whitney) detector and four parametric baselines.

Every rule works on batches: ``test`` has shape (B, m) and ``reference``
shape (B, n). Parametric rules test a single pixel (m = 1). The scalar
``decide_*`` helpers wrap the batch rules for one window and raise on
degenerate references instead of flagging them.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .clutter import ConvergenceError, estimate_enl, gamma_shape_ml, weibull_ml_rows
from .rank_core import (
    ExactRankDistribution,
    RankThreshold,
    build_distribution,
    mann_whitney_batch,
    threshold_for_pfa,
)
from .window import DegenerateReference, WindowGeometry

KINDS = ("wilcoxon", "two_parameter", "weibull", "truncated_gamma", "trimmed_rayleigh")


@dataclass(frozen=True)
class DetectorConfig:
    kind: str
    design_pfa: float
    truncation_ratio: float = 0.10
    trim_factor: float = 2.0
    shape_mode: str = "enl"
    shape: float | None = None
    gamma_domain: str = "intensity"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown detector kind {self.kind!r}; choose from {KINDS}")
        if not 0 < self.design_pfa < 1:
            raise ValueError(f"design_pfa must be in (0, 1), got {self.design_pfa}")
        if not 0 <= self.truncation_ratio < 1:
            raise ValueError(f"truncation ratio must be in [0, 1), got {self.truncation_ratio}")
        if not self.trim_factor > 0:
            raise ValueError(f"trim factor must be positive, got {self.trim_factor}")
        if self.shape_mode not in ("ml", "enl"):
            raise ValueError(f"shape_mode must be 'ml' or 'enl', got {self.shape_mode!r}")
        if self.shape is not None and not self.shape > 0:
            raise ValueError(f"shape must be positive, got {self.shape}")
        if self.gamma_domain not in ("intensity", "amplitude"):
            raise ValueError(f"gamma_domain must be 'intensity' or 'amplitude', got {self.gamma_domain!r}")

    @property
    def parametric(self) -> bool:
        return self.kind != "wilcoxon"

    def with_pfa(self, design_pfa: float) -> "DetectorConfig":
        return dataclasses.replace(self, design_pfa=design_pfa)


def _rows(test, reference):
    test = np.atleast_2d(np.asarray(test, dtype=np.float64))
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    if test.shape[0] != reference.shape[0]:
        raise ValueError("test and reference batches differ in length")
    return test, reference


class WilcoxonRule:
    """Fires when R_MW reaches the exact threshold ``t_mw`` for (m, n)."""

    inclusive = True

    def __init__(self, m: int, n: int, design_pfa: float):
        self.dist = build_distribution(m, n)
        self.threshold = threshold_for_pfa(self.dist, design_pfa)
        self.design_pfa = design_pfa
        self._tail = self.dist.mw_tail_table()

    def _stat(self, test, reference):
        test, reference = _rows(test, reference)
        if test.shape[1] != self.dist.m or reference.shape[1] != self.dist.n:
            raise ValueError(
                f"expected {self.dist.m} test and {self.dist.n} reference samples, "
                f"got {test.shape[1]} and {reference.shape[1]}"
            )
        return mann_whitney_batch(test, reference)

    def decide(self, test, reference):
        stat = self._stat(test, reference)
        return stat >= self.threshold.t_mw, np.zeros(stat.shape, dtype=bool)

    def pvalue(self, test, reference):
        stat = self._stat(test, reference)
        return self._tail[stat], np.zeros(stat.shape, dtype=bool)


class _ParametricRule:
    inclusive = False
    min_reference = 2

    def __init__(self, design_pfa: float):
        self.design_pfa = design_pfa

    def _check(self, test, reference):
        test, reference = _rows(test, reference)
        if test.shape[1] != 1:
            raise ValueError(f"parametric rules test one pixel per window, got {test.shape[1]}")
        if reference.shape[1] < self.min_reference:
            raise ValueError(f"need at least {self.min_reference} reference samples, got {reference.shape[1]}")
        return test[:, 0], reference

    def decide(self, test, reference):
        x, ref = self._check(test, reference)
        thr, degen = self.thresholds(ref)
        return (x > thr) & ~degen, degen

    def pvalue(self, test, reference):
        x, ref = self._check(test, reference)
        params, degen = self.fit(ref)
        return self.tail(x, params), degen

    def thresholds(self, reference):
        raise NotImplementedError


class TwoParameterRule(_ParametricRule):
    """Gaussian background: fires when x > mu + z sigma (ML mean and std)."""

    def __init__(self, design_pfa: float):
        super().__init__(design_pfa)
        self.z = -special.ndtri(design_pfa)

    def fit(self, ref):
        mu = ref.mean(axis=1)
        sd = ref.std(axis=1)
        return (mu, sd), sd == 0

    def tail(self, x, params):
        mu, sd = params
        with np.errstate(divide="ignore", invalid="ignore"):
            return special.ndtr(-(x - mu) / sd)

    def thresholds(self, ref):
        (mu, sd), degen = self.fit(ref)
        return mu + self.z * sd, degen


class WeibullRule(_ParametricRule):
    """ML Weibull fit; fires when x > b (-ln P_FA)^(1/c)."""

    def __init__(self, design_pfa: float):
        super().__init__(design_pfa)
        self.log_term = -math.log(design_pfa)

    def fit(self, ref):
        c, b, bad = weibull_ml_rows(ref)
        return (c, b), bad

    def tail(self, x, params):
        c, b = params
        return np.exp(-((np.maximum(x, 0) / b) ** c))

    def thresholds(self, ref):
        (c, b), bad = self.fit(ref)
        return b * self.log_term ** (1.0 / c), bad


def truncated_gamma_scale(kept_mean, cut, shape: float, iters: int = 200):
    """ML scale of a Gamma(shape, theta) sample right-truncated at ``cut``.

    Solves ``mean = theta * shape * P(shape+1, cut/theta) / P(shape, cut/theta)``
    by bisection on ``log(cut/theta)``. Returns NaN where the sample mean is
    too close to ``cut`` for any finite scale.
    """
    kept_mean = np.asarray(kept_mean, dtype=np.float64)
    cut = np.asarray(cut, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = kept_mean / cut
    k = shape
    ok = (rho > 0) & (rho < k / (k + 1)) & np.isfinite(rho)
    r = np.where(ok, rho, 0.5 * k / (k + 1))

    def h(tau):
        return k * special.gammainc(k + 1, tau) / (tau * special.gammainc(k, tau))

    # h(tau) = E[Z | Z <= tau] / tau decreases from k/(k+1) to 0
    lo = np.full(r.shape, math.log(1e-12))
    hi = np.log(2 * k / r + 50.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        above = h(np.exp(mid)) > r
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        if np.all(hi - lo < 1e-14):
            break
    tau = np.exp(0.5 * (lo + hi))
    return np.where(ok, cut / tau, np.nan)


class TruncatedGammaRule(_ParametricRule):
    """Gamma background with known shape, scale fitted after discarding the top R_t of the reference.

    With ``domain="intensity"`` the Gamma law describes squared samples,
    which is where an ENL-valued shape belongs; decisions are unchanged
    by the squaring since it is monotone on amplitudes.
    """

    min_reference = 10

    def __init__(self, design_pfa: float, shape: float, truncation_ratio: float = 0.10, domain: str = "amplitude"):
        super().__init__(design_pfa)
        if not shape > 0:
            raise ValueError(f"Gamma shape must be positive, got {shape}")
        self.shape = float(shape)
        self.truncation_ratio = truncation_ratio
        self.squared = domain == "intensity"
        self.quantile = special.gammainccinv(self.shape, design_pfa)

    def _check(self, test, reference):
        x, ref = super()._check(test, reference)
        return (x * x, ref * ref) if self.squared else (x, ref)

    def fit(self, ref):
        n = ref.shape[1]
        drop = math.ceil(self.truncation_ratio * n - 1e-12)
        if drop >= n:
            raise DegenerateReference("truncation leaves no reference samples")
        if drop == 0:
            theta = ref.mean(axis=1) / self.shape
        else:
            kept = np.partition(ref, n - drop - 1, axis=1)[:, : n - drop]
            cut = kept.max(axis=1)
            theta = truncated_gamma_scale(kept.mean(axis=1), cut, self.shape)
        degen = ~(theta > 0)
        return np.where(degen, np.nan, theta), degen

    def tail(self, x, theta):
        return special.gammaincc(self.shape, np.maximum(x, 0) / theta)

    def thresholds(self, ref):
        theta, degen = self.fit(ref)
        return theta * self.quantile, degen


def truncated_rayleigh_sigma2(mean_sq, cut, iters: int = 200):
    """ML Rayleigh sigma^2 from samples right-truncated at ``cut``.

    With ``a = cut^2 / (2 sigma^2)`` the likelihood equation reads
    ``mean_sq / cut^2 = 1/a - 1/(e^a - 1)``. Falls back to the untruncated
    estimate ``mean_sq / 2`` where the samples show no truncation.
    """
    mean_sq = np.asarray(mean_sq, dtype=np.float64)
    cut = np.broadcast_to(np.asarray(cut, dtype=np.float64), mean_sq.shape)
    plain = mean_sq / 2
    finite = np.isfinite(cut) & (cut > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(finite, mean_sq / cut**2, np.nan)

    def phi(a):
        return 1.0 / a - 1.0 / np.expm1(a)

    lo_a = 1e-6
    ok = finite & (rho > 0) & (rho < phi(lo_a))
    r = np.where(ok, rho, 0.25)
    lo = np.full(r.shape, math.log(lo_a))
    hi = np.log(np.maximum(2.0 / r, 1e3))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        above = phi(np.exp(mid)) > r
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        if np.all(hi - lo < 1e-14):
            break
    a = np.exp(0.5 * (lo + hi))
    with np.errstate(divide="ignore", invalid="ignore"):
        trunc = cut**2 / (2 * a)
    return np.where(ok, trunc, plain)


def _count_at_most(sorted_rows, values, upper):
    """Per row, how many of the first ``upper`` sorted entries are <= ``values``."""
    lo = np.zeros(values.shape, dtype=np.int64)
    hi = np.asarray(upper, dtype=np.int64).copy()
    rows = np.arange(values.size)
    while True:
        open_ = lo < hi
        if not open_.any():
            return lo
        mid = (lo + hi) // 2
        below = open_ & (sorted_rows[rows, np.minimum(mid, sorted_rows.shape[1] - 1)] <= values)
        lo = np.where(below, mid + 1, lo)
        hi = np.where(open_ & ~below, mid, hi)


class TrimmedRayleighRule(_ParametricRule):
    """Rayleigh background with iterative trimming of samples above lambda times the RMS amplitude.

    Once samples have been trimmed, the scale is the ML estimate for a
    Rayleigh sample truncated at the tightest cut applied so far.
    """

    min_reference = 10
    max_iter = 20

    def __init__(self, design_pfa: float, trim_factor: float = 2.0):
        super().__init__(design_pfa)
        self.trim_factor = trim_factor
        self.factor = math.sqrt(-2 * math.log(design_pfa))

    def fit(self, ref, return_iterations: bool = False):
        # Sorted rows turn "trim above the cut" into a prefix length and
        # cumulative sums give each prefix's mean square in O(1).
        srt = np.sort(ref, axis=1)
        csum = np.cumsum(srt * srt, axis=1)
        nrow, n = srt.shape
        rows = np.arange(nrow)
        count = np.full(nrow, n, dtype=np.int64)
        sigma2 = csum[:, -1] / (2 * n)
        cut = np.full(nrow, np.inf)
        active = np.ones(nrow, dtype=bool)
        iterations = np.zeros(nrow, dtype=np.int64)
        for _ in range(self.max_iter):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            new_cut = self.trim_factor * np.sqrt(2 * sigma2[idx])
            kept = _count_at_most(srt[idx], new_cut, count[idx])
            removed = kept < count[idx]
            active[idx[~removed]] = False
            idx, kept, new_cut = idx[removed], kept[removed], new_cut[removed]
            if idx.size == 0:
                break
            if np.any(kept == 0):
                raise DegenerateReference("trimming removed every reference sample")
            iterations[idx] += 1
            count[idx] = kept
            cut[idx] = np.minimum(cut[idx], new_cut)
            mean_sq = csum[rows[idx], kept - 1] / kept
            sigma2[idx] = truncated_rayleigh_sigma2(mean_sq, cut[idx])
        sigma = np.sqrt(sigma2)
        degen = ~(sigma > 0)
        if return_iterations:
            return sigma, degen, iterations, count
        return sigma, degen

    def tail(self, x, sigma):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.exp(-(x * x) / (2 * sigma * sigma))

    def thresholds(self, ref):
        sigma, degen = self.fit(ref)
        return sigma * self.factor, degen


def make_rule(config: DetectorConfig, geometry: WindowGeometry | None = None, *, shape: float | None = None):
    """Build the batch decision rule for ``config``.

    The rank rule needs the window geometry for (m, n). The truncated-Gamma
    rule needs a shape, from ``config.shape`` or the ``shape`` argument
    (typically estimated once over the whole image).
    """
    kind = config.kind
    if kind == "wilcoxon":
        if geometry is None:
            raise ValueError("the rank detector needs a window geometry")
        return WilcoxonRule(geometry.m, geometry.n, config.design_pfa)
    if geometry is not None and geometry.t != 1:
        raise ValueError(f"{kind} detector tests a single pixel; use t=1 (got t={geometry.t})")
    if kind == "two_parameter":
        return TwoParameterRule(config.design_pfa)
    if kind == "weibull":
        return WeibullRule(config.design_pfa)
    if kind == "truncated_gamma":
        k = config.shape if config.shape is not None else shape
        if k is None:
            raise ValueError("truncated_gamma needs a shape (ENL or ML estimate)")
        return TruncatedGammaRule(config.design_pfa, k, config.truncation_ratio, config.gamma_domain)
    return TrimmedRayleighRule(config.design_pfa, config.trim_factor)


# -- single-window helpers -------------------------------------------------------


def _single(rule, test_pixel, reference):
    fire, degen = rule.decide(np.array([[float(test_pixel)]]), np.asarray(reference, dtype=np.float64)[None, :])
    if degen[0]:
        raise DegenerateReference("reference samples cannot support the estimator")
    return bool(fire[0])


def decide_wilcoxon(test, reference, dist: ExactRankDistribution, threshold: RankThreshold) -> bool:
    test = np.asarray(test, dtype=np.float64).ravel()
    reference = np.asarray(reference, dtype=np.float64).ravel()
    if test.size != dist.m or reference.size != dist.n:
        raise ValueError(
            f"size mismatch: distribution is for m={dist.m}, n={dist.n}; got {test.size}, {reference.size}"
        )
    return bool(mann_whitney_batch(test[None, :], reference[None, :])[0] >= threshold.t_mw)


def decide_two_parameter(test_pixel, reference, design_pfa: float) -> bool:
    return _single(TwoParameterRule(design_pfa), test_pixel, reference)


def decide_weibull(test_pixel, reference, design_pfa: float) -> bool:
    ref = np.asarray(reference, dtype=np.float64)
    if np.any(ref <= 0):
        raise ValueError("Weibull fit needs positive reference samples")
    return _single(WeibullRule(design_pfa), test_pixel, ref)


def decide_truncated_gamma(test_pixel, reference, design_pfa: float, truncation_ratio: float, shape: float) -> bool:
    try:
        return _single(TruncatedGammaRule(design_pfa, shape, truncation_ratio), test_pixel, reference)
    except DegenerateReference as exc:
        raise ConvergenceError("truncated Gamma scale has no finite ML solution") from exc


def decide_trimmed_rayleigh(test_pixel, reference, design_pfa: float, trim_factor: float = 2.0) -> bool:
    return _single(TrimmedRayleighRule(design_pfa, trim_factor), test_pixel, reference)


def gamma_shape_for(config: DetectorConfig, samples) -> float:
    """Image-wide Gamma shape for the truncated-Gamma rule.

    ``enl`` mode uses the equivalent number of looks; ``ml`` mode fits the
    Gamma shape by maximum likelihood in the rule's domain.
    """
    if config.shape is not None:
        return config.shape
    x = np.asarray(samples, dtype=np.float64).ravel()
    x = x[x > 0]
    if config.shape_mode == "enl":
        return estimate_enl(x)
    if config.gamma_domain == "intensity":
        x = x * x
    return gamma_shape_ml(x)
