"""Clutter amplitude models: densities, tails, quantiles, samplers and fitters.

Families and their parameters:

=========  ==================  ==========================================
family     parameters          density
=========  ==================  ==========================================
gaussian   mu, sigma           normal
weibull    c (shape), b        (c/b)(x/b)^(c-1) exp(-(x/b)^c)
gamma      k (shape), theta    x^(k-1) exp(-x/theta) / (Gamma(k) theta^k)
rayleigh   sigma               (x/sigma^2) exp(-x^2 / (2 sigma^2))
k          nu (shape), b       (2b/Gamma(nu)) (bx/2)^nu K_{nu-1}(bx)
=========  ==================  ==========================================

The K form has moments ``E[x^r] = (2/b)^r Gamma(nu + r/2) Gamma(1 + r/2) / Gamma(nu)``
and is sampled as Rayleigh speckle modulated by a unit-mean Gamma texture.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize, special

FAMILIES = ("gaussian", "weibull", "gamma", "rayleigh", "k")

_PARAM_NAMES = {
    "gaussian": ("mu", "sigma"),
    "weibull": ("c", "b"),
    "gamma": ("k", "theta"),
    "rayleigh": ("sigma",),
    "k": ("nu", "b"),
}


class FitError(ValueError):
    """Samples cannot support the requested fit."""


class ConvergenceError(RuntimeError):
    """An iterative estimator did not converge."""


def rng_for(*keys: int) -> np.random.Generator:
    """Independent generator derived from a tuple of nonnegative integer keys."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


@dataclass(frozen=True)
class ClutterModel:
    family: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.family not in _PARAM_NAMES:
            raise ValueError(f"unknown family {self.family!r}")
        names = _PARAM_NAMES[self.family]
        if len(self.params) != len(names):
            raise ValueError(f"{self.family} takes parameters {names}")
        vals = self.params[1:] if self.family == "gaussian" else self.params
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise ValueError(f"{self.family} parameters must be positive: {self.params}")
        object.__setattr__(self, "params", tuple(float(v) for v in self.params))

    @classmethod
    def gaussian(cls, mu: float, sigma: float) -> "ClutterModel":
        return cls("gaussian", (mu, sigma))

    @classmethod
    def weibull(cls, c: float, b: float = 1.0) -> "ClutterModel":
        return cls("weibull", (c, b))

    @classmethod
    def gamma(cls, k: float, theta: float = 1.0) -> "ClutterModel":
        return cls("gamma", (k, theta))

    @classmethod
    def rayleigh(cls, sigma: float = 1.0) -> "ClutterModel":
        return cls("rayleigh", (sigma,))

    @classmethod
    def k_dist(cls, nu: float, b: float) -> "ClutterModel":
        return cls("k", (nu, b))

    @classmethod
    def from_params(cls, family: str, **params: float) -> "ClutterModel":
        names = _PARAM_NAMES[family]
        missing = set(names) - set(params)
        extra = set(params) - set(names)
        if missing or extra:
            raise ValueError(f"{family} takes parameters {names}, got {sorted(params)}")
        return cls(family, tuple(params[n] for n in names))

    @property
    def named_params(self) -> dict[str, float]:
        return dict(zip(_PARAM_NAMES[self.family], self.params))

    def __str__(self) -> str:
        inner = ", ".join(f"{k}={v:.6g}" for k, v in self.named_params.items())
        return f"{self.family}({inner})"

    @property
    def lower_bound(self) -> float:
        return -np.inf if self.family == "gaussian" else 0.0

    # -- densities and tails -------------------------------------------------

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        f = self.family
        if f == "gaussian":
            mu, s = self.params
            return np.exp(-0.5 * ((x - mu) / s) ** 2) / (s * math.sqrt(2 * math.pi))
        xp = np.where(x > 0, x, 1.0)
        if f == "weibull":
            c, b = self.params
            out = (c / b) * (xp / b) ** (c - 1) * np.exp(-((xp / b) ** c))
        elif f == "gamma":
            k, th = self.params
            out = np.exp((k - 1) * np.log(xp / th) - xp / th - special.gammaln(k)) / th
        elif f == "rayleigh":
            (s,) = self.params
            out = xp / s**2 * np.exp(-(xp**2) / (2 * s**2))
        else:
            nu, b = self.params
            z = b * xp
            logf = (
                math.log(2 * b)
                - special.gammaln(nu)
                + nu * np.log(z / 2)
                + np.log(special.kve(nu - 1, z))
                - z
            )
            out = np.exp(logf)
        return np.where(x > 0, out, 0.0)

    def sf(self, x) -> np.ndarray:
        """Upper tail P{X > x}."""
        x = np.asarray(x, dtype=np.float64)
        f = self.family
        if f == "gaussian":
            mu, s = self.params
            return special.ndtr(-(x - mu) / s)
        xp = np.where(x > 0, x, 0.0)
        if f == "weibull":
            c, b = self.params
            out = np.exp(-((xp / b) ** c))
        elif f == "gamma":
            k, th = self.params
            out = special.gammaincc(k, xp / th)
        elif f == "rayleigh":
            (s,) = self.params
            out = np.exp(-(xp**2) / (2 * s**2))
        else:
            out = _k_sf(xp, *self.params)
        return np.where(x > 0, out, 1.0)

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        f = self.family
        if f == "gaussian":
            mu, s = self.params
            return special.ndtr((x - mu) / s)
        xp = np.where(x > 0, x, 0.0)
        if f == "weibull":
            c, b = self.params
            out = -np.expm1(-((xp / b) ** c))
        elif f == "gamma":
            k, th = self.params
            out = special.gammainc(k, xp / th)
        elif f == "rayleigh":
            (s,) = self.params
            out = -np.expm1(-(xp**2) / (2 * s**2))
        else:
            out = 1.0 - _k_sf(xp, *self.params)
        return np.where(x > 0, out, 0.0)

    def quantile(self, p: float) -> float:
        """Value x with CDF(x) = p."""
        if not 0 < p < 1:
            raise ValueError(f"p must be in (0, 1), got {p}")
        if p > 0.5:
            return self.isf(1.0 - p)
        f = self.family
        if f == "gaussian":
            mu, s = self.params
            return float(mu + s * special.ndtri(p))
        if f == "weibull":
            c, b = self.params
            return float(b * (-math.log1p(-p)) ** (1 / c))
        if f == "rayleigh":
            (s,) = self.params
            return float(s * math.sqrt(-2 * math.log1p(-p)))
        if f == "gamma":
            k, th = self.params
            return float(th * special.gammaincinv(k, p))
        return self._solve(lambda x: float(self.cdf(x)) - p)

    def isf(self, q: float) -> float:
        """Value x with P{X > x} = q; accurate for tiny q."""
        if not 0 < q < 1:
            raise ValueError(f"q must be in (0, 1), got {q}")
        f = self.family
        if f == "gaussian":
            mu, s = self.params
            return float(mu - s * special.ndtri(q))
        if f == "weibull":
            c, b = self.params
            return float(b * (-math.log(q)) ** (1 / c))
        if f == "rayleigh":
            (s,) = self.params
            return float(s * math.sqrt(-2 * math.log(q)))
        if f == "gamma":
            k, th = self.params
            return float(th * special.gammainccinv(k, q))
        # tail in log space keeps the root well conditioned down to q ~ 1e-300
        lq = math.log(q)
        return self._solve(lambda x: lq - math.log(max(float(self.sf(x)), 1e-320)))

    def _solve(self, fn) -> float:
        # K family only; fn is increasing in x. Bracket around the rms scale, then brentq.
        scale = math.sqrt(self.moment(2))
        lo, hi = scale * 1e-6, scale
        while fn(lo) > 0:
            lo /= 10
        while fn(hi) < 0:
            hi *= 2
        return float(optimize.brentq(fn, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500))

    # -- moments and sampling ------------------------------------------------

    def moment(self, r: float) -> float:
        """Raw moment E[X^r] (r = 1, 2 for gaussian)."""
        f = self.family
        if f == "gaussian":
            mu, s = self.params
            if r == 1:
                return mu
            if r == 2:
                return mu * mu + s * s
            raise ValueError("gaussian moments only for r in {1, 2}")
        if f == "weibull":
            c, b = self.params
            return b**r * special.gamma(1 + r / c)
        if f == "gamma":
            k, th = self.params
            return th**r * math.exp(special.gammaln(k + r) - special.gammaln(k))
        if f == "rayleigh":
            (s,) = self.params
            return (math.sqrt(2) * s) ** r * special.gamma(1 + r / 2)
        nu, b = self.params
        return (2 / b) ** r * math.exp(
            special.gammaln(nu + r / 2) + special.gammaln(1 + r / 2) - special.gammaln(nu)
        )

    def mean_power(self) -> float:
        """E[X^2], the clutter power used as the SCR reference."""
        return self.moment(2)

    def sample(self, count, seed: int | Sequence[int] = 0, rng: np.random.Generator | None = None) -> np.ndarray:
        """Draw ``count`` samples (an int or a shape).

        With ``rng`` omitted, the stream is fully determined by ``seed``, which may be
        a tuple of keys such as ``(master_seed, stream_index)``.
        """
        if rng is None:
            keys = (seed,) if np.isscalar(seed) else tuple(seed)
            rng = rng_for(*keys)
        f = self.family
        if f == "gaussian":
            mu, s = self.params
            return rng.normal(mu, s, size=count)
        if f == "weibull":
            c, b = self.params
            return b * rng.weibull(c, size=count)
        if f == "gamma":
            k, th = self.params
            return rng.gamma(k, th, size=count)
        if f == "rayleigh":
            (s,) = self.params
            return rng.rayleigh(s, size=count)
        nu, b = self.params
        texture = rng.gamma(nu, 1.0 / nu, size=count)
        speckle = rng.rayleigh(math.sqrt(2 * nu) / b, size=count)
        return speckle * np.sqrt(texture)


def _k_sf(x: np.ndarray, nu: float, b: float) -> np.ndarray:
    # P{X > x} = (2/Gamma(nu)) (bx/2)^nu K_nu(bx)
    z = b * np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = math.log(2) - special.gammaln(nu) + nu * np.log(z / 2) + np.log(special.kve(nu, z)) - z
        out = np.exp(logs)
    return np.where(z > 0, np.minimum(out, 1.0), 1.0)


# -- fitting -------------------------------------------------------------------


def weibull_ml_rows(x: np.ndarray, max_iter: int = 100, tol: float = 1e-12):
    """Row-wise Weibull maximum-likelihood fit.

    Solves the profile equation for the shape with a safeguarded Newton
    iteration started at the moment estimate, then sets the scale from the
    shape. Rows with nonpositive or constant samples are flagged in ``bad``
    and get NaN parameters.

    Returns ``(c, b, bad)``. Raises ConvergenceError if any usable row fails.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    nrow = x.shape[0]
    top = x.max(axis=1)
    bad = (x.min(axis=1) <= 0) | (x.min(axis=1) == top) | ~np.isfinite(top)
    c = np.full(nrow, np.nan)
    b = np.full(nrow, np.nan)
    ok = ~bad
    if not ok.any():
        return c, b, bad
    y = x[ok] / top[ok, None]
    ly = np.log(y)
    mean_ly = ly.mean(axis=1)
    cv = y.std(axis=1) / y.mean(axis=1)
    cc = np.clip(cv ** -1.086, 0.05, 50.0)
    lo = np.zeros_like(cc)
    hi = np.full_like(cc, np.inf)
    active = np.ones(cc.shape, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ca = cc[idx]
        yc = y[idx] ** ca[:, None]
        lyi = ly[idx]
        s0 = yc.sum(axis=1)
        s1 = (yc * lyi).sum(axis=1)
        s2 = (yc * lyi * lyi).sum(axis=1)
        fval = 1.0 / ca + mean_ly[idx] - s1 / s0
        fder = -1.0 / ca**2 - (s2 * s0 - s1 * s1) / s0**2
        # f is strictly decreasing in c: positive f means the root lies above
        pos = fval > 0
        lo[idx] = np.where(pos, ca, lo[idx])
        hi[idx] = np.where(pos, hi[idx], ca)
        step = -fval / fder
        new = ca + step
        outside = ~((new > lo[idx]) & (new < hi[idx]))
        bisect = np.where(np.isfinite(hi[idx]), 0.5 * (lo[idx] + hi[idx]), 2.0 * ca)
        new = np.where(outside, bisect, new)
        cc[idx] = new
        done = (np.abs(new - ca) <= tol * new) | (fval == 0)
        active[idx[done]] = False
    if active.any():
        raise ConvergenceError(
            f"Weibull shape did not converge in {max_iter} iterations for {int(active.sum())} row(s)"
        )
    c[ok] = cc
    b[ok] = top[ok] * np.mean(y ** cc[:, None], axis=1) ** (1.0 / cc)
    return c, b, bad


def gamma_shape_ml(samples: np.ndarray, max_iter: int = 100) -> float:
    """ML Gamma shape from ``log(mean) - mean(log)``."""
    x = np.asarray(samples, dtype=np.float64)
    s = math.log(x.mean()) - np.log(x).mean()
    if not s > 0:
        raise FitError("constant samples: Gamma shape is unbounded")
    k = (3 - s + math.sqrt((s - 3) ** 2 + 24 * s)) / (12 * s)
    for _ in range(max_iter):
        f = math.log(k) - special.digamma(k) - s
        fp = 1 / k - special.polygamma(1, k)
        new = k - f / fp
        if new <= 0:
            new = k / 2
        if abs(new - k) <= 1e-13 * new:
            return float(new)
        k = new
    raise ConvergenceError("Gamma shape ML did not converge")


def estimate_enl(amplitudes) -> float:
    """Equivalent number of looks, ``(mean/std)^2`` of intensity = amplitude^2."""
    a = np.asarray(amplitudes, dtype=np.float64).ravel()
    if a.size < 10 or np.any(a <= 0):
        raise FitError("ENL needs at least 10 positive amplitude samples")
    intensity = a * a
    sd = intensity.std()
    if sd == 0:
        raise FitError("zero-variance intensity: ENL undefined")
    return float((intensity.mean() / sd) ** 2)


def fit(family: str, samples, *, shape_mode: str = "ml", enl: float | None = None) -> ClutterModel:
    """Fit a clutter model to samples.

    Maximum likelihood for gaussian, weibull, gamma and rayleigh; method of
    moments (2nd and 4th) for K. ``shape_mode="enl"`` fixes the Gamma shape to
    ``enl`` (estimated from the samples if not given) and fits the scale only.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    # the Rayleigh estimate is closed form and defined for any nonempty sample
    need = 1 if family == "rayleigh" else 10
    if x.size < need:
        raise FitError(f"need at least {need} samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise FitError("samples must be finite")
    if family == "gaussian":
        sd = x.std()
        if sd == 0:
            raise FitError("zero-variance samples")
        return ClutterModel.gaussian(x.mean(), sd)
    if np.any(x <= 0):
        raise FitError(f"{family} fit needs positive samples")
    if family == "rayleigh":
        return ClutterModel.rayleigh(math.sqrt(np.mean(x * x) / 2))
    if family == "weibull":
        c, b, bad = weibull_ml_rows(x[None, :])
        if bad[0]:
            raise FitError("zero-variance samples")
        return ClutterModel.weibull(c[0], b[0])
    if family == "gamma":
        if shape_mode == "enl":
            k = estimate_enl(x) if enl is None else float(enl)
        elif shape_mode == "ml":
            k = gamma_shape_ml(x)
        else:
            raise ValueError(f"shape_mode must be 'ml' or 'enl', got {shape_mode!r}")
        return ClutterModel.gamma(k, x.mean() / k)
    if family == "k":
        m2 = np.mean(x**2)
        m4 = np.mean(x**4)
        excess = m4 / (2 * m2 * m2) - 1
        if not excess > 0:
            raise FitError("normalized 4th moment <= 2: no K shape fits (Rayleigh limit)")
        nu = 1 / excess
        return ClutterModel.k_dist(nu, math.sqrt(4 * nu / m2))
    raise ValueError(f"unknown family {family!r}")


# -- histogram and tail analysis ----------------------------------------------

HISTOGRAM_FAMILIES = ("gaussian", "weibull", "gamma", "gamma_enl", "rayleigh", "k")


@dataclass
class HistogramReport:
    edges: np.ndarray
    density: np.ndarray
    models: dict[str, ClutterModel] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    model_density: dict[str, np.ndarray] = field(default_factory=dict)
    tail_values: np.ndarray = field(default_factory=lambda: np.empty(0))
    tail_empirical: np.ndarray = field(default_factory=lambda: np.empty(0))
    tail_model: dict[str, np.ndarray] = field(default_factory=dict)
    sample_count: int = 0

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def write_body_csv(self, path) -> None:
        names = list(self.model_density)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_center", "empirical_density", *names])
            for i, c in enumerate(self.centers):
                w.writerow([_fmt(c), _fmt(self.density[i]), *(_fmt(self.model_density[n][i]) for n in names)])

    def write_tail_csv(self, path) -> None:
        names = list(self.tail_model)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["value", "empirical_exceedance", *names])
            for i, v in enumerate(self.tail_values):
                w.writerow([_fmt(v), _fmt(self.tail_empirical[i]), *(_fmt(self.tail_model[n][i]) for n in names)])

    def write_params_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["family", "status", "parameters"])
            for name, model in self.models.items():
                w.writerow([name, "ok", " ".join(f"{k}={_fmt(v)}" for k, v in model.named_params.items())])
            for name, err in self.errors.items():
                w.writerow([name, "error", err])


def _fmt(v: float) -> str:
    return repr(float(v))


def histogram_report(samples, bins: int = 512, families: Iterable[str] = (), enl: float | None = None) -> HistogramReport:
    """Histogram of amplitudes with per-family fits and a tail exceedance table.

    Fit failures are recorded in ``report.errors`` rather than raised.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < bins * 10:
        raise FitError(f"need at least {bins * 10} samples for {bins} bins, got {x.size}")
    top = float(x.max())
    edges = np.linspace(0.0, top, bins + 1)
    density, _ = np.histogram(x, bins=edges, density=True)
    report = HistogramReport(edges=edges, density=density, sample_count=x.size)
    centers = report.centers
    srt = np.sort(x)
    report.tail_values = edges[1:]
    report.tail_empirical = 1.0 - np.searchsorted(srt, edges[1:], side="right") / x.size
    for name in families:
        if name not in HISTOGRAM_FAMILIES:
            raise ValueError(f"unknown family {name!r}; choose from {HISTOGRAM_FAMILIES}")
        try:
            if name == "gamma_enl":
                model = fit("gamma", x, shape_mode="enl", enl=enl)
            else:
                model = fit(name, x)
        except (FitError, ConvergenceError) as exc:
            report.errors[name] = str(exc)
            continue
        report.models[name] = model
        report.model_density[name] = model.pdf(centers)
        report.tail_model[name] = model.sf(edges[1:])
    return report
