"""Monte Carlo harness: detection-probability curves, false-alarm regulation, synthetic scenes.

Random streams are derived from the master seed and fixed block indices,
never from the worker layout, so results do not depend on ``workers``.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from .clutter import ClutterModel, rng_for
from .detectors import DetectorConfig, WilcoxonRule, gamma_shape_for, make_rule
from .metrics import Ellipse, GroundTruth, ellipse_mask
from .window import WindowGeometry

BLOCK = 2000  # trials per random stream


def simulate_pixel(clutter_amp, target_mean_power, rng: np.random.Generator):
    """Amplitude of clutter plus a Swerling II target, added as phasors.

    Target power is exponential with mean ``target_mean_power`` and both
    phases are uniform and independent.
    """
    c = np.asarray(clutter_amp, dtype=np.float64)
    shape = c.shape
    power = rng.exponential(1.0, size=shape) * target_mean_power
    phase_c = rng.uniform(0.0, 2 * math.pi, size=shape)
    phase_s = rng.uniform(0.0, 2 * math.pi, size=shape)
    s = np.sqrt(power)
    # |c e^{j pc} + s e^{j ps}|^2 by the law of cosines; exact when s = 0
    amp2 = c * c + s * s + 2 * c * s * np.cos(phase_s - phase_c)
    out = np.sqrt(np.maximum(amp2, 0.0))
    return out if shape else float(out)


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    z = float(-special.ndtri((1 - confidence) / 2))
    p = successes / trials
    denom = 1 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == trials else min(1.0, centre + half)
    return lo, hi


def _resolve_shape(detector: DetectorConfig, clutter: ClutterModel, seed: int) -> float | None:
    if detector.kind != "truncated_gamma" or detector.shape is not None:
        return None
    calib = clutter.sample(100_000, rng=rng_for(seed, 2**31 - 1))
    return gamma_shape_for(detector, calib)


def _count_fires(rule, clutter, geometry, target_power, trials, keys, workers):
    m, n = geometry.m, geometry.n
    blocks = [(j, min(BLOCK, trials - j * BLOCK)) for j in range(math.ceil(trials / BLOCK))]

    def work(block):
        j, size = block
        rng = rng_for(*keys, j)
        ref = clutter.sample((size, n), rng=rng)
        test = clutter.sample((size, m), rng=rng)
        if target_power > 0:
            test = simulate_pixel(test, target_power, rng)
        fire, _ = rule.decide(test, ref)
        return int(np.count_nonzero(fire))

    if workers is None or workers <= 1:
        return sum(work(b) for b in blocks)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return sum(pool.map(work, blocks))


@dataclass(frozen=True)
class TrialSpec:
    clutter: ClutterModel
    detector: DetectorConfig
    geometry: WindowGeometry
    scr_db: tuple[float, ...]
    trials: int
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        object.__setattr__(self, "scr_db", tuple(float(v) for v in self.scr_db))
        if any(math.isnan(v) or v == math.inf for v in self.scr_db):
            raise ValueError("SCR grid must be finite (or -inf for no target)")


@dataclass
class PdCurve:
    scr_db: np.ndarray
    p_d: np.ndarray
    stderr: np.ndarray
    detector: str
    design_pfa: float
    m: int
    n: int
    meta: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scr_db", "p_d", "stderr"])
            for s, p, e in zip(self.scr_db, self.p_d, self.stderr):
                w.writerow([repr(float(s)), repr(float(p)), repr(float(e))])


def run_pd_curve(spec: TrialSpec, workers: int | None = 1) -> PdCurve:
    """Detection probability versus SCR (target power over E[clutter^2])."""
    shape = _resolve_shape(spec.detector, spec.clutter, spec.seed)
    rule = make_rule(spec.detector, spec.geometry, shape=shape)
    clutter_power = spec.clutter.mean_power()
    pd = np.empty(len(spec.scr_db))
    for i, scr in enumerate(spec.scr_db):
        power = 0.0 if scr == -math.inf else clutter_power * 10 ** (scr / 10)
        try:
            fires = _count_fires(rule, spec.clutter, spec.geometry, power, spec.trials, (spec.seed, i), workers)
        except Exception as exc:
            raise RuntimeError(f"{spec.detector.kind} failed at SCR {scr} dB: {exc}") from exc
        pd[i] = fires / spec.trials
    meta = {"clutter": str(spec.clutter), "trials": spec.trials, "seed": spec.seed}
    if isinstance(rule, WilcoxonRule):
        meta["achieved_pfa"] = rule.threshold.achieved_pfa
    if shape is not None:
        meta["gamma_shape"] = shape
    return PdCurve(
        scr_db=np.array(spec.scr_db),
        p_d=pd,
        stderr=np.sqrt(pd * (1 - pd) / spec.trials),
        detector=spec.detector.kind,
        design_pfa=spec.detector.design_pfa,
        m=spec.geometry.m,
        n=spec.geometry.n,
        meta=meta,
    )


@dataclass
class RegulationRow:
    family: str
    fires: int
    trials: int
    nominal_pfa: float
    ci_lo: float
    ci_hi: float

    @property
    def measured_pfa(self) -> float:
        return self.fires / self.trials

    @property
    def inside(self) -> bool:
        return self.ci_lo <= self.nominal_pfa <= self.ci_hi


def run_pfa_regulation(
    models: Sequence[ClutterModel],
    detector: DetectorConfig,
    geometry: WindowGeometry,
    trials: int,
    seed: int = 0,
    confidence: float = 0.95,
    workers: int | None = 1,
) -> list[RegulationRow]:
    """Firing rate on pure clutter for each model, with a Wilson confidence interval.

    ``nominal_pfa`` is the exact achieved rate for the rank detector and the
    design rate for parametric detectors.
    """
    if trials * detector.design_pfa < 100:
        raise ValueError(f"trials * design_pfa = {trials * detector.design_pfa:g} < 100: too few expected false alarms")
    rows = []
    for i, model in enumerate(models):
        shape = _resolve_shape(detector, model, seed)
        rule = make_rule(detector, geometry, shape=shape)
        nominal = rule.threshold.achieved_pfa if isinstance(rule, WilcoxonRule) else detector.design_pfa
        fires = _count_fires(rule, model, geometry, 0.0, trials, (seed, i), workers)
        lo, hi = wilson_interval(fires, trials, confidence)
        rows.append(RegulationRow(str(model), fires, trials, nominal, lo, hi))
    return rows


def write_regulation_csv(rows: Sequence[RegulationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["family", "measured_pfa", "ci_lo", "ci_hi"])
        for r in rows:
            w.writerow([r.family, repr(r.measured_pfa), repr(r.ci_lo), repr(r.ci_hi)])


def build_scene(
    width: int,
    height: int,
    clutter: ClutterModel,
    ships: Sequence[tuple[Ellipse, float]],
    seed: int = 0,
) -> tuple[np.ndarray, GroundTruth]:
    """Clutter raster with Swerling II ships injected inside their ellipses.

    Samples are rounded to float32 precision so that a raw f32 round trip is lossless.
    """
    if clutter.family == "gaussian":
        raise ValueError("scenes hold amplitudes; use a nonnegative clutter family")
    truth = GroundTruth(width, height, tuple(e for e, _ in ships))
    masks = ellipse_mask(truth)
    union = np.zeros((height, width), dtype=bool)
    for i, mk in enumerate(masks):
        if np.any(union & mk):
            raise ValueError(f"ship {i} overlaps an earlier ship")
        union |= mk
    raster = clutter.sample((height, width), rng=rng_for(seed, 0))
    power0 = clutter.mean_power()
    target_rng = rng_for(seed, 1)
    for (_, scr), mk in zip(ships, masks):
        raster[mk] = simulate_pixel(raster[mk], power0 * 10 ** (scr / 10), target_rng)
    return raster.astype(np.float32).astype(np.float64), truth
