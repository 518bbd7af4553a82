"""False-alarm rate, per-ship detection probability and ROC sweeps.

Ships are ellipses with full axes ``a >= b`` and an orientation in degrees
measured from the +x (column) axis toward +y (row). Pixel ``(row, col)``
has its centre at ``(x=col, y=row)``. A ship's pixel count ``N_s`` is the
rounded analytic area ``pi a b / 4``; the rasterized mask only decides
which pixels belong to the ship.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .window import DetectionMap, NOT_EVALUATED, WindowGeometry, run_detector

EVAL_HEADER = ("design_pfa", "measured_pfa", "n_fa", "n_c", "ship_id", "n_d", "n_s", "p_d")


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta_deg: float = 0.0

    def __post_init__(self):
        if not (self.b > 0 and self.a >= self.b):
            raise ValueError(f"ellipse axes need a >= b > 0, got a={self.a}, b={self.b}")
        if round(math.pi * self.a * self.b / 4) < 1:
            raise ValueError(f"ellipse a={self.a}, b={self.b} covers less than one pixel")

    @property
    def n_s(self) -> int:
        return round(math.pi * self.a * self.b / 4)

    def half_extent(self) -> tuple[float, float]:
        """Half-widths of the axis-aligned bounding box in x and y."""
        th = math.radians(self.theta_deg)
        ra, rb = self.a / 2, self.b / 2
        return (
            math.hypot(ra * math.cos(th), rb * math.sin(th)),
            math.hypot(ra * math.sin(th), rb * math.cos(th)),
        )

    def contains(self, x, y) -> np.ndarray:
        th = math.radians(self.theta_deg)
        dx = np.asarray(x, dtype=np.float64) - self.cx
        dy = np.asarray(y, dtype=np.float64) - self.cy
        u = dx * math.cos(th) + dy * math.sin(th)
        v = -dx * math.sin(th) + dy * math.cos(th)
        return (u / (self.a / 2)) ** 2 + (v / (self.b / 2)) ** 2 < 1.0


@dataclass(frozen=True)
class GroundTruth:
    width: int
    height: int
    ships: tuple[Ellipse, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ships", tuple(self.ships))

    @property
    def ship_pixels(self) -> int:
        return sum(s.n_s for s in self.ships)


class EllipseOutOfBounds(ValueError):
    pass


def ellipse_mask(truth: GroundTruth) -> list[np.ndarray]:
    """Boolean mask per ship of pixel centres strictly inside its ellipse."""
    masks = []
    for i, ship in enumerate(truth.ships):
        hx, hy = ship.half_extent()
        if ship.cx - hx < -0.5 or ship.cy - hy < -0.5 or ship.cx + hx > truth.width - 0.5 or ship.cy + hy > truth.height - 0.5:
            raise EllipseOutOfBounds(f"ship {i} ({ship}) extends outside the {truth.width}x{truth.height} image")
        mask = np.zeros((truth.height, truth.width), dtype=bool)
        r0, r1 = max(0, math.floor(ship.cy - hy)), min(truth.height, math.ceil(ship.cy + hy) + 1)
        c0, c1 = max(0, math.floor(ship.cx - hx)), min(truth.width, math.ceil(ship.cx + hx) + 1)
        yy, xx = np.mgrid[r0:r1, c0:c1]
        mask[r0:r1, c0:c1] = ship.contains(xx, yy)
        masks.append(mask)
    return masks


@dataclass
class ShipResult:
    ship_id: int
    n_d: int
    n_s: int

    @property
    def p_d(self) -> float:
        return min(1.0, self.n_d / self.n_s)


@dataclass
class EvalResult:
    n_fa: int
    n_c: int
    ships: list[ShipResult] = field(default_factory=list)
    design_pfa: float | None = None

    @property
    def p_fa(self) -> float:
        # masks smaller than their analytic areas can push N_fa past N_c
        return min(1.0, self.n_fa / self.n_c) if self.n_c > 0 else 0.0

    @property
    def p_d(self) -> float:
        """Aggregate detection probability over all ships."""
        total = sum(s.n_s for s in self.ships)
        if not total:
            return 0.0
        return min(1.0, sum(min(s.n_d, s.n_s) for s in self.ships) / total)

    def rows(self) -> list[tuple]:
        dp = "" if self.design_pfa is None else _fmt(self.design_pfa)
        head = (dp, _fmt(self.p_fa), self.n_fa, self.n_c)
        if not self.ships:
            return [(*head, "", "", "", "")]
        return [(*head, s.ship_id, s.n_d, s.n_s, _fmt(s.p_d)) for s in self.ships]


def _fmt(v: float) -> str:
    return repr(float(v))


def evaluate(dmap: DetectionMap, truth: GroundTruth, masks: Sequence[np.ndarray] | None = None) -> EvalResult:
    """Measured false-alarm rate and per-ship detection counts.

    Pixels without a decision are excluded from both the false-alarm count
    and the background pixel count ``N_c``.
    """
    if (dmap.height, dmap.width) != (truth.height, truth.width):
        raise ValueError(
            f"detection map is {dmap.width}x{dmap.height} but truth is {truth.width}x{truth.height}"
        )
    if masks is None:
        masks = ellipse_mask(truth)
    ships_any = np.zeros(dmap.state.shape, dtype=bool)
    for mk in masks:
        ships_any |= mk
    detected = dmap.detected
    outside = ~ships_any
    n_fa = int(np.count_nonzero(detected & outside))
    unevaluated_bg = int(np.count_nonzero((dmap.state == NOT_EVALUATED) & outside))
    n_c = truth.width * truth.height - truth.ship_pixels - unevaluated_bg
    ships = [
        ShipResult(i, int(np.count_nonzero(detected & mk)), ship.n_s)
        for i, (ship, mk) in enumerate(zip(truth.ships, masks))
    ]
    return EvalResult(n_fa=n_fa, n_c=n_c, ships=ships)


def write_eval_csv(results: Sequence[EvalResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        for res in results:
            w.writerows(res.rows())


def roc_sweep(raster, geometry: WindowGeometry, rule_factory, truth: GroundTruth, design_pfas: Sequence[float], workers: int | None = 1) -> list[EvalResult]:
    """Detect and evaluate at each design P_FA; rows sorted by design P_FA.

    ``rule_factory(design_pfa)`` returns the decision rule for that point.
    """
    if not len(design_pfas):
        raise ValueError("need at least one design P_FA")
    masks = ellipse_mask(truth)
    out = []
    for pfa in sorted(design_pfas):
        dmap = run_detector(raster, geometry, rule_factory(pfa), workers=workers)
        res = evaluate(dmap, truth, masks)
        res.design_pfa = pfa
        out.append(res)
    return out


def match_design_pfa(scores: np.ndarray, truth: GroundTruth, target_pfa: float, inclusive: bool, masks=None) -> tuple[float, EvalResult]:
    """Design P_FA whose measured false-alarm rate is closest to ``target_pfa`` (in log ratio).

    ``scores`` is a per-pixel p-value map from ``window.score_map``. The
    returned design value sits midway (geometrically) between adjacent
    attainable operating points so that it is robust to rounding.
    """
    if masks is None:
        masks = ellipse_mask(truth)
    ships_any = np.zeros(scores.shape, dtype=bool)
    for mk in masks:
        ships_any |= mk
    bg = scores[~ships_any & ~np.isnan(scores)]
    n_c = truth.width * truth.height - truth.ship_pixels - int(np.count_nonzero(np.isnan(scores) & ~ships_any))
    levels = np.unique(bg[np.isfinite(bg) & (bg > 0) & (bg < 1)])
    if levels.size == 0:
        raise ValueError("no attainable operating point")
    srt = np.sort(bg)
    # design between levels[i] and levels[i+1] detects exactly the pixels with score <= levels[i]
    n_fa = np.searchsorted(srt, levels, side="right")
    measured = n_fa / n_c
    best = int(np.argmin(np.abs(np.log(np.maximum(measured, 1e-300) / target_pfa))))
    upper = levels[best + 1] if best + 1 < levels.size else min(1.0, levels[best] * 2)
    design = math.sqrt(levels[best] * upper)
    if not inclusive and design <= levels[best]:
        design = np.nextafter(levels[best], np.inf)
    dmap = DetectionMap.from_scores(scores, design, inclusive)
    res = evaluate(dmap, truth, masks)
    res.design_pfa = design
    return design, res


# -- ground-truth file ------------------------------------------------------------


def read_truth(path, width: int, height: int) -> GroundTruth:
    """Parse ``ellipse <cx> <cy> <a> <b> <theta_deg>`` lines; ``#`` starts a comment line."""
    ships = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] != "ellipse" or len(parts) != 6:
            raise ValueError(f"{path}:{lineno}: expected 'ellipse cx cy a b theta_deg', got {line!r}")
        try:
            ships.append(Ellipse(*(float(p) for p in parts[1:])))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return GroundTruth(width, height, tuple(ships))


def write_truth(truth: GroundTruth, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# image {truth.width}x{truth.height}, {len(truth.ships)} ship(s)\n")
        for s in truth.ships:
            fh.write(f"ellipse {s.cx!r} {s.cy!r} {s.a!r} {s.b!r} {s.theta_deg!r}\n")
