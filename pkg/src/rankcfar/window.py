"""Sliding-window geometry, sample extraction and detection-map assembly.

The window is an ``l x l`` square with a ``t x t`` test block at its
centre, a guard band ``g`` pixels wide around it, and a reference ring
``q`` pixels deep on its boundary, so ``l = t + 2g + 2q``. Anchors are the
top-left pixel of the test block, given as ``(row, col)``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol

import numpy as np

log = logging.getLogger(__name__)

CLEAR = 0
DETECTED = 1
NOT_EVALUATED = 2


class WindowOutOfBounds(IndexError):
    pass


class WindowError(RuntimeError):
    """A decision rule failed on a specific window."""

    def __init__(self, anchor, cause):
        self.anchor = anchor
        super().__init__(f"decision rule failed on window at (row={anchor[0]}, col={anchor[1]}): {cause}")


class DegenerateReference(ValueError):
    """Reference samples cannot support the estimator (e.g. zero variance)."""


def derive_geometry(t: int, g: int, q: int) -> tuple[int, int, int]:
    """Window side, test count and reference count for a (t, g, q) window."""
    side = t + 2 * g + 2 * q
    return side, t * t, side * side - (side - 2 * q) ** 2


@dataclass(frozen=True)
class WindowGeometry:
    t: int
    g: int
    q: int
    s: int = 1

    def __post_init__(self):
        if self.t < 1 or self.g < 0 or self.q < 1 or self.s < 1:
            raise ValueError(f"invalid geometry {self}: need t>=1, g>=0, q>=1, s>=1")

    @property
    def side(self) -> int:
        return self.t + 2 * self.g + 2 * self.q

    @property
    def m(self) -> int:
        return self.t * self.t

    @property
    def n(self) -> int:
        return derive_geometry(self.t, self.g, self.q)[2]

    @property
    def margin(self) -> int:
        """Distance from the window edge to the test block."""
        return self.g + self.q

    def offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """(row, col) offsets of test and reference cells from the window origin, row-major."""
        ell, q, lo = self.side, self.q, self.margin
        rr, cc = np.divmod(np.arange(ell * ell), ell)
        ring = (rr < q) | (rr >= ell - q) | (cc < q) | (cc >= ell - q)
        test = (rr >= lo) & (rr < lo + self.t) & (cc >= lo) & (cc < lo + self.t)
        return (
            np.stack([rr[test], cc[test]], axis=1),
            np.stack([rr[ring], cc[ring]], axis=1),
        )

    def anchor_rows(self, height: int) -> range:
        return range(self.margin, height - self.margin - self.t + 1, self.s)

    def anchor_cols(self, width: int) -> range:
        return range(self.margin, width - self.margin - self.t + 1, self.s)


def as_raster(data) -> np.ndarray:
    """Validate a 2-D grid of finite amplitudes and return it as float64."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"raster must be a nonempty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("raster contains non-finite samples")
    return arr


def extract(raster, geometry: WindowGeometry, anchor) -> tuple[np.ndarray, np.ndarray]:
    """Test block and reference ring samples for the window anchored at ``anchor``."""
    img = np.asarray(raster)
    r, c = anchor
    r0, c0 = r - geometry.margin, c - geometry.margin
    ell = geometry.side
    if r0 < 0 or c0 < 0 or r0 + ell > img.shape[0] or c0 + ell > img.shape[1]:
        raise WindowOutOfBounds(
            f"window of side {ell} at anchor {anchor} overruns raster of shape {img.shape}"
        )
    toff, roff = geometry.offsets()
    return img[r0 + toff[:, 0], c0 + toff[:, 1]], img[r0 + roff[:, 0], c0 + roff[:, 1]]


class DecisionRule(Protocol):
    """Batch decision interface used by the engine.

    ``decide`` takes test samples of shape (B, m) and reference samples of
    shape (B, n) and returns ``(fire, degenerate)`` boolean arrays of
    length B. Degenerate windows never fire. ``pvalue`` returns the
    smallest design false-alarm rate at which each window fires;
    ``inclusive`` tells whether the window fires at ``pvalue == design``.
    """

    inclusive: bool

    def decide(self, test: np.ndarray, reference: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...

    def pvalue(self, test: np.ndarray, reference: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class DetectionMap:
    """Per-pixel state: CLEAR, DETECTED or NOT_EVALUATED."""

    state: np.ndarray
    degenerate_windows: int = 0

    @property
    def height(self) -> int:
        return self.state.shape[0]

    @property
    def width(self) -> int:
        return self.state.shape[1]

    @property
    def detected(self) -> np.ndarray:
        return self.state == DETECTED

    @property
    def evaluated(self) -> np.ndarray:
        return self.state != NOT_EVALUATED

    def __eq__(self, other) -> bool:
        return isinstance(other, DetectionMap) and np.array_equal(self.state, other.state)

    @classmethod
    def from_scores(cls, scores: np.ndarray, design_pfa: float, inclusive: bool) -> "DetectionMap":
        """Detection map at ``design_pfa`` from a per-pixel p-value map (NaN = not evaluated)."""
        state = np.full(scores.shape, NOT_EVALUATED, dtype=np.uint8)
        ev = ~np.isnan(scores)
        state[ev] = CLEAR
        fire = scores <= design_pfa if inclusive else scores < design_pfa
        state[ev & fire] = DETECTED
        return cls(state)


class _Gatherer:
    def __init__(self, raster: np.ndarray, geometry: WindowGeometry):
        self.flat = raster.ravel()
        self.width = raster.shape[1]
        toff, roff = geometry.offsets()
        m0 = geometry.margin
        # offsets relative to the anchor, flattened
        self.tidx = (toff[:, 0] - m0) * self.width + (toff[:, 1] - m0)
        self.ridx = (roff[:, 0] - m0) * self.width + (roff[:, 1] - m0)

    def row(self, r: int, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        base = r * self.width + cols
        return self.flat[base[:, None] + self.tidx], self.flat[base[:, None] + self.ridx]


def _check_fits(raster: np.ndarray, geometry: WindowGeometry):
    h, w = raster.shape
    if h < geometry.side or w < geometry.side:
        raise ValueError(f"raster {w}x{h} is smaller than the {geometry.side}-pixel window")


def _locate_failure(fn, test, ref, r, cols, exc):
    for i, c in enumerate(cols):
        try:
            fn(test[i : i + 1], ref[i : i + 1])
        except Exception as inner:  # noqa: BLE001 - re-raised with coordinates
            raise WindowError((r, int(c)), inner) from inner
    raise WindowError((r, int(cols[0])), exc) from exc


def _map_rows(raster, geometry, fn, workers):
    gather = _Gatherer(raster, geometry)
    rows = list(geometry.anchor_rows(raster.shape[0]))
    cols = np.asarray(geometry.anchor_cols(raster.shape[1]), dtype=np.int64)

    def work(r):
        test, ref = gather.row(r, cols)
        try:
            return fn(test, ref)
        except Exception as exc:  # noqa: BLE001
            _locate_failure(fn, test, ref, r, cols, exc)

    if workers is None or workers <= 1:
        results = [work(r) for r in rows]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, rows))
    return rows, cols, results


def run_detector(raster, geometry: WindowGeometry, rule: DecisionRule, workers: int | None = 1) -> DetectionMap:
    """Slide the window over ``raster`` and assemble a detection map.

    A pixel is DETECTED if any window whose test block covers it fires,
    CLEAR if it is covered only by windows that do not fire, and
    NOT_EVALUATED if no valid window covers it.
    """
    img = as_raster(raster)
    _check_fits(img, geometry)
    rows, cols, results = _map_rows(img, geometry, rule.decide, workers)
    covered = np.zeros(img.shape, dtype=bool)
    detected = np.zeros(img.shape, dtype=bool)
    t = geometry.t
    degenerate = 0
    for r, (fire, degen) in zip(rows, results):
        degenerate += int(np.count_nonzero(degen))
        for dr in range(t):
            for dc in range(t):
                covered[r + dr, cols + dc] = True
                detected[r + dr, cols[fire] + dc] = True
    if degenerate:
        log.warning("%d degenerate window(s) marked clear", degenerate)
    state = np.full(img.shape, NOT_EVALUATED, dtype=np.uint8)
    state[covered] = CLEAR
    state[detected] = DETECTED
    return DetectionMap(state, degenerate_windows=degenerate)


def score_map(raster, geometry: WindowGeometry, rule: DecisionRule, workers: int | None = 1) -> np.ndarray:
    """Per-pixel smallest design P_FA at which the pixel is detected.

    NaN marks pixels no window covers; ``inf`` marks pixels covered only by
    degenerate windows. ``DetectionMap.from_scores(scores, p, rule.inclusive)``
    reproduces ``run_detector`` at design rate ``p``.
    """
    img = as_raster(raster)
    _check_fits(img, geometry)
    rows, cols, results = _map_rows(img, geometry, rule.pvalue, workers)
    scores = np.full(img.shape, np.nan)
    t = geometry.t
    for r, (p, degen) in zip(rows, results):
        p = np.where(degen, np.inf, p)
        for dr in range(t):
            for dc in range(t):
                cur = scores[r + dr, cols + dc]
                scores[r + dr, cols + dc] = np.fmin(cur, p)
    return scores
