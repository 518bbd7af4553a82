"""Command-line interface.

Every command that writes files also writes ``run.json``, a manifest with
the full argument list; ``rankcfar rerun run.json --out DIR`` replays it.
Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .clutter import FAMILIES, HISTOGRAM_FAMILIES, ClutterModel, histogram_report
from .detectors import KINDS, DetectorConfig, gamma_shape_for, make_rule
from .metrics import Ellipse, GroundTruth, ellipse_mask, evaluate, read_truth, roc_sweep, write_eval_csv, write_truth
from .rank_core import build_distribution, tail_probability, threshold_for_pfa
from .rasters import read_pgm, read_raster, write_pgm, write_raw_f32
from .sim import TrialSpec, build_scene, run_pd_curve, run_pfa_regulation, write_regulation_csv
from .window import CLEAR, DETECTED, NOT_EVALUATED, DetectionMap, WindowGeometry, run_detector

log = logging.getLogger("rankcfar")

DEFAULT_CLUTTER = {
    "gaussian": {"mu": 0.0, "sigma": 1.0},
    "weibull": {"c": 1.2, "b": 1.0},
    "gamma": {"k": 3.33, "theta": 1.0},
    "rayleigh": {"sigma": 1.0},
    "k": {"nu": 3.0, "b": 2.0},
}

DETECTOR_ALIASES = {"gaussian": "two_parameter", "cfar2p": "two_parameter"}
MASK_LEVEL = {DETECTED: 255, NOT_EVALUATED: 128, CLEAR: 0}
_PATH_ARGS = ("image", "truth", "mask", "mask_truth")
_VOLATILE = ("out", "workers", "help", "verbose")


class UsageError(ValueError):
    pass


def parse_clutter(spec: str) -> ClutterModel:
    """``family[:name=value[:name=value]]``, unspecified parameters take the defaults."""
    family, *pairs = spec.strip().split(":")
    if family not in DEFAULT_CLUTTER:
        raise UsageError(f"unknown clutter family {family!r}; choose from {FAMILIES}")
    params = dict(DEFAULT_CLUTTER[family])
    for pair in pairs:
        name, sep, value = pair.partition("=")
        if not sep or name not in params:
            raise UsageError(f"bad clutter parameter {pair!r} for {family}; names are {sorted(params)}")
        params[name] = float(value)
    try:
        return ClutterModel.from_params(family, **params)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


@dataclass(frozen=True)
class RunConfig:
    detector: DetectorConfig
    geometry: WindowGeometry
    workers: int

    @classmethod
    def from_args(cls, args, design_pfa: float | None = None) -> "RunConfig":
        try:
            geometry = WindowGeometry(args.t, args.g, args.q, getattr(args, "stride", 1))
            detector = DetectorConfig(
                DETECTOR_ALIASES.get(args.detector, args.detector),
                args.pfa if design_pfa is None else design_pfa,
                truncation_ratio=args.truncation_ratio,
                trim_factor=args.trim_factor,
                shape_mode=args.shape_mode,
                shape=args.shape,
                gamma_domain=args.gamma_domain,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        if detector.parametric and geometry.t != 1:
            raise UsageError(f"{detector.kind} tests one pixel per window: use --t 1")
        return cls(detector, geometry, args.workers or os.cpu_count() or 1)


# -- output helpers ---------------------------------------------------------------


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest_argv(parser_for_cmd: argparse.ArgumentParser, args) -> list[str]:
    argv = []
    for action in parser_for_cmd._actions:
        if not action.option_strings or action.dest in _VOLATILE:
            continue
        value = getattr(args, action.dest, None)
        if value is None:
            continue
        opt = action.option_strings[-1]
        values = value if isinstance(value, list) else [value]
        for v in values:
            if action.dest in _PATH_ARGS:
                v = str(Path(v).resolve())
            # "--opt=value" keeps values such as "-inf,3" from parsing as options
            argv.append(f"{opt}={repr(v) if isinstance(v, float) else v}")
    return argv


def _write_manifest(out: Path, args, extra: dict | None = None) -> None:
    manifest = {
        "tool": "rankcfar",
        "version": __version__,
        "command": args.command_path,
        "argv": _manifest_argv(args.command_parser, args),
    }
    if extra:
        manifest["derived"] = extra
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_mask(dmap: DetectionMap, path) -> None:
    levels = np.zeros(dmap.state.shape, dtype=np.uint8)
    for state, level in MASK_LEVEL.items():
        levels[dmap.state == state] = level
    write_pgm(path, levels, maxval=255)


def read_mask(path) -> DetectionMap:
    img = read_pgm(path)
    state = np.full(img.shape, CLEAR, dtype=np.uint8)
    state[img == 255] = DETECTED
    state[img == 128] = NOT_EVALUATED
    unknown = ~np.isin(img, (0, 128, 255))
    if unknown.any():
        raise ValueError(f"{path}: mask values must be 0, 128 or 255")
    return DetectionMap(state)


def write_detections(dmap: DetectionMap, path) -> None:
    rows, cols = np.nonzero(dmap.detected)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"])
        w.writerows(zip(cols.tolist(), rows.tolist()))


def _echo_geometry(geometry: WindowGeometry) -> dict:
    info = {"t": geometry.t, "g": geometry.g, "q": geometry.q, "stride": geometry.s,
            "side": geometry.side, "m": geometry.m, "n": geometry.n}
    log.info("window side l=%d, m=%d, n=%d (t=%d, g=%d, q=%d, stride=%d)",
             geometry.side, geometry.m, geometry.n, geometry.t, geometry.g, geometry.q, geometry.s)
    return info


def _rule_factory(cfg: RunConfig, raster, truth: GroundTruth | None = None):
    shape = None
    if cfg.detector.kind == "truncated_gamma":
        # ship pixels would swamp the image-wide shape estimate
        samples = raster
        if truth is not None and truth.ships:
            samples = raster[~np.logical_or.reduce(ellipse_mask(truth))]
        shape = gamma_shape_for(cfg.detector, samples)

    def factory(pfa):
        return make_rule(cfg.detector.with_pfa(pfa), cfg.geometry, shape=shape)

    return factory, shape


def _load_truth(path, raster) -> GroundTruth:
    return read_truth(path, raster.shape[1], raster.shape[0])


# -- commands -----------------------------------------------------------------------


def cmd_threshold(args) -> int:
    if args.m < 0 or args.n < 0 or args.m + args.n < 1:
        raise UsageError("need --m >= 0, --n >= 0 and m + n >= 1")
    if not 0 < args.pfa <= 1:
        raise UsageError("--pfa must be in (0, 1]")
    dist = build_distribution(args.m, args.n)
    thr = threshold_for_pfa(dist, args.pfa)
    # contract check: tail(t_w) <= P_FA < tail(t_w - 1) above the support minimum
    assert thr.achieved_pfa <= args.pfa
    if thr.t_w > dist.offset:
        assert tail_probability(dist, thr.t_w - 1) > args.pfa
    print("t_w,t_mw,achieved_pfa")
    print(f"{thr.t_w},{thr.t_mw},{thr.achieved_pfa!r}")
    return 0


def cmd_detect(args) -> int:
    cfg = RunConfig.from_args(args)
    raster = read_raster(args.image)
    out = _outdir(args)
    info = _echo_geometry(cfg.geometry)
    truth = _load_truth(args.truth, raster) if args.truth else None
    factory, shape = _rule_factory(cfg, raster, truth)
    rule = factory(cfg.detector.design_pfa)
    dmap = run_detector(raster, cfg.geometry, rule, workers=cfg.workers)
    write_mask(dmap, out / "mask.pgm")
    write_detections(dmap, out / "detections.csv")
    if truth is not None:
        res = evaluate(dmap, truth)
        res.design_pfa = cfg.detector.design_pfa
        write_eval_csv([res], out / "eval.csv")
        log.info("measured P_fa=%g, aggregate P_d=%g", res.p_fa, res.p_d)
    if shape is not None:
        info["gamma_shape"] = shape
    if hasattr(rule, "threshold"):
        info.update(t_w=rule.threshold.t_w, t_mw=rule.threshold.t_mw, achieved_pfa=rule.threshold.achieved_pfa)
    info["detected_pixels"] = int(np.count_nonzero(dmap.detected))
    info["degenerate_windows"] = dmap.degenerate_windows
    _write_manifest(out, args, info)
    return 0


def cmd_fit(args) -> int:
    raster = read_raster(args.image)
    out = _outdir(args)
    families = [f for f in args.families.split(",") if f]
    unknown = set(families) - set(HISTOGRAM_FAMILIES)
    if unknown:
        raise UsageError(f"unknown families {sorted(unknown)}; choose from {HISTOGRAM_FAMILIES}")
    keep = np.ones(raster.shape, dtype=bool)
    if args.mask_truth:
        for mk in ellipse_mask(_load_truth(args.mask_truth, raster)):
            keep &= ~mk
    report = histogram_report(raster[keep], bins=args.bins, families=families)
    report.write_body_csv(out / "histogram_body.csv")
    report.write_tail_csv(out / "histogram_tail.csv")
    report.write_params_csv(out / "fit_params.csv")
    for name, err in report.errors.items():
        log.warning("%s fit failed: %s", name, err)
    _write_manifest(out, args, {"samples": report.sample_count})
    return 0


def cmd_simulate_pd(args) -> int:
    cfg = RunConfig.from_args(args)
    out = _outdir(args)
    spec = TrialSpec(parse_clutter(args.clutter), cfg.detector, cfg.geometry,
                     tuple(_float_list(args.scr)), args.trials, args.seed)
    curve = run_pd_curve(spec, workers=cfg.workers)
    curve.write_csv(out / "pd.csv")
    _write_manifest(out, args, {**_echo_geometry(cfg.geometry), **curve.meta})
    return 0


def cmd_simulate_pfa(args) -> int:
    cfg = RunConfig.from_args(args)
    out = _outdir(args)
    models = [parse_clutter(s) for s in args.families.split(",") if s]
    try:
        rows = run_pfa_regulation(models, cfg.detector, cfg.geometry, args.trials, seed=args.seed,
                                  confidence=args.confidence, workers=cfg.workers)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_regulation_csv(rows, out / "regulation.csv")
    for r in rows:
        print(f"{r.family:32s} measured={r.measured_pfa:.4g} CI=[{r.ci_lo:.4g}, {r.ci_hi:.4g}] "
              f"nominal={r.nominal_pfa:.4g} {'inside' if r.inside else 'OUTSIDE'}")
    _write_manifest(out, args, {**_echo_geometry(cfg.geometry),
                                "nominal_pfa": rows[0].nominal_pfa if rows else None})
    return 0


def _parse_ship(text: str) -> tuple[Ellipse, float]:
    vals = _float_list(text)
    if len(vals) != 6:
        raise UsageError(f"--ship takes cx,cy,a,b,theta_deg,scr_db; got {text!r}")
    try:
        return Ellipse(*vals[:5]), vals[5]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_simulate_scene(args) -> int:
    ships = [_parse_ship(s) for s in (args.ship or [])]
    out = _outdir(args)
    raster, truth = build_scene(args.width, args.height, parse_clutter(args.clutter), ships, seed=args.seed)
    write_raw_f32(out / "scene.raw", raster)
    write_truth(truth, out / "truth.txt")
    _write_manifest(out, args, {"ship_pixels": truth.ship_pixels})
    return 0


def cmd_evaluate(args) -> int:
    dmap = read_mask(args.mask)
    truth = read_truth(args.truth, dmap.width, dmap.height)
    out = _outdir(args)
    res = evaluate(dmap, truth)
    res.design_pfa = args.design_pfa
    write_eval_csv([res], out / "eval.csv")
    _write_manifest(out, args)
    return 0


def cmd_roc(args) -> int:
    pfas = _float_list(args.pfa_list)
    if not pfas:
        raise UsageError("--pfa-list needs at least one value")
    cfg = RunConfig.from_args(args, design_pfa=min(pfas))
    raster = read_raster(args.image)
    truth = _load_truth(args.truth, raster)
    out = _outdir(args)
    info = _echo_geometry(cfg.geometry)
    factory, shape = _rule_factory(cfg, raster, truth)
    results = roc_sweep(raster, cfg.geometry, factory, truth, pfas, workers=cfg.workers)
    write_eval_csv(results, out / "roc.csv")
    if shape is not None:
        info["gamma_shape"] = shape
    _write_manifest(out, args, info)
    return 0


def cmd_rerun(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    argv = [*manifest["command"], *manifest["argv"], "--out", args.out]
    if args.workers:
        argv += ["--workers", str(args.workers)]
    return main(argv)


# -- parser -------------------------------------------------------------------------


def _add_detector(p, need_pfa=True):
    p.add_argument("--detector", required=True, choices=(*KINDS, *DETECTOR_ALIASES))
    if need_pfa:
        p.add_argument("--pfa", type=float, required=True, help="design false-alarm rate")
    p.add_argument("--t", type=int, required=True, help="test-window side")
    p.add_argument("--g", type=int, required=True, help="guard width")
    p.add_argument("--q", type=int, required=True, help="reference ring depth")
    p.add_argument("--truncation-ratio", type=float, default=0.10)
    p.add_argument("--trim-factor", type=float, default=2.0)
    p.add_argument("--shape-mode", choices=("ml", "enl"), default="enl")
    p.add_argument("--shape", type=float, default=None, help="fixed Gamma shape for truncated_gamma")
    p.add_argument("--gamma-domain", choices=("intensity", "amplitude"), default="intensity")


def _add_common(p, out_default="out"):
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--workers", type=int, default=None, help="engine threads (default: all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankcfar", description="Rank-sum nonparametric CFAR toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def register(subparsers, name, func, path, **kw):
        p = subparsers.add_parser(name, **kw)
        p.set_defaults(func=func, command_path=path, command_parser=p)
        return p

    p = register(sub, "threshold", cmd_threshold, ["threshold"], help="exact rank-sum threshold for (m, n, P_FA)")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--pfa", type=float, required=True)

    p = register(sub, "detect", cmd_detect, ["detect"], help="run a detector over an image")
    p.add_argument("--image", required=True)
    _add_detector(p)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--truth", default=None)
    _add_common(p)

    p = register(sub, "fit", cmd_fit, ["fit"], help="histogram and distribution fits of image clutter")
    p.add_argument("--image", required=True)
    p.add_argument("--mask-truth", default=None, help="ground truth whose ships are excluded")
    p.add_argument("--families", default=",".join(HISTOGRAM_FAMILIES))
    p.add_argument("--bins", type=int, default=512)
    _add_common(p)

    sim = sub.add_parser("simulate", help="Monte Carlo experiments and synthetic scenes")
    simsub = sim.add_subparsers(dest="mode", required=True)

    p = register(simsub, "pd", cmd_simulate_pd, ["simulate", "pd"], help="detection probability versus SCR")
    p.add_argument("--clutter", default="weibull:c=2")
    _add_detector(p)
    p.add_argument("--scr", required=True, help="comma-separated SCR grid in dB ('-inf' for no target)")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)

    p = register(simsub, "pfa", cmd_simulate_pfa, ["simulate", "pfa"], help="false-alarm regulation across clutter families")
    p.add_argument("--families", default=",".join(FAMILIES))
    _add_detector(p)
    p.add_argument("--trials", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--confidence", type=float, default=0.99)
    _add_common(p)

    p = register(simsub, "scene", cmd_simulate_scene, ["simulate", "scene"], help="synthetic clutter scene with ships")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--clutter", default="weibull:c=1.2")
    p.add_argument("--ship", action="append", help="cx,cy,a,b,theta_deg,scr_db (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)

    p = register(sub, "evaluate", cmd_evaluate, ["evaluate"], help="score a detection mask against ground truth")
    p.add_argument("--mask", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--design-pfa", type=float, default=None)
    _add_common(p)

    p = register(sub, "roc", cmd_roc, ["roc"], help="P_d versus measured P_fa over a design grid")
    p.add_argument("--image", required=True)
    p.add_argument("--truth", required=True)
    _add_detector(p, need_pfa=False)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--pfa-list", required=True)
    _add_common(p)

    p = sub.add_parser("rerun", help="replay a run.json manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(logging.INFO)
    if not hasattr(args, "pfa") and args.func in (cmd_roc,):
        args.pfa = None
    try:
        return args.func(args)
    except UsageError as exc:
        parser.exit(2, f"rankcfar: error: {exc}\n")
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"rankcfar: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
