"""Nonparametric rank-sum CFAR detection for SAR amplitude imagery."""

__version__ = "0.1.0"

from .clutter import ClutterModel, FitError, ConvergenceError, fit, histogram_report, rng_for
from .detectors import DetectorConfig, KINDS, make_rule
from .metrics import Ellipse, EvalResult, GroundTruth, evaluate, match_design_pfa, roc_sweep
from .rank_core import (
    ExactRankDistribution,
    RankThreshold,
    SupportTooLarge,
    build_distribution,
    mann_whitney_statistic,
    tail_probability,
    threshold_for_pfa,
    wilcoxon_statistic,
)
from .sim import TrialSpec, build_scene, run_pd_curve, run_pfa_regulation
from .window import DetectionMap, WindowGeometry, derive_geometry, run_detector, score_map

__all__ = [
    "ClutterModel", "ConvergenceError", "DetectionMap", "DetectorConfig", "Ellipse", "EvalResult",
    "ExactRankDistribution", "FitError", "GroundTruth", "KINDS", "RankThreshold", "SupportTooLarge",
    "TrialSpec", "WindowGeometry", "build_distribution", "build_scene", "derive_geometry", "evaluate",
    "fit", "histogram_report", "make_rule", "mann_whitney_statistic", "match_design_pfa", "rng_for",
    "roc_sweep", "run_detector", "run_pd_curve", "run_pfa_regulation", "score_map", "tail_probability",
    "threshold_for_pfa", "wilcoxon_statistic",
]
