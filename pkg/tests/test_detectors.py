import math

import numpy as np
import pytest

from rankcfar.clutter import ClutterModel, ConvergenceError, fit, rng_for
from rankcfar.detectors import (
    DetectorConfig,
    TrimmedRayleighRule,
    TruncatedGammaRule,
    TwoParameterRule,
    WeibullRule,
    decide_trimmed_rayleigh,
    decide_truncated_gamma,
    decide_two_parameter,
    decide_weibull,
    decide_wilcoxon,
    gamma_shape_for,
    make_rule,
    truncated_gamma_scale,
    truncated_rayleigh_sigma2,
)
from rankcfar.rank_core import build_distribution, threshold_for_pfa
from rankcfar.window import DegenerateReference, WindowGeometry


def test_config_validation():
    for kwargs in (
        dict(kind="cfar", design_pfa=0.1),
        dict(kind="wilcoxon", design_pfa=0.0),
        dict(kind="wilcoxon", design_pfa=1.0),
        dict(kind="truncated_gamma", design_pfa=0.1, truncation_ratio=1.0),
        dict(kind="trimmed_rayleigh", design_pfa=0.1, trim_factor=0.0),
        dict(kind="truncated_gamma", design_pfa=0.1, shape_mode="mom"),
    ):
        with pytest.raises(ValueError):
            DetectorConfig(**kwargs)
    cfg = DetectorConfig("weibull", 1e-3)
    assert cfg.parametric and cfg.with_pfa(0.1).design_pfa == 0.1


def test_parametric_rules_need_single_test_pixel():
    with pytest.raises(ValueError):
        make_rule(DetectorConfig("weibull", 1e-3), WindowGeometry(2, 1, 1))


class TestWilcoxon:
    d = build_distribution(2, 2)
    thr = threshold_for_pfa(d, 0.2)

    def test_enumerated_threshold(self):
        assert self.thr.t_w == 7
        assert decide_wilcoxon([10, 20], [1, 2], self.d, self.thr)
        assert not decide_wilcoxon([10, 1.5], [1, 2], self.d, self.thr)

    def test_extremes(self):
        d = build_distribution(3, 8)
        thr = threshold_for_pfa(d, 0.05)
        assert decide_wilcoxon([9, 9.5, 10], range(8), d, thr)
        assert not decide_wilcoxon([-3, -2, -1], range(8), d, thr)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            decide_wilcoxon([1, 2, 3], [1, 2], self.d, self.thr)

    def test_monotone_invariance(self):
        rng = np.random.default_rng(4)
        g = WindowGeometry(2, 1, 2)
        rule = make_rule(DetectorConfig("wilcoxon", 0.05), g)
        test, ref = rng.weibull(1.2, (500, 4)), rng.weibull(1.2, (500, g.n))
        base, _ = rule.decide(test, ref)
        for f in (np.log, np.sqrt, lambda x: 3 * x**3 + 1, np.arctan):
            assert np.array_equal(rule.decide(f(test), f(ref))[0], base)


class TestTwoParameter:
    def test_median_at_half(self):
        ref = [1.0, 2.0, 3.0, 6.0]
        assert decide_two_parameter(3.01, ref, 0.5)
        assert not decide_two_parameter(3.0, ref, 0.5)

    def test_z_against_oracle(self):
        mpmath = pytest.importorskip("mpmath")
        mpmath.mp.dps = 40
        z = float(mpmath.sqrt(2) * mpmath.erfinv(1 - 2 * mpmath.mpf("1e-7")))
        assert TwoParameterRule(1e-7).z == pytest.approx(z, rel=1e-12)
        assert z == pytest.approx(5.1993, abs=1e-4)

    def test_threshold_arithmetic(self):
        ref = np.array([8.0, 12.0] * 5)  # mean 10, ML std 2
        rule = TwoParameterRule(0.5)
        rule.z = 3.0
        thr, degen = rule.thresholds(ref[None, :])
        assert thr[0] == pytest.approx(16.0) and not degen[0]

    def test_degenerate(self):
        with pytest.raises(DegenerateReference):
            decide_two_parameter(1.0, [2.0] * 10, 1e-3)
        fire, degen = TwoParameterRule(1e-3).decide(np.array([[5.0]]), np.ones((1, 10)))
        assert degen[0] and not fire[0]


class TestWeibull:
    def test_closed_form_thresholds(self):
        assert WeibullRule(math.exp(-3)).log_term == pytest.approx(3.0, rel=1e-15)
        rule = WeibullRule(1e-3)
        assert 1.0 * rule.log_term ** 0.5 == pytest.approx(math.sqrt(math.log(1000)), rel=1e-14)
        assert math.sqrt(math.log(1000)) == pytest.approx(2.6283, abs=1e-4)

    def test_exponential_case(self):
        # exact exponential quantiles make the ML fit land near (1, 1)
        ref = -np.log1p(-(np.arange(1, 4001) - 0.5) / 4000)
        (c, b), _ = WeibullRule(0.1).fit(ref[None, :])
        thr = b[0] * 3 ** (1 / c[0])
        assert thr == pytest.approx(3.0, rel=0.02)

    def test_ml_consistency(self):
        x = ClutterModel.weibull(1.7, 2.3).sample(100_000, seed=8)
        m = fit("weibull", x)
        c, b = m.params
        assert abs(c / 1.7 - 1) < 0.02 and abs(b / 2.3 - 1) < 0.02

    def test_nonpositive(self):
        with pytest.raises(ValueError):
            decide_weibull(1.0, [0.0, 1.0, 2.0], 1e-3)


class TestTruncatedGamma:
    def test_no_truncation_is_sample_mean(self):
        ref = np.linspace(0.5, 3.5, 40)
        theta = ref.mean()
        thr = theta * 5
        assert decide_truncated_gamma(thr * 1.0001, ref, math.exp(-5), 0.0, 1.0)
        assert not decide_truncated_gamma(thr * 0.9999, ref, math.exp(-5), 0.0, 1.0)

    def test_exponential_quantile(self):
        rule = TruncatedGammaRule(1e-3, 1.0, 0.0)
        assert 2 * rule.quantile == pytest.approx(2 * math.log(1000), rel=1e-12)
        assert 2 * math.log(1000) == pytest.approx(13.816, abs=1e-3)

    def test_truncated_scale_recovers_truth(self):
        rng = rng_for(1)
        x = np.sort(rng.gamma(2.0, 1.5, 200_000))
        kept = x[: int(0.9 * x.size)]
        theta = truncated_gamma_scale(kept.mean(), kept.max(), 2.0)
        assert float(theta) == pytest.approx(1.5, rel=0.01)

    def test_contamination_robustness(self):
        x = rng_for(2).gamma(3.33, 1.0, 100_000)
        idx = rng_for(3).choice(x.size, 5_000, replace=False)
        x[idx] *= 50
        robust, _ = TruncatedGammaRule(1e-3, 3.33, 0.10).fit(x[None, :])
        naive, _ = TruncatedGammaRule(1e-3, 3.33, 0.0).fit(x[None, :])
        assert abs(robust[0] - 1) < 0.05
        assert naive[0] > 1.5

    def test_intensity_domain_is_squared(self):
        rng = np.random.default_rng(0)
        ref = rng.rayleigh(1.0, (20, 50))
        test = rng.rayleigh(2.0, (20, 1))
        a = TruncatedGammaRule(1e-2, 1.0, 0.1, domain="intensity").decide(test, ref)[0]
        b = TruncatedGammaRule(1e-2, 1.0, 0.1).decide(test**2, ref**2)[0]
        assert np.array_equal(a, b)

    def test_unbounded_scale_raises_in_scalar_helper(self):
        # kept samples all at the cut: no finite ML scale
        with pytest.raises(ConvergenceError):
            decide_truncated_gamma(1.0, [1.0] * 9 + [5.0], 1e-3, 0.1, 2.0)

    def test_short_reference(self):
        with pytest.raises(ValueError):
            decide_truncated_gamma(1.0, [1.0, 2.0, 3.0], 1e-3, 0.1, 2.0)

    def test_shape_source(self):
        x = ClutterModel.rayleigh(1.0).sample(50_000, seed=4)
        # Rayleigh intensity is exponential: one look
        assert gamma_shape_for(DetectorConfig("truncated_gamma", 1e-3), x) == pytest.approx(1.0, rel=0.03)
        assert gamma_shape_for(DetectorConfig("truncated_gamma", 1e-3, shape=2.5), x) == 2.5
        with pytest.raises(ValueError):
            make_rule(DetectorConfig("truncated_gamma", 1e-3), WindowGeometry(1, 1, 2))


class TestTrimmedRayleigh:
    def test_closed_form(self):
        assert TrimmedRayleighRule(math.exp(-2)).factor == pytest.approx(2.0)
        assert TrimmedRayleighRule(1e-4).factor == pytest.approx(4.2919, abs=1e-4)

    def test_outliers_removed(self):
        x = np.concatenate([rng_for(5).rayleigh(1.0, 500), np.full(10, 100.0)])
        sigma, degen, iters, count = TrimmedRayleighRule(1e-3, 2.0).fit(x[None, :], return_iterations=True)
        assert not degen[0]
        assert iters[0] <= 2
        assert count[0] <= 500
        assert abs(sigma[0] - 1) < 0.05

    def test_truncated_sigma_inverts(self):
        s2 = 1.7
        cut = 2.0
        # mean square of Rayleigh(sigma^2 = s2) truncated at cut
        a = cut**2 / (2 * s2)
        mean_sq = cut**2 * (1 / a - 1 / math.expm1(a))
        assert float(truncated_rayleigh_sigma2(mean_sq, cut)) == pytest.approx(s2, rel=1e-10)

    def test_scalar_helper(self):
        ref = rng_for(6).rayleigh(1.0, 200)
        assert decide_trimmed_rayleigh(50.0, ref, 1e-4)
        assert not decide_trimmed_rayleigh(0.5, ref, 1e-4)


@pytest.mark.parametrize("kind", ["two_parameter", "weibull", "truncated_gamma", "trimmed_rayleigh"])
def test_scale_equivariance(kind):
    rng = np.random.default_rng(12)
    ref = rng.weibull(1.3, (300, 60))
    test = rng.weibull(1.3, (300, 1)) * 2.5
    rule = make_rule(DetectorConfig(kind, 1e-2, shape=1.5 if kind == "truncated_gamma" else None), WindowGeometry(1, 1, 4))
    base, _ = rule.decide(test, ref)
    assert base.any() and not base.all()
    for alpha in (1e-3, 0.37, 8.0, 1e4):
        assert np.array_equal(rule.decide(alpha * test, alpha * ref)[0], base)


@pytest.mark.parametrize("kind", ["two_parameter", "weibull", "truncated_gamma", "trimmed_rayleigh", "wilcoxon"])
def test_pvalue_consistent_with_decide(kind):
    rng = np.random.default_rng(13)
    g = WindowGeometry(1, 1, 4)
    ref = rng.weibull(1.3, (400, g.n))
    test = rng.weibull(1.3, (400, 1)) * 2
    cfg = DetectorConfig(kind, 0.03, shape=1.5 if kind == "truncated_gamma" else None)
    rule = make_rule(cfg, g)
    p, degen = rule.pvalue(test, ref)
    fire, _ = rule.decide(test, ref)
    expect = (p <= 0.03) if rule.inclusive else (p < 0.03)
    assert np.array_equal(fire, expect & ~degen)
