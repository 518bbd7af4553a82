import itertools
import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rankcfar.rank_core import (
    SupportTooLarge,
    build_distribution,
    mann_whitney_batch,
    mann_whitney_statistic,
    tail_probability,
    threshold_for_pfa,
    wilcoxon_statistic,
)


def brute_counts(m, n):
    """Count rank-sum values over every placement of the test ranks."""
    N = m + n
    hist = Counter(sum(c) for c in itertools.combinations(range(1, N + 1), m))
    lo = m * (m + 1) // 2
    return [hist.get(lo + u, 0) for u in range(m * n + 1)]


def exact_tail(m, n, k):
    N = m + n
    hits = sum(1 for c in itertools.combinations(range(1, N + 1), m) if sum(c) >= k)
    return Fraction(hits, math.comb(N, m))


def test_boundary_no_test_samples():
    d = build_distribution(0, 5)
    assert list(d.counts) == [1]
    assert d.total == 1


def test_single_test_sample_uniform():
    d = build_distribution(1, 3)
    assert list(d.counts) == [1, 1, 1, 1]
    assert d.total == 4


def test_two_by_two():
    d = build_distribution(2, 2)
    assert list(d.counts) == [1, 1, 2, 1, 1]
    assert d.total == 6
    assert d.offset == 3 and d.support_max == 7


@pytest.mark.parametrize("m,n", [(m, n) for m in range(0, 7) for n in range(0, 7) if 1 <= m + n <= 10])
def test_counts_match_enumeration(m, n):
    d = build_distribution(m, n)
    assert [int(c) for c in d.counts] == brute_counts(m, n)


def test_paper_geometry_moments():
    d = build_distribution(4, 780)
    assert d.mean() == 1570
    assert d.variance() == 204100


def test_large_geometry_uses_exact_integers():
    d = build_distribution(4, 1500)
    assert sum(int(c) for c in d.counts) == math.comb(1504, 4)
    assert d.mean() == Fraction(4 * 1505, 2)


def test_symmetry_and_ends():
    d = build_distribution(3, 11)
    c = [int(v) for v in d.counts]
    assert c == c[::-1]
    assert c[0] == 1 and c[-1] == 1


def test_pmf_normalized():
    p = build_distribution(4, 120).pmf()
    assert abs(p.sum() - 1) < 1e-15


def test_support_cap():
    with pytest.raises(SupportTooLarge):
        build_distribution(100, 200, cap=10_000)


@pytest.mark.parametrize("m,n", [(-1, 3), (0, 0)])
def test_invalid_sizes(m, n):
    with pytest.raises(ValueError):
        build_distribution(m, n)


def test_tail_examples():
    d22 = build_distribution(2, 2)
    assert tail_probability(d22, 3) == 1.0
    assert tail_probability(d22, -100) == 1.0
    assert tail_probability(d22, 7) == pytest.approx(1 / 6, rel=1e-15)
    assert tail_probability(d22, 8) == 0.0
    assert tail_probability(build_distribution(1, 9), 10) == pytest.approx(0.1, rel=1e-15)


@pytest.mark.parametrize("m,n", [(2, 5), (3, 4), (4, 4)])
def test_tail_matches_enumeration(m, n):
    d = build_distribution(m, n)
    for k in range(d.offset - 1, d.support_max + 2):
        assert tail_probability(d, k) == float(exact_tail(m, n, k))


def test_threshold_examples():
    t = threshold_for_pfa(build_distribution(1, 9), 0.1)
    assert (t.t_w, t.achieved_pfa) == (10, pytest.approx(0.1))
    t = threshold_for_pfa(build_distribution(2, 2), 0.2)
    assert (t.t_w, t.t_mw) == (7, 4)
    assert t.achieved_pfa == pytest.approx(1 / 6)
    t = threshold_for_pfa(build_distribution(3, 5), 1.0)
    assert t.t_w == 6 and t.achieved_pfa == 1.0


def test_threshold_never_fires_when_support_too_coarse():
    d = build_distribution(1, 3)
    t = threshold_for_pfa(d, 0.1)
    assert t.t_w == d.support_max + 1
    assert t.achieved_pfa == 0.0


def test_threshold_rejects_bad_pfa():
    d = build_distribution(2, 2)
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            threshold_for_pfa(d, bad)


def test_paper_operating_point():
    d = build_distribution(4, 780)
    t = threshold_for_pfa(d, 1e-8)
    assert t.achieved_pfa <= 1e-8 < tail_probability(d, t.t_w - 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 300), st.floats(1e-9, 1.0))
def test_threshold_minimality(m, n, pfa):
    d = build_distribution(m, n)
    t = threshold_for_pfa(d, pfa)
    assert d.offset <= t.t_w <= d.support_max + 1
    assert t.t_mw == t.t_w - m * (m + 1) // 2
    assert tail_probability(d, t.t_w) <= pfa
    assert t.achieved_pfa == tail_probability(d, t.t_w)
    if t.t_w > d.offset:
        assert tail_probability(d, t.t_w - 1) > pfa


def test_statistic_examples():
    assert mann_whitney_statistic([5, 7], [1, 2, 3]) == 6
    assert mann_whitney_statistic([2, 4], [1, 3, 5]) == 3
    assert mann_whitney_statistic([3], [3]) == 1
    assert wilcoxon_statistic([2, 4], [1, 3, 5]) == 6
    assert wilcoxon_statistic([5, 7], [1, 2, 3]) == 9
    assert wilcoxon_statistic([0.1], [0.5, 0.9]) == 1


def test_statistic_rejects_empty():
    with pytest.raises(ValueError):
        mann_whitney_statistic([], [1.0])


def test_ties_score_for_test_sample():
    assert mann_whitney_statistic([1, 1], [1, 1, 1]) == 6


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=6, unique=True),
    st.integers(1, 10),
)
def test_rank_sum_equivalence(values, split):
    rng = np.random.default_rng(len(values) * 31 + split)
    pool = np.array(values + list(rng.normal(size=split) * 1e7 + 5e7))
    pool = np.unique(pool)
    rng.shuffle(pool)
    m = min(len(values), len(pool) - 1)
    test, ref = pool[:m], pool[m:]
    ranks = np.argsort(np.argsort(pool)) + 1
    assert wilcoxon_statistic(test, ref) == int(ranks[:m].sum())
    d = build_distribution(m, len(ref))
    thr = threshold_for_pfa(d, 0.2)
    s = wilcoxon_statistic(test, ref)
    assert (s >= thr.t_w) == (mann_whitney_statistic(test, ref) >= thr.t_mw)


def test_batch_matches_scalar():
    rng = np.random.default_rng(3)
    test = rng.integers(0, 5, size=(50, 4)).astype(float)
    ref = rng.integers(0, 5, size=(50, 30)).astype(float)
    batch = mann_whitney_batch(test, ref)
    assert [mann_whitney_statistic(t, r) for t, r in zip(test, ref)] == batch.tolist()


def test_mw_tail_table():
    d = build_distribution(2, 3)
    table = d.mw_tail_table()
    for u in range(d.m * d.n + 1):
        assert table[u] == tail_probability(d, u + d.offset)
