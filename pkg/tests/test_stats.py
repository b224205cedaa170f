from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy import stats as sps

from tissuevocab import errors, stats

samples = st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=12)


@given(samples, samples)
def test_welch_matches_reference(a, b):
    a, b = np.array(a), np.array(b)
    assume(a.var() + b.var() > 1e-6)
    ref = sps.ttest_ind(a, b, equal_var=False)
    got = stats.t_test(a, b)
    assert got.p == pytest.approx(ref.pvalue, abs=1e-6)
    assert got.statistic == pytest.approx(ref.statistic, rel=1e-6, abs=1e-9)


def test_t_test_errors():
    with pytest.raises(errors.TooFewSamples):
        stats.t_test([1.0], [1.0, 2.0])
    with pytest.raises(errors.DegenerateVariance):
        stats.t_test([1.0, 1.0], [2.0, 2.0])


@given(st.lists(st.integers(0, 20), min_size=4, max_size=4))
def test_fisher_matches_reference(cells):
    table = np.array(cells).reshape(2, 2)
    assert stats.fisher_exact(table) == pytest.approx(sps.fisher_exact(table).pvalue, abs=1e-6)


def test_odds_ratio_haldane():
    assert stats.odds_ratio([[2, 3], [4, 5]])[0] == pytest.approx(10 / 12)
    assert stats.odds_ratio([[0, 3], [4, 5]])[0] == pytest.approx(0.5 * 5.5 / (3.5 * 4.5))


def test_pearson():
    x = np.arange(10.0)
    y = np.sin(x)
    r, p = stats.pearson(x, y)
    ref = sps.pearsonr(x, y)
    assert r == pytest.approx(ref.statistic) and p == pytest.approx(ref.pvalue, abs=1e-9)
    with pytest.raises(errors.DegenerateVariance):
        stats.pearson([1, 1, 1], [1, 2, 3])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.integers(1, 20))
def test_bonferroni(ps, m):
    assert stats.bonferroni(ps, m) == [min(1.0, p * m) for p in ps]


@given(st.lists(st.integers(-5, 5), min_size=1, max_size=4), st.lists(st.integers(-5, 5), min_size=1, max_size=4))
def test_permutation_exact_and_swap_symmetric(a, b):
    a, b = np.array(a, float), np.array(b, float)
    pooled = np.r_[a, b]
    obs = abs(a.mean() - b.mean())
    splits = list(itertools.combinations(range(len(pooled)), len(a)))
    hits = sum(abs(pooled[list(s)].mean() - np.delete(pooled, list(s)).mean()) >= obs - 1e-9 for s in splits)
    got = stats.permutation_test(a, b, n_perm=10_000)
    assert got.method == "permutation-exact"
    assert got.p == pytest.approx(hits / len(splits))
    assert stats.permutation_test(b, a, n_perm=10_000).p == got.p


def test_permutation_sampled_mode():
    r = np.random.default_rng(0)
    a, b = r.normal(size=15), r.normal(1.0, size=15)
    res = stats.permutation_test(a, b, n_perm=2000, seed=1)
    assert res.method == "permutation"
    assert res.p == stats.permutation_test(b, a, n_perm=2000, seed=1).p
    assert res.p >= 1 / 2001
    with pytest.raises(ValueError):
        stats.permutation_test(a, b, n_perm=50)


def test_permutation_many_columns_share_relabellings():
    r = np.random.default_rng(1)
    A, B = r.normal(size=(8, 3)), r.normal(size=(9, 3))
    many = stats.permutation_test_many(A, B, 500, seed=4)
    for j in range(3):
        assert many[j].p == stats.permutation_test(A[:, j], B[:, j], 500, seed=4).p
