from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.cluster.hierarchy import linkage
from scipy.spatial.distance import pdist

from tissuevocab import errors
from tissuevocab.evaluation import (
    adjusted_rand_index,
    classification_metrics,
    excluded_classes,
    predicted_density,
    silverman_bandwidth,
    stratified_kfold,
)
from tissuevocab.hierarchy import agglomerate, cut_dendrogram


@settings(max_examples=30, suppress_health_check=[HealthCheck.filter_too_much])
@given(arrays(np.float64, st.tuples(st.integers(2, 15), st.integers(1, 4)), elements=st.floats(-50, 50), unique=True))
def test_heights_match_reference(X):
    dist = np.sort(pdist(X))
    assume(len(dist) == 1 or np.min(np.diff(dist)) > 1e-6)  # tie-free, so the merge order is unique
    d = agglomerate(X)
    assert len(d.merges) == len(X) - 1
    assert np.all(np.diff(d.heights) >= -1e-9)
    assert np.allclose(d.heights, linkage(X, "average")[:, 2], atol=1e-9)
    assert d.merges[-1].size == len(X)


def test_cut_and_errors():
    X = np.array([[0.0], [0.1], [5.0], [5.1], [20.0]])
    d = agglomerate(X)
    assert cut_dendrogram(d, 3).tolist() == [0, 0, 1, 1, 2]
    assert cut_dendrogram(d, 5).tolist() == [0, 1, 2, 3, 4]
    assert set(cut_dendrogram(d, 1).tolist()) == {0}
    with pytest.raises(errors.TooManyClusters):
        cut_dendrogram(d, 6)
    with pytest.raises(errors.FewerThanTwoPoints):
        agglomerate(np.zeros((1, 2)))


@given(st.lists(st.integers(0, 3), min_size=5, max_size=60), st.integers(2, 5), st.integers(0, 100))
def test_stratified_folds_are_balanced(y, k, seed):
    folds = stratified_kfold(y, k, seed)
    y = np.asarray(y)
    sizes = np.bincount(folds, minlength=k)
    assert sizes.max() - sizes.min() <= 1
    for c in np.unique(y):
        per = np.bincount(folds[y == c], minlength=k)
        assert per.max() - per.min() <= 1
    assert np.array_equal(folds, stratified_kfold(y, k, seed))


def test_rare_classes_excluded():
    y = [0] * 10 + [1] * 3
    folds = stratified_kfold(y, 5, 0, exclude_at_most=5)
    assert np.all(folds[10:] == -1) and np.all(folds[:10] >= 0)
    assert excluded_classes(y, 5) == [1]


def test_metrics():
    m = classification_metrics([1, 1, 0, 0, 0], [1, 0, 0, 0, 1])
    assert m == pytest.approx({"Acc": 0.6, "PPV": 0.5, "NPV": 2 / 3, "Sens": 0.5, "Spec": 2 / 3})
    assert np.isnan(classification_metrics([0, 0], [0, 0])["Sens"])


@given(st.lists(st.integers(0, 4), min_size=2, max_size=50), st.lists(st.integers(0, 4), min_size=2, max_size=50))
def test_ari_matches_reference(a, b):
    sk = pytest.importorskip("sklearn.metrics")
    n = min(len(a), len(b))
    assert adjusted_rand_index(a[:n], b[:n]) == pytest.approx(sk.adjusted_rand_score(a[:n], b[:n]), abs=1e-12)


def test_density_integrates_to_one():
    v = np.random.default_rng(0).normal(size=40)
    grid = np.linspace(-8, 8, 2001)
    dens = predicted_density(v, grid)
    assert abs(np.trapezoid(dens, grid) - 1) < 1e-3
    assert silverman_bandwidth(v) > 0
