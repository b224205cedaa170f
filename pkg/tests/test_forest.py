from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tissuevocab import errors
from tissuevocab.forest import (
    CLASSIFICATION,
    REGRESSION,
    ForestConfig,
    decode_forest,
    encode_forest,
    load_forest,
    rf_feature_importance,
    rf_fit,
    rf_predict,
    rf_predict_labels,
    save_forest,
)

SMALL = ForestConfig(n_trees=25)


def _data(seed=0, n=60):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, 5))
    y = (X[:, 1] + 0.2 * r.normal(size=n) > 0).astype(int)
    return X, y


def test_classification_learns_signal():
    X, y = _data()
    f = rf_fit(X, y, CLASSIFICATION, SMALL, seed=1)
    Xt, yt = _data(seed=9)
    assert np.mean(rf_predict_labels(f, Xt) == yt) >= 0.8
    proba = rf_predict(f, Xt)
    assert proba.shape == (60, 2) and np.allclose(proba.sum(axis=1), 1)
    imp = rf_feature_importance(f)
    assert abs(imp.sum() - 1) < 1e-9 and int(np.argmax(imp)) == 1


def test_regression_learns_signal():
    r = np.random.default_rng(0)
    X = r.uniform(size=(80, 4))
    y = 3 * X[:, 2]
    f = rf_fit(X, y, REGRESSION, SMALL, seed=0)
    pred = rf_predict(f, X)
    assert pred.shape == (80,) and np.corrcoef(pred, y)[0, 1] > 0.95


def test_pure_node_is_leaf():
    X = np.arange(10.0)[:, None]
    y = np.r_[np.zeros(5), np.ones(5)].astype(int)
    f = rf_fit(X, y, CLASSIFICATION, ForestConfig(n_trees=1, bootstrap=False))
    assert f.trees[0].n_nodes == 3 and f.trees[0].threshold[0] == 4.5


@settings(max_examples=15)
@given(st.integers(0, 2**16))
def test_row_order_invariance(perm_seed):
    X, y = _data(n=30)
    perm = np.random.default_rng(perm_seed).permutation(len(y))
    a = rf_fit(X, y, CLASSIFICATION, ForestConfig(n_trees=5), seed=3)
    b = rf_fit(X[perm], y[perm], CLASSIFICATION, ForestConfig(n_trees=5), seed=3)
    assert np.array_equal(rf_predict(a, X), rf_predict(b, X))


def test_errors():
    with pytest.raises(errors.EmptyFeatures):
        rf_fit(np.zeros((5, 0)), np.zeros(5))
    with pytest.raises(errors.DegenerateLabels):
        rf_fit(np.zeros((5, 2)), np.ones(5, int))
    with pytest.raises(errors.DegenerateLabels):
        rf_fit(np.zeros((1, 2)), np.zeros(1), REGRESSION)
    f = rf_fit(*_data(), CLASSIFICATION, ForestConfig(n_trees=2))
    with pytest.raises(errors.ShapeMismatch):
        rf_predict(f, np.zeros((2, 3)))


def test_serialization(tmp_path):
    X, y = _data()
    f = rf_fit(X, y, CLASSIFICATION, ForestConfig(n_trees=4), seed=2)
    back = decode_forest(encode_forest(f))
    assert np.array_equal(rf_predict(back, X), rf_predict(f, X))
    save_forest(f, tmp_path / "f.rf")
    assert np.array_equal(rf_predict(load_forest(tmp_path / "f.rf"), X), rf_predict(f, X))
    buf = bytearray(encode_forest(f))
    buf[-40] ^= 1
    with pytest.raises(errors.ChecksumMismatch):
        decode_forest(bytes(buf))
    with pytest.raises(errors.BadMagic):
        decode_forest(b"XXXXX" + bytes(buf[5:]))
