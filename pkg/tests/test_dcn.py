from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tissuevocab import dcn, errors, nn, synth


@given(arrays(np.float64, (30, 2), elements=st.floats(-10, 10)), st.integers(2, 5))
def test_lloyd_never_increases_inertia(X, K):
    init = X[:K]
    centroids, labels = dcn.lloyd(X, init)
    assert np.array_equal(labels, dcn.assign_many(X, centroids))
    start = dcn.inertia(X, init, dcn.assign_many(X, init))
    assert dcn.inertia(X, centroids, labels) <= start + 1e-9 * max(1.0, start)


def test_kmeans_matches_reference_inertia():
    sklearn = pytest.importorskip("sklearn.cluster")
    X = np.random.default_rng(0).normal(size=(200, 3)) + np.repeat(np.eye(3) * 6, [70, 70, 60], axis=0)
    c, labels = dcn.kmeans(X, 3, seed=0, n_init=5)
    ref = sklearn.KMeans(3, n_init=10, random_state=0).fit(X)
    assert dcn.inertia(X, c, labels) <= ref.inertia_ * (1 + 1e-6)


def test_kmeans_too_few():
    with pytest.raises(errors.TooFewSamples):
        dcn.kmeans(np.zeros((2, 2)), 3)


def test_assign_ties_go_low():
    assert dcn.assign_many(np.array([[0.5]]), np.array([[0.0], [1.0]])).tolist() == [0]


def test_online_update_first_sample_replaces():
    cb = dcn.Codebook(np.zeros((2, 2)))
    dcn.update_centroid(cb, 0, np.array([3.0, 4.0]))
    assert cb.centroids[0].tolist() == [3.0, 4.0] and cb.counts.tolist() == [1, 0]


def test_cluster_loss():
    cb = dcn.Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
    z = np.array([[1.0, 0.0], [1.0, 2.0]])
    assert dcn.cluster_loss(z, cb, np.array([0, 1])) == pytest.approx(1.0)


def test_training_is_deterministic_and_logs_history():
    X, _ = synth.planted_texture_patches(120, synth.default_spec().sequences[0].classes, s=8, seed=0)
    model = nn.ConvAutoencoder(nn.Architecture(1, 8), seed=0)
    cfg = dcn.TrainConfig(batch_size=16, lr=1e-3)
    runs = [dcn.train_dcn(dcn.pretrain(model, X, 1, 0, cfg).model, X, 3, 0.5, 2, 0, cfg) for _ in range(2)]
    a, b = runs
    assert np.array_equal(a.codebook.centroids, b.codebook.centroids)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.model.parameters(), b.model.parameters()))
    assert [h["epoch"] for h in a.history] == [0, 1, 2]
    assert {"heldout_recon", "heldout_cluster", "heldout_total"} <= set(a.history[-1])
    assert len(a.heldout_index) == 12 and not set(a.heldout_index) & set(a.train_index)
    # the input model is left untouched
    assert all(np.array_equal(p.data, q.data) for p, q in zip(model.parameters(),
                                                              nn.ConvAutoencoder(nn.Architecture(1, 8), seed=0).parameters()))


def test_codebook_roundtrip(tmp_path):
    cb = dcn.Codebook(np.random.default_rng(0).normal(size=(4, 20)), lam=0.25, sequence_id="t1w")
    dcn.save_codebook(cb, tmp_path / "c.dcnc")
    back = dcn.load_codebook(tmp_path / "c.dcnc")
    assert back.K == 4 and back.sequence_id == "t1w" and back.lam == 0.25
    assert np.array_equal(back.centroids, cb.centroids.astype(np.float32))
    (tmp_path / "t.dcnc").write_bytes((tmp_path / "c.dcnc").read_bytes()[:-3])
    with pytest.raises(errors.TruncatedFile):
        dcn.load_codebook(tmp_path / "t.dcnc")
