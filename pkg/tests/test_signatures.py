from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tissuevocab import dcn, errors, nn
from tissuevocab.registration import RigidTransform
from tissuevocab.signatures import (
    ClusterMap,
    Signature,
    cluster_map,
    fuse_signatures,
    image_fuse,
    read_cluster_map,
    read_signatures,
    signature,
    write_cluster_map,
    write_signatures,
)
from tissuevocab.volume_store import Mask, Volume


@given(st.integers(2, 8), st.lists(st.integers(0, 100), min_size=1, max_size=200))
def test_signature_is_a_distribution(K, raw):
    labels = [r % K for r in raw]
    sig = signature(ClusterMap(np.zeros((len(labels), 3)), labels, K, "s"))
    assert sig.D == K and abs(sig.values.sum() - 1) < 1e-12
    assert np.all(sig.values >= 0)


def test_empty_map_and_bad_labels():
    with pytest.raises(errors.EmptyMap):
        signature(ClusterMap(np.zeros((0, 3)), [], 3))
    with pytest.raises(ValueError):
        ClusterMap(np.zeros((1, 3)), [3], 3)


def test_fusion_layout_and_errors():
    a = Signature([0.5, 0.5], [("a", 2)])
    b = Signature([1.0, 0.0, 0.0], [("b", 3)])
    fused = fuse_signatures({"a": a, "b": b}, ["b", "a"])
    assert fused.layout == [("b", 3), ("a", 2)]
    assert fused.columns() == ["b:0", "b:1", "b:2", "a:0", "a:1"]
    assert fuse_signatures([a, b], ["b", "a"]).values.tolist() == fused.values.tolist()
    with pytest.raises(errors.MissingSequence):
        fuse_signatures({"a": a}, ["a", "b"])
    with pytest.raises(errors.DuplicateSequence):
        fuse_signatures({"a": a}, ["a", "a"])
    with pytest.raises(errors.DuplicateSequence):
        fuse_signatures([a, a], ["a"])


def test_cluster_map_end_to_end():
    r = np.random.default_rng(0)
    vol = Volume(r.normal(size=(20, 20, 2, 1)), sequence_id="t1w")
    mask = np.zeros((20, 20, 2), bool)
    mask[4:16, 4:16] = True
    model = nn.ConvAutoencoder(nn.Architecture(1, 8), seed=0, sequence_id="t1w")
    cb = dcn.Codebook(r.normal(size=(3, 20)), sequence_id="t1w")
    cmap = cluster_map(vol, Mask(mask), model, cb, stride=4)
    assert len(cmap) == 3 * 3 * 2 and cmap.K == 3
    empty = cluster_map(vol, Mask(np.zeros_like(mask)), model, cb, 4)
    assert len(empty) == 0
    with pytest.raises(errors.SequenceMismatch):
        cluster_map(vol, Mask(mask), model, dcn.Codebook(cb.centroids, sequence_id="dixon"), 4)
    with pytest.raises(errors.ShapeMismatch):
        cluster_map(Volume(vol.data.repeat(2, axis=3), sequence_id="t1w"), Mask(mask), model, cb, 4)


def test_image_fuse_stacks_channels():
    a = Volume(np.ones((4, 4, 2, 1)), sequence_id="a")
    b = Volume(np.full((4, 4, 2, 2), 2.0), sequence_id="b")
    fused = image_fuse({"a": a, "b": b}, "a", {"b": None}, ["a", "b"])
    assert fused.echoes == 3 and fused.sequence_id == "a+b"
    assert fused.data[..., 2].min() == 2.0
    with pytest.raises(errors.MissingTransform):
        image_fuse({"a": a, "b": b}, "a", {}, ["a", "b"])
    shifted = image_fuse({"a": a, "b": b}, "a", {"b": RigidTransform(translation=(1.0, 0, 0))}, ["a", "b"])
    assert shifted.data[-1, 0, 0, 1] == 0.0  # sampled outside b


def test_csv_roundtrip(tmp_path):
    cmap = ClusterMap([[1, 2, 3], [4, 5, 6]], [0, 2], 3, "s", 4)
    write_cluster_map(cmap, tmp_path / "m.csv")
    back = read_cluster_map(tmp_path / "m.csv", 3, "s", 4)
    assert np.array_equal(back.positions, cmap.positions) and back.labels.tolist() == [0, 2]
    sig = Signature([0.25, 0.75, 0.1, 0.9], [("x", 2), ("y", 2)])
    write_signatures([("S1", "baseline", sig)], tmp_path / "s.csv")
    ((sid, vid, back_sig),) = read_signatures(tmp_path / "s.csv")
    assert (sid, vid) == ("S1", "baseline")
    assert back_sig.layout == sig.layout and back_sig.values.tolist() == sig.values.tolist()
