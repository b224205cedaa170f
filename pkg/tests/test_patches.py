from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tissuevocab import errors
from tissuevocab.patches import (
    dense_positions,
    extract_patch,
    extract_patches,
    load_patchset,
    normalize,
    sample_training_patches,
    save_patchset,
    valid_centers,
)
from tissuevocab.volume_store import Mask, Volume


def _pair(seed=0, dims=(24, 24, 3), echoes=2):
    r = np.random.default_rng(seed)
    v = Volume(r.normal(5, 2, size=dims + (echoes,)), (1.5, 1.5, 3.0), "s")
    m = np.zeros(dims, dtype=bool)
    m[4:20, 4:20, :] = True
    return v, Mask(m)


def test_normalize_in_mask_moments():
    v, m = _pair()
    n = normalize(v, m)
    for e in range(v.echoes):
        vals = n.data[..., e][m.data].astype(np.float64)
        assert abs(vals.mean()) < 1e-5 and abs(vals.std() - 1) < 1e-5


def test_normalize_constant_echo_is_zero():
    v = Volume(np.ones((4, 4, 1)))
    assert not normalize(v, Mask(np.ones((4, 4, 1), bool))).data.any()
    with pytest.raises(errors.MaskTooSmall):
        normalize(v, Mask(np.zeros((4, 4, 1), bool)))


def test_extract_patch_window():
    data = np.arange(8 * 8 * 1, dtype=np.float32).reshape(8, 8, 1)
    v = Volume(data)
    p = extract_patch(v, (4, 4, 0), 4)
    assert np.array_equal(p[..., 0], data[2:6, 2:6, 0])
    with pytest.raises(errors.BadPatchSize):
        extract_patch(v, (1, 4, 0), 4)
    many = extract_patches(v, np.array([[4, 4, 0], [2, 6, 0]]), 4)
    assert np.array_equal(many[1, ..., 0], data[0:4, 4:8, 0])


def test_sampling_counts_and_determinism():
    pairs = [_pair(0), _pair(1)]
    ids = [("S1", "b", "s"), ("S2", "b", "s")]
    a = sample_training_patches(pairs, 11, 8, seed=3, ids=ids)
    b = sample_training_patches(pairs[::-1], 11, 8, seed=3, ids=ids[::-1])
    assert len(a) == 10 and a.counts == {"S1/b/s": 5, "S2/b/s": 5}
    assert a.data.shape == (10, 8, 8, 2)
    # per-volume streams: order of volumes does not change what each volume yields
    assert np.array_equal(a.data[:5], b.data[5:])
    for o in a.origins:
        assert pairs[0][1].data[tuple(o)]


def test_sampling_errors():
    v, m = _pair()
    with pytest.raises(ValueError):
        sample_training_patches([(v, m)], 0, 8)
    with pytest.raises(errors.BadPatchSize):
        sample_training_patches([(v, m)], 5, 32)
    with pytest.raises(errors.MaskTooSmall):
        sample_training_patches([(v, Mask(np.zeros(m.dims, bool)))], 5, 8)


@given(st.integers(4, 12), st.integers(1, 6))
def test_dense_positions_are_valid_and_sorted(s, stride):
    _, m = _pair(dims=(20, 18, 2))
    pos = dense_positions(m, s, stride)
    valid = {tuple(c) for c in valid_centers(m, s).tolist()}
    assert all(p in valid for p in pos)
    assert pos == sorted(pos)
    assert all((p[0] - s // 2) % stride == 0 and (p[1] - s // 2) % stride == 0 for p in pos)


def test_patchset_roundtrip(tmp_path):
    ps = sample_training_patches([_pair()], 6, 8, seed=1, ids=[("S", "v", "s")])
    save_patchset(ps, tmp_path / "p.vvol")
    back = load_patchset(tmp_path / "p.vvol")
    assert np.array_equal(back.data, ps.data)
    assert np.array_equal(back.origins, ps.origins)
    assert back.sources == ps.sources and back.seed == 1
    assert back.tensor().shape == (6, 2, 8, 8)
