from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tissuevocab import errors, synth
from tissuevocab.registration import (
    RegistrationConfig,
    RigidTransform,
    register_rigid,
    resample,
    resample_volume,
    volume_center,
)
from tissuevocab.volume_store import Mask, Volume

angles = st.tuples(*[st.floats(-3, 3)] * 3)
vecs = st.tuples(*[st.floats(-20, 20)] * 3)


@given(angles, vecs, vecs)
def test_inverse_roundtrip(a, t, c):
    T = RigidTransform(a, t, c)
    pts = np.array([[1.0, 2.0, 3.0], [-4.0, 0.5, 9.0]])
    assert np.allclose(T.inverse().apply(T.apply(pts)), pts, atol=1e-9)
    assert np.allclose(RigidTransform.from_dict(T.as_dict()).apply(pts), T.apply(pts))


def test_angles_wrap():
    T = RigidTransform((np.pi, -np.pi, 3 * np.pi), (0, 0, 0))
    assert np.allclose(T.angles, [np.pi, np.pi, np.pi])


def test_resample_identity_and_shift():
    data = np.random.default_rng(0).normal(size=(6, 5, 4))
    v = Volume(data)
    assert resample_volume(v, RigidTransform.identity()) == v
    shifted = resample(data, RigidTransform(translation=(1.0, 0, 0)), (1, 1, 1))
    assert np.allclose(shifted[:-1], data[1:])
    assert np.all(shifted[-1] == 0)


@pytest.fixture(scope="module")
def small_pair():
    spec = synth.default_spec(n_per_arm=1, dims=(48, 48, 12), n_regions=16)
    v = synth.generate_subject(spec, 0).visits["baseline"]
    return v.volumes["t1w"], v.mask


def test_recovers_small_shift(small_pair):
    v, m = small_pair
    sp = np.asarray(v.spacing)
    truth = RigidTransform((0, 0, np.deg2rad(5)), np.array([3, -2, 1]) * sp, volume_center(v.dims, v.spacing))
    moving = resample_volume(v, truth.inverse())
    mmask = Mask(resample(m.data.astype(float), truth.inverse(), v.spacing) > 0.5)
    est = register_rigid(v, m, moving, mmask)
    assert np.all(np.abs(est.translation - truth.translation) / sp < 0.5)
    assert np.all(np.abs(np.rad2deg(est.angles - truth.angles)) < 1.0)


def test_identity_pair(small_pair):
    v, m = small_pair
    est = register_rigid(v, m, v, m)
    assert np.all(np.abs(est.translation) < 0.2) and np.all(np.abs(np.rad2deg(est.angles)) < 0.2)


def test_errors(small_pair):
    v, m = small_pair
    with pytest.raises(errors.NoOverlap):
        register_rigid(v, m, v, Mask(np.zeros(m.dims, bool)))
    with pytest.raises(errors.ShapeMismatch):
        register_rigid(v, Mask(np.ones((2, 2, 2), bool)), v, m)
    noise = Volume(np.random.default_rng(0).normal(size=v.data.shape), v.spacing)
    with pytest.raises(errors.DidNotConverge):
        register_rigid(v, m, noise, m, RegistrationConfig(max_residual=1e-3))
