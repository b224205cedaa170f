from __future__ import annotations

import numpy as np
import pytest

from tissuevocab import errors, gradcheck, nn


def test_shapes_and_bottleneck():
    m = nn.ConvAutoencoder(nn.Architecture(3, 16), seed=0)
    x = np.random.default_rng(0).normal(size=(5, 3, 16, 16)).astype(np.float32)
    z = nn.encode(m, x)
    assert z.shape == (5, 20)
    assert nn.decode(m, z).shape == x.shape
    assert m.arch.bottleneck == (2, 2, 10)
    with pytest.raises(errors.ShapeMismatch):
        nn.encode(m, x[:, :2])
    with pytest.raises(errors.ShapeMismatch):
        nn.ConvAutoencoder(nn.Architecture(1, 12))


def test_init_is_seeded():
    a, b = nn.ConvAutoencoder(seed=4), nn.ConvAutoencoder(seed=4)
    c = nn.ConvAutoencoder(seed=5)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    assert not all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))


def test_encode_is_chunk_invariant():
    m = nn.ConvAutoencoder(nn.Architecture(1, 8, latent=4), seed=1, dtype=np.float64)
    x = np.random.default_rng(1).normal(size=(9, 1, 8, 8))
    assert np.allclose(nn.encode(m, x, chunk=2), nn.encode(m, x, chunk=100), atol=1e-12)


def test_loss_value_matches_definition():
    m = nn.ConvAutoencoder(nn.Architecture(1, 8, latent=4), seed=0, dtype=np.float64)
    x = np.random.default_rng(2).normal(size=(3, 1, 8, 8))
    t = np.random.default_rng(3).normal(size=(3, 4))
    node = nn.training_loss(m, x, t, lam=0.3)
    y = nn.decode(m, nn.encode(m, x))
    z = nn.encode(m, x)
    expected = np.mean((y - x) ** 2) + 0.3 * np.mean(np.sum((z - t) ** 2, axis=1))
    assert abs(node.value - expected) < 1e-10


def test_backward_consumes_graph():
    m = nn.ConvAutoencoder(nn.Architecture(1, 8, latent=4), seed=0)
    x = np.zeros((1, 1, 8, 8), np.float32)
    node = nn.training_loss(m, x)
    nn.backward(node)
    with pytest.raises(errors.GraphNotBuilt):
        nn.backward(node)
    stale = nn.training_loss(m, x)
    nn.training_loss(m, x)
    with pytest.raises(errors.GraphNotBuilt):
        nn.backward(stale)


def test_sgd_momentum_rule():
    p = nn.Tensor(np.array([1.0, 2.0]), "p")
    p.grad = np.array([0.5, -1.0])
    opt = nn.SGD([p], lr=0.1, momentum=0.9)
    opt.step()
    assert np.allclose(p.data, [0.95, 2.1])
    opt.step()
    assert np.allclose(p.data, [0.95 - 0.1 * 0.95, 2.1 + 0.1 * 1.9])


def test_gradients_small_network():
    rows = gradcheck.check_network(seed=3)
    assert max(r["max_rel_err"] for r in rows) < 1e-4


def test_model_roundtrip(tmp_path):
    m = nn.ConvAutoencoder(nn.Architecture(2, 16), seed=0, sequence_id="dixon")
    nn.save_model(m, tmp_path / "m.dcnw")
    back = nn.load_model(tmp_path / "m.dcnw")
    assert back.arch == m.arch and back.sequence_id == "dixon"
    assert all(np.array_equal(p.data, q.data) for p, q in zip(m.parameters(), back.parameters()))
    buf = bytearray((tmp_path / "m.dcnw").read_bytes())
    buf[100] ^= 1
    (tmp_path / "bad.dcnw").write_bytes(bytes(buf))
    with pytest.raises(errors.ChecksumMismatch):
        nn.load_model(tmp_path / "bad.dcnw")
    (tmp_path / "magic.dcnw").write_bytes(b"NOPE!" + bytes(buf[5:]))
    with pytest.raises(errors.BadMagic):
        nn.load_model(tmp_path / "magic.dcnw")
