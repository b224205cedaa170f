from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tissuevocab import errors
from tissuevocab.volume_store import (
    HEADER_SIZE,
    MAGIC,
    Mask,
    SubjectRecord,
    Visit,
    Volume,
    decode_volume,
    encode_volume,
    format_table,
    load_manifest,
    read_labels,
    read_mask,
    read_table,
    read_volume,
    write_labels,
    write_manifest,
    write_mask,
    write_table,
    write_volume,
)

dims = st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(1, 3))


@given(dims.flatmap(lambda d: arrays(np.float32, d, elements=st.floats(-1e6, 1e6, width=32))),
       st.tuples(*[st.floats(0.125, 8, width=32)] * 3))
def test_roundtrip_is_exact(data, spacing):
    v = Volume(data, spacing)
    back = decode_volume(encode_volume(v))
    assert back == v
    assert back.data.dtype == np.float32


def test_payload_is_x_fastest():
    data = np.arange(2 * 3 * 2, dtype=np.float32).reshape(2, 3, 2)
    buf = encode_volume(Volume(data))
    payload = np.frombuffer(buf[HEADER_SIZE:], dtype="<f4")
    assert payload[:3].tolist() == [data[0, 0, 0], data[1, 0, 0], data[0, 1, 0]]


def test_header_fields():
    buf = encode_volume(Volume(np.zeros((4, 3, 2, 5)), (1.5, 1.5, 3.0)))
    assert buf[:5] == MAGIC
    assert struct.unpack_from("<4I3f", buf, 5) == (4, 3, 2, 5, 1.5, 1.5, 3.0)


@pytest.mark.parametrize("mutate, exc", [
    (lambda b: b"XVOL1" + b[5:], errors.BadMagic),
    (lambda b: b[:10], errors.TruncatedFile),
    (lambda b: b[:-4], errors.TruncatedFile),
    (lambda b: b + b"\0\0\0\0", errors.CorruptFile),
    (lambda b: b[:5] + struct.pack("<I", 0) + b[9:], errors.InvalidHeader),
    (lambda b: b[:5] + struct.pack("<I", 5000) + b[9:], errors.DimOverflow),
    (lambda b: b[:21] + struct.pack("<f", -1.0) + b[25:], errors.InvalidHeader),
    (lambda b: b[:HEADER_SIZE] + struct.pack("<f", float("nan")) + b[HEADER_SIZE + 4:], errors.NonFiniteData),
])
def test_corrupt_inputs(mutate, exc):
    buf = encode_volume(Volume(np.ones((2, 2, 2))))
    with pytest.raises(exc):
        decode_volume(mutate(buf))


def test_file_io_and_masks(tmp_path):
    v = Volume(np.random.default_rng(0).normal(size=(4, 4, 2, 2)), (1, 2, 3), "x")
    write_volume(v, tmp_path / "a" / "v.vvol")
    assert read_volume(tmp_path / "a" / "v.vvol", "x") == v
    m = Mask(np.random.default_rng(1).random((4, 4, 2)) > 0.5)
    write_mask(m, tmp_path / "m.vvol")
    assert read_mask(tmp_path / "m.vvol") == m
    write_volume(Volume(np.full((2, 2, 2), 0.5)), tmp_path / "bad.vvol")
    with pytest.raises(errors.CorruptFile):
        read_mask(tmp_path / "bad.vvol")
    labels = np.array([[[-1, 0], [3, 4]]])
    write_labels(labels, tmp_path / "l.vvol")
    assert np.array_equal(read_labels(tmp_path / "l.vvol"), labels)


def test_volume_validation():
    with pytest.raises(errors.ShapeMismatch):
        Volume(np.zeros((2, 2)))
    with pytest.raises(errors.InvalidHeader):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))


def test_manifest_roundtrip(tmp_path):
    seqs = {"t1w": tmp_path / "S1" / "b" / "t1w.vvol"}
    visit = Visit("b", seqs, tmp_path / "S1" / "b" / "mask.vvol", {"fibrosis": 2}, tmp_path / "S1" / "b" / "truth.vvol")
    write_manifest([SubjectRecord("S1", {"b": visit}, {"arm": "placebo", "dose": 0.0})], tmp_path / "manifest.json")
    (back,) = load_manifest(tmp_path / "manifest.json")
    assert back.subject_id == "S1" and back.labels == {"arm": "placebo", "dose": 0.0}
    assert back.visits["b"].sequences == seqs
    assert back.visits["b"].labels == {"fibrosis": 2}
    assert back.visits["b"].truth == visit.truth


def test_tables(tmp_path):
    rows = [{"a": 1, "b": 0.1, "c": "x,y"}, {"a": True, "b": None, "c": float("nan")}]
    text = format_table(rows, ["a", "b", "c"])
    assert text.splitlines()[1] == '1,0.1,"x,y"'
    assert text.endswith("\r\n")
    write_table(rows, tmp_path / "t.csv", ["a", "b", "c"])
    header, back = read_table(tmp_path / "t.csv")
    assert header == ["a", "b", "c"]
    assert back[1] == {"a": "true", "b": "", "c": "nan"}
