"""Volumes, masks, cohort manifests and CSV tables.

VVOL1 layout (all little-endian)::

    b"VVOL1" | u32 nx | u32 ny | u32 nz | u32 echoes | f32 sx | f32 sy | f32 sz | f32 payload

The payload is x-fastest, then y, then z, echo slowest. In memory a volume is
held as an array of shape ``(nx, ny, nz, echoes)`` so that ``data[x, y, z, e]``
addresses a voxel directly.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BadMagic,
    CorruptFile,
    DimOverflow,
    InvalidHeader,
    IoFailure,
    NonFiniteData,
    ShapeMismatch,
    TruncatedFile,
)

MAGIC = b"VVOL1"
_HEADER = struct.Struct("<4I3f")
HEADER_SIZE = len(MAGIC) + _HEADER.size
MAX_DIM = 4096


@dataclass
class Volume:
    data: np.ndarray  # (nx, ny, nz, echoes) float32
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    sequence_id: str = ""

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4:
            raise ShapeMismatch(f"volume data must be 3D or 4D, got shape {data.shape}")
        self.data = data
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in self.spacing):
            raise InvalidHeader(f"spacing must be three positive reals, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape[:3])

    @property
    def echoes(self) -> int:
        return int(self.data.shape[3])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.sequence_id == other.sequence_id
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass
class Mask:
    data: np.ndarray  # (nx, ny, nz) bool

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim == 4 and data.shape[3] == 1:
            data = data[..., 0]
        if data.ndim != 3:
            raise ShapeMismatch(f"mask must be 3D, got shape {data.shape}")
        self.data = data.astype(bool)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


# -- VVOL1 ------------------------------------------------------------------

def encode_volume(v: Volume) -> bytes:
    if np.ndim(v.data) != 4:
        raise ShapeMismatch(f"volume data must be 4D, got shape {np.shape(v.data)}")
    nx, ny, nz = v.dims
    payload = np.ascontiguousarray(v.data.astype("<f4").ravel(order="F"))
    if payload.size != nx * ny * nz * v.echoes:
        raise ShapeMismatch("payload length does not match dims")
    header = MAGIC + _HEADER.pack(nx, ny, nz, v.echoes, *v.spacing)
    return header + payload.tobytes()


def decode_volume(buf: bytes, sequence_id: str = "") -> Volume:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise BadMagic("not a VVOL1 file")
    if len(buf) < HEADER_SIZE:
        raise TruncatedFile("header is truncated")
    nx, ny, nz, ne, sx, sy, sz = _HEADER.unpack_from(buf, len(MAGIC))
    for name, d in (("nx", nx), ("ny", ny), ("nz", nz), ("echoes", ne)):
        if d == 0:
            raise InvalidHeader(f"{name} must be positive")
        if d > MAX_DIM:
            raise DimOverflow(f"{name}={d} exceeds {MAX_DIM}")
    for s in (sx, sy, sz):
        if not (math.isfinite(s) and s > 0):
            raise InvalidHeader(f"spacing must be positive and finite, got {(sx, sy, sz)}")
    expected = nx * ny * nz * ne * 4
    available = len(buf) - HEADER_SIZE
    if available < expected:
        raise TruncatedFile(f"payload has {available} bytes, header declares {expected}")
    if available > expected:
        raise CorruptFile(f"{available - expected} trailing bytes after payload")
    flat = np.frombuffer(buf, dtype="<f4", count=nx * ny * nz * ne, offset=HEADER_SIZE)
    if not np.all(np.isfinite(flat)):
        raise NonFiniteData("payload contains NaN or Inf")
    data = flat.astype(np.float32).reshape((nx, ny, nz, ne), order="F")
    return Volume(data=data, spacing=(sx, sy, sz), sequence_id=sequence_id)


def read_volume(path: str | os.PathLike, sequence_id: str = "") -> Volume:
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_volume(buf, sequence_id=sequence_id)


def write_volume(v: Volume, path: str | os.PathLike) -> None:
    buf = encode_volume(v)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(buf)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_mask(path: str | os.PathLike) -> Mask:
    v = read_volume(path)
    if v.echoes != 1:
        raise CorruptFile("mask file must have a single echo")
    values = v.data[..., 0]
    if not np.all((values == 0) | (values == 1)):
        raise CorruptFile("mask file is not binary")
    return Mask(values > 0)


def write_mask(m: Mask, path: str | os.PathLike, spacing=(1.0, 1.0, 1.0)) -> None:
    write_volume(Volume(m.data.astype(np.float32), spacing=spacing), path)


def read_labels(path: str | os.PathLike) -> np.ndarray:
    """Integer label volume stored as VVOL1 (e.g. ground-truth class fields)."""
    return read_volume(path).data[..., 0].astype(np.int64)


def write_labels(labels: np.ndarray, path: str | os.PathLike, spacing=(1.0, 1.0, 1.0)) -> None:
    write_volume(Volume(np.asarray(labels, dtype=np.float32), spacing=spacing), path)


# -- cohort manifest --------------------------------------------------------

@dataclass
class Visit:
    visit_id: str
    sequences: dict[str, Path]
    mask: Path
    labels: dict[str, Any] = field(default_factory=dict)
    truth: Path | None = None

    def volume(self, sequence_id: str) -> Volume:
        return read_volume(self.sequences[sequence_id], sequence_id=sequence_id)

    def load_mask(self) -> Mask:
        return read_mask(self.mask)


@dataclass
class SubjectRecord:
    subject_id: str
    visits: dict[str, Visit]
    labels: dict[str, Any] = field(default_factory=dict)


def load_manifest(path: str | os.PathLike) -> list[SubjectRecord]:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    root = path.parent
    subjects = []
    for s in doc["subjects"]:
        visits = {}
        for v in s["visits"]:
            visits[v["id"]] = Visit(
                visit_id=v["id"],
                sequences={k: root / p for k, p in v["sequences"].items()},
                mask=root / v["mask"],
                labels=dict(v.get("labels", {})),
                truth=root / v["truth"] if v.get("truth") else None,
            )
        subjects.append(SubjectRecord(s["id"], visits, dict(s.get("labels", {}))))
    return subjects


def write_manifest(subjects: Sequence[SubjectRecord], path: str | os.PathLike) -> None:
    """Paths are written relative to the manifest's directory."""
    path = Path(path)
    root = path.parent

    def rel(p: Path) -> str:
        return Path(os.path.relpath(p, root)).as_posix()

    doc = {"subjects": []}
    for s in subjects:
        visits = []
        for v in s.visits.values():
            entry = {
                "id": v.visit_id,
                "sequences": {k: rel(p) for k, p in v.sequences.items()},
                "mask": rel(v.mask),
                "labels": v.labels,
            }
            if v.truth is not None:
                entry["truth"] = rel(v.truth)
            visits.append(entry)
        doc["subjects"].append({"id": s.subject_id, "labels": s.labels, "visits": visits})
    root.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- tables -----------------------------------------------------------------

def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def format_table(rows: Iterable[Mapping[str, Any]], columns: Sequence[str] | None = None) -> str:
    rows = list(rows)
    if columns is None:
        if not rows:
            raise ValueError("columns are required for an empty table")
        columns = list(rows[0].keys())
    out = io.StringIO()
    writer = csv.writer(out, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    return out.getvalue()


def write_table(rows: Iterable[Mapping[str, Any]], path: str | os.PathLike,
                columns: Sequence[str] | None = None) -> None:
    text = format_table(rows, columns)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_table(path: str | os.PathLike) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [dict(zip(header, r)) for r in reader]
    return header, rows
