"""Cluster maps, bag-of-clusters signatures, signature fusion and image fusion."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .dcn import Codebook, assign_many
from .errors import (
    DuplicateSequence,
    EmptyMap,
    MissingSequence,
    MissingTransform,
    SequenceMismatch,
    ShapeMismatch,
)
from .patches import DEFAULT_PATCH_SIZE, DEFAULT_STRIDE, dense_positions, extract_patches, normalize
from .registration import RigidTransform, resample_volume
from .volume_store import Mask, Volume, read_table, write_table


@dataclass
class ClusterMap:
    positions: np.ndarray  # (n, 3) int voxel coordinates
    labels: np.ndarray  # (n,) int in [0, K)
    K: int
    sequence_id: str = ""
    stride: int = DEFAULT_STRIDE

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.positions) != len(self.labels):
            raise ShapeMismatch("positions and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise ValueError(f"labels outside [0, {self.K})")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Signature:
    values: np.ndarray
    layout: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if not self.layout:
            self.layout = [("", len(self.values))]
        if sum(k for _, k in self.layout) != len(self.values):
            raise ShapeMismatch("layout spans do not cover the signature")

    @property
    def D(self) -> int:
        return len(self.values)

    def span(self, sequence_id: str) -> np.ndarray:
        start = 0
        for seq, k in self.layout:
            if seq == sequence_id:
                return self.values[start : start + k]
            start += k
        raise MissingSequence(sequence_id)

    def columns(self) -> list[str]:
        return [f"{seq}:{k}" for seq, K in self.layout for k in range(K)]


def _encode_positions(volume: Volume, model: nn.ConvAutoencoder, positions, s: int, chunk: int = 1024) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
    out = []
    for start in range(0, len(pos), chunk):
        patches = extract_patches(volume, pos[start : start + chunk], s)
        out.append(nn.encode(model, np.ascontiguousarray(patches.transpose(0, 3, 1, 2))))
    return np.concatenate(out) if out else np.zeros((0, model.arch.latent))


def cluster_map(volume: Volume, mask: Mask, model: nn.ConvAutoencoder, codebook: Codebook,
                stride: int = DEFAULT_STRIDE) -> ClusterMap:
    """Label every dense in-mask position with the nearest centroid of its encoded patch."""
    if codebook.sequence_id != model.sequence_id or (volume.sequence_id and model.sequence_id
                                                    and volume.sequence_id != model.sequence_id):
        raise SequenceMismatch(
            f"codebook {codebook.sequence_id!r}, model {model.sequence_id!r}, volume {volume.sequence_id!r}")
    if codebook.dim != model.arch.latent:
        raise ShapeMismatch(f"codebook dim {codebook.dim} != latent dim {model.arch.latent}")
    if volume.echoes != model.arch.in_channels:
        raise ShapeMismatch(f"volume has {volume.echoes} channels, model expects {model.arch.in_channels}")
    s = model.arch.size
    positions = dense_positions(mask, s, stride)
    if not positions:
        return ClusterMap(np.zeros((0, 3)), np.zeros(0), codebook.K, codebook.sequence_id, stride)
    z = _encode_positions(normalize(volume, mask), model, positions, s)
    return ClusterMap(np.asarray(positions), assign_many(z, codebook.centroids), codebook.K,
                      codebook.sequence_id, stride)


def signature(cmap: ClusterMap) -> Signature:
    """Relative frequency of each cluster over all positions of the map."""
    if len(cmap) == 0:
        raise EmptyMap("cluster map has no positions")
    counts = np.bincount(cmap.labels, minlength=cmap.K).astype(np.float64)
    return Signature(counts / len(cmap), [(cmap.sequence_id, cmap.K)])


def fuse_signatures(signatures: Mapping[str, Signature] | Sequence[Signature], order: Sequence[str]) -> Signature:
    """Concatenate per-sequence signatures in the declared ``order``."""
    if len(set(order)) != len(order):
        raise DuplicateSequence(f"sequence order has duplicates: {list(order)}")
    if not isinstance(signatures, Mapping):
        by_seq: dict[str, Signature] = {}
        for sig in signatures:
            for seq, _ in sig.layout:
                if seq in by_seq:
                    raise DuplicateSequence(seq)
                by_seq[seq] = sig
        signatures = by_seq
    values, layout = [], []
    for seq in order:
        if seq not in signatures:
            raise MissingSequence(seq)
        sig = signatures[seq]
        part = sig.span(seq) if any(s == seq for s, _ in sig.layout) else sig.values
        values.append(part)
        layout.append((seq, len(part)))
    return Signature(np.concatenate(values), layout)


def image_fuse(volumes: Mapping[str, Volume], reference: str, transforms: Mapping[str, RigidTransform | None],
               order: Sequence[str]) -> Volume:
    """Resample every sequence onto the reference grid and stack all echoes as channels.

    ``transforms[seq]`` maps reference coordinates into ``seq``'s frame; the
    reference itself needs no entry. ``None`` marks pre-aligned data.
    """
    if reference not in volumes:
        raise MissingSequence(reference)
    ref = volumes[reference]
    chans = []
    for seq in order:
        if seq not in volumes:
            raise MissingSequence(seq)
        v = volumes[seq]
        if seq != reference:
            if seq not in transforms:
                raise MissingTransform(f"no transform for sequence {seq!r}")
            t = transforms[seq]
            if t is not None or v.dims != ref.dims:
                v = resample_volume(v, t or RigidTransform.identity(), ref.dims)
        chans.append(v.data)
    return Volume(np.concatenate(chans, axis=3), ref.spacing, fused_id(order))


def fused_id(order: Sequence[str]) -> str:
    return "+".join(order)


# -- CSV --------------------------------------------------------------------

def write_cluster_map(cmap: ClusterMap, path: str | os.PathLike) -> None:
    rows = [{"x": int(p[0]), "y": int(p[1]), "z": int(p[2]), "label": int(l)}
            for p, l in zip(cmap.positions, cmap.labels)]
    write_table(rows, path, ["x", "y", "z", "label"])


def read_cluster_map(path: str | os.PathLike, K: int, sequence_id: str = "", stride: int = DEFAULT_STRIDE) -> ClusterMap:
    _, rows = read_table(path)
    pos = [(int(r["x"]), int(r["y"]), int(r["z"])) for r in rows]
    return ClusterMap(np.asarray(pos).reshape(-1, 3), [int(r["label"]) for r in rows], K, sequence_id, stride)


def write_signatures(rows: Sequence[tuple[str, str, Signature]], path: str | os.PathLike) -> None:
    if not rows:
        raise EmptyMap("no signatures to write")
    cols = rows[0][2].columns()
    for _, _, sig in rows:
        if sig.columns() != cols:
            raise ShapeMismatch("signatures have different layouts")
    table = [{"subject": s, "visit": v, **dict(zip(cols, sig.values))} for s, v, sig in rows]
    write_table(table, path, ["subject", "visit", *cols])


def read_signatures(path: str | os.PathLike) -> list[tuple[str, str, Signature]]:
    header, rows = read_table(path)
    cols = header[2:]
    layout: list[tuple[str, int]] = []
    for c in cols:
        seq = c.rsplit(":", 1)[0]
        if layout and layout[-1][0] == seq:
            layout[-1] = (seq, layout[-1][1] + 1)
        else:
            layout.append((seq, 1))
    return [(r["subject"], r["visit"], Signature([float(r[c]) for c in cols], list(layout))) for r in rows]
