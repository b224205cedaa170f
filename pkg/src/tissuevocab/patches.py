"""Training-patch sampling, sliding-window positions and intensity normalization.

Patches are 2D axial tiles. A patch centred at ``(x, y, z)`` covers
``x - s//2 .. x - s//2 + s - 1`` (same for y) on slice ``z``; centres whose
window would leave the volume are never used.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import seeding
from .errors import BadPatchSize, MaskTooSmall, ShapeMismatch
from .volume_store import Mask, Volume, read_volume, write_volume

DEFAULT_PATCH_SIZE = 32
DEFAULT_STRIDE = 16


@dataclass
class Patch:
    data: np.ndarray  # (s, s, C)
    origin: tuple[int, int, int]
    subject_id: str = ""
    visit_id: str = ""
    sequence_id: str = ""


@dataclass
class PatchSet:
    """Patches stored as one stacked array ``(n, s, s, C)`` plus per-patch metadata."""

    data: np.ndarray
    origins: np.ndarray  # (n, 3) int
    sources: list[tuple[str, str, str]]  # (subject_id, visit_id, sequence_id) per patch
    seed: int | None = None
    counts: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.data.shape[0])

    @property
    def size(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[3])

    @property
    def patches(self) -> list[Patch]:
        return [
            Patch(self.data[i], tuple(int(c) for c in self.origins[i]), *self.sources[i])
            for i in range(len(self))
        ]

    def tensor(self) -> np.ndarray:
        """Batch in (B, C, s, s) layout for the network."""
        return np.ascontiguousarray(self.data.transpose(0, 3, 1, 2))

    def subset(self, index) -> "PatchSet":
        index = np.asarray(index)
        return PatchSet(
            self.data[index], self.origins[index], [self.sources[i] for i in index.tolist()], self.seed
        )


def normalize(v: Volume, mask: Mask) -> Volume:
    """Per-echo z-score using in-mask statistics; constant echoes become zero."""
    if mask.dims != v.dims:
        raise ShapeMismatch(f"mask dims {mask.dims} != volume dims {v.dims}")
    fg = mask.data
    if not fg.any():
        raise MaskTooSmall("mask has no foreground voxels")
    out = np.zeros(v.data.shape, dtype=np.float64)
    for e in range(v.echoes):
        echo = v.data[..., e].astype(np.float64)
        values = echo[fg]
        mean = values.mean()
        std = values.std()
        if std > 0:
            out[..., e] = (echo - mean) / std
    return Volume(out.astype(np.float32), spacing=v.spacing, sequence_id=v.sequence_id)


def _check_size(s: int, dims: Sequence[int]) -> None:
    if s < 4 or s > min(dims[0], dims[1]):
        raise BadPatchSize(f"patch size {s} outside [4, {min(dims[0], dims[1])}]")


def valid_centers(mask: Mask, s: int) -> np.ndarray:
    """Foreground voxels whose s x s axial window lies inside the volume, shape (n, 3)."""
    nx, ny, _ = mask.dims
    half = s // 2
    fits = np.zeros(mask.dims, dtype=bool)
    fits[half : nx - s + half + 1, half : ny - s + half + 1, :] = True
    return np.argwhere(mask.data & fits)


def extract_patch(v: Volume, origin: Sequence[int], s: int) -> np.ndarray:
    x, y, z = (int(c) for c in origin)
    x0, y0 = x - s // 2, y - s // 2
    if x0 < 0 or y0 < 0 or x0 + s > v.dims[0] or y0 + s > v.dims[1] or not 0 <= z < v.dims[2]:
        raise BadPatchSize(f"patch at {origin} with size {s} leaves the volume")
    return v.data[x0 : x0 + s, y0 : y0 + s, z, :]


def extract_patches(v: Volume, origins: np.ndarray, s: int) -> np.ndarray:
    """Vectorised :func:`extract_patch` for many centres, returns (n, s, s, C)."""
    origins = np.asarray(origins, dtype=np.int64).reshape(-1, 3)
    if len(origins) == 0:
        return np.zeros((0, s, s, v.echoes), dtype=np.float32)
    offs = np.arange(s) - s // 2
    xs = origins[:, 0, None] + offs  # (n, s)
    ys = origins[:, 1, None] + offs
    zs = origins[:, 2]
    return v.data[xs[:, :, None], ys[:, None, :], zs[:, None, None], :]


def sample_training_patches(
    volumes: Sequence[tuple[Volume, Mask]],
    M: int,
    s: int = DEFAULT_PATCH_SIZE,
    seed: int = 0,
    ids: Sequence[tuple[str, str, str]] | None = None,
) -> PatchSet:
    """Draw floor(M/N) patches per volume at random in-mask centres (with replacement).

    Each volume is normalized with its own mask first; every volume gets its own
    random stream keyed by its id, so results do not depend on processing order.
    """
    n = len(volumes)
    if n == 0 or M < n:
        raise ValueError(f"need M >= N >= 1, got M={M}, N={n}")
    if ids is None:
        ids = [(str(i), "", volumes[i][0].sequence_id) for i in range(n)]
    per_volume = M // n
    datas, origins, sources, counts = [], [], [], {}
    for (vol, mask), key in zip(volumes, ids):
        _check_size(s, vol.dims)
        if mask.dims != vol.dims:
            raise ShapeMismatch(f"mask dims {mask.dims} != volume dims {vol.dims}")
        centers = valid_centers(mask, s)
        if len(centers) == 0:
            raise MaskTooSmall(f"no valid patch centre in volume {key}")
        rng = seeding.rng(seed, "sampling", *key)
        picks = centers[rng.integers(0, len(centers), size=per_volume)]
        norm = normalize(vol, mask)
        datas.append(extract_patches(norm, picks, s))
        origins.append(picks)
        sources.extend([tuple(key)] * per_volume)
        counts["/".join(key)] = per_volume
    return PatchSet(
        data=np.concatenate(datas).astype(np.float32),
        origins=np.concatenate(origins).astype(np.int64),
        sources=sources,
        seed=seed,
        counts=counts,
    )


def dense_positions(mask: Mask, s: int = DEFAULT_PATCH_SIZE, stride: int = DEFAULT_STRIDE) -> list[tuple[int, int, int]]:
    """In-mask centres on an in-plane stride grid (anchored at s//2), every slice.

    Order is lexicographic in (x, y, z).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    nx, ny, nz = mask.dims
    half = s // 2
    if s > nx or s > ny:
        return []
    grid = np.zeros(mask.dims, dtype=bool)
    grid[half : nx - s + half + 1 : stride, half : ny - s + half + 1 : stride, :] = True
    return [tuple(int(c) for c in p) for p in np.argwhere(grid & mask.data)]


# -- persistence ------------------------------------------------------------

def save_patchset(ps: PatchSet, path: str | os.PathLike) -> None:
    path = Path(path)
    blob = Volume(ps.data.transpose(1, 2, 0, 3), spacing=(1.0, 1.0, 1.0))
    write_volume(blob, path)
    meta = {
        "seed": ps.seed,
        "size": ps.size,
        "channels": ps.channels,
        "counts": ps.counts,
        "origins": ps.origins.tolist(),
        "sources": [list(src) for src in ps.sources],
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")


def load_patchset(path: str | os.PathLike) -> PatchSet:
    blob = read_volume(path)
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    data = np.ascontiguousarray(blob.data.transpose(2, 0, 1, 3))
    return PatchSet(
        data=data,
        origins=np.asarray(meta["origins"], dtype=np.int64).reshape(-1, 3),
        sources=[tuple(src) for src in meta["sources"]],
        seed=meta["seed"],
        counts=meta["counts"],
    )
