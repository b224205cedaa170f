"""Rigid 3D registration by multi-resolution search on in-mask mean squared error.

A :class:`RigidTransform` acts on world coordinates (mm) as
``T(x) = R (x - c) + c + t`` where ``c`` is the rotation centre. The transform
returned by :func:`register_rigid` maps points of the fixed frame to the
moving frame, so resampling ``moving`` at ``T(x)`` brings it onto the fixed grid.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import DidNotConverge, NoOverlap, ShapeMismatch
from .volume_store import Mask, Volume

log = logging.getLogger(__name__)


def _wrap(a: np.ndarray) -> np.ndarray:
    """Angles into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


@dataclass
class RigidTransform:
    angles: np.ndarray = field(default_factory=lambda: np.zeros(3))  # xyz Euler, radians
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # mm
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))  # mm

    def __post_init__(self) -> None:
        self.angles = _wrap(np.asarray(self.angles, dtype=np.float64).reshape(3))
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(np.zeros(3), np.zeros(3), center)

    @property
    def is_identity(self) -> bool:
        return not np.any(self.angles) and not np.any(self.translation)

    def matrix(self) -> np.ndarray:
        return Rotation.from_euler("xyz", self.angles).as_matrix()

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.center) @ self.matrix().T + self.center + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.matrix().T
        angles = Rotation.from_matrix(Rt).as_euler("xyz")
        return RigidTransform(angles, -Rt @ self.translation, self.center)

    def as_dict(self) -> dict:
        return {"angles": self.angles.tolist(), "translation": self.translation.tolist(),
                "center": self.center.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(d["angles"], d["translation"], d.get("center", (0.0, 0.0, 0.0)))


def volume_center(dims, spacing) -> np.ndarray:
    return (np.asarray(dims, dtype=np.float64) - 1) / 2 * np.asarray(spacing, dtype=np.float64)


def resample(data: np.ndarray, transform: RigidTransform, spacing, out_dims=None, order: int = 1,
             cval: float = 0.0) -> np.ndarray:
    """Sample a 3D (or 4D, echo-last) array at ``transform(x)`` for every voxel x of the output grid."""
    arr = np.asarray(data)
    out_dims = tuple(out_dims or arr.shape[:3])
    spacing = np.asarray(spacing, dtype=np.float64)
    grid = np.indices(out_dims, dtype=np.float64).reshape(3, -1).T * spacing
    coords = (transform.apply(grid) / spacing).T
    if arr.ndim == 3:
        return ndimage.map_coordinates(arr, coords, order=order, mode="constant", cval=cval).reshape(out_dims)
    chans = [ndimage.map_coordinates(arr[..., e], coords, order=order, mode="constant", cval=cval)
             for e in range(arr.shape[3])]
    return np.stack(chans, axis=-1).reshape(out_dims + (arr.shape[3],))


def resample_volume(v: Volume, transform: RigidTransform, out_dims=None) -> Volume:
    if transform.is_identity and (out_dims is None or tuple(out_dims) == v.dims):
        return Volume(v.data.copy(), v.spacing, v.sequence_id)
    data = resample(v.data.astype(np.float64), transform, v.spacing, out_dims)
    return Volume(data.astype(np.float32), v.spacing, v.sequence_id)


# -- objective --------------------------------------------------------------

@dataclass
class _Level:
    factor: int
    world: np.ndarray  # (n, 3) mm coordinates of fixed in-mask samples
    fixed: np.ndarray  # (n,) fixed intensities
    moving: np.ndarray  # moving image at this level
    spacing: np.ndarray  # full-resolution spacing
    blocks: np.ndarray  # per-axis block size


def _block_mean(a: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return a
    d = [max(n // f, 1) for n in a.shape]
    fs = [f if n >= f else n for n in a.shape]
    a = a[: d[0] * fs[0], : d[1] * fs[1], : d[2] * fs[2]]
    return a.reshape(d[0], fs[0], d[1], fs[1], d[2], fs[2]).mean(axis=(1, 3, 5))


def _zscore(v: Volume, m: Mask, echo: int) -> np.ndarray:
    x = v.data[..., echo].astype(np.float64)
    vals = x[m.data]
    sd = vals.std()
    return (x - vals.mean()) / (sd if sd > 0 else 1.0)


def _level(fixed: np.ndarray, fmask: np.ndarray, moving: np.ndarray, spacing, f: int) -> _Level:
    fx = _block_mean(fixed, f)
    fm = _block_mean(fmask.astype(np.float64), f) >= 0.5
    mv = _block_mean(moving, f)
    fs = [f if n >= f else n for n in fixed.shape]
    idx = np.argwhere(fm).astype(np.float64)
    s = np.asarray(spacing, dtype=np.float64)
    fsv = np.asarray(fs, dtype=np.float64)
    world = (idx * fsv + (fsv - 1) / 2) * s
    return _Level(f, world, fx[fm], mv, s, fsv)


def _cost(level: _Level, params: np.ndarray, center: np.ndarray, min_valid: float = 0.5) -> float:
    t = RigidTransform(params[:3], params[3:], center)
    w = t.apply(level.world)
    f = level.blocks
    u = w / level.spacing
    coords = ((u - (f - 1) / 2) / f).T
    shape = np.asarray(level.moving.shape)[:, None]
    valid = np.all((coords >= 0) & (coords <= shape - 1), axis=0)
    if valid.mean() < min_valid:
        return np.inf
    vals = ndimage.map_coordinates(level.moving, coords[:, valid], order=1, mode="nearest")
    d = vals - level.fixed[valid]
    return float(np.mean(d * d))


@dataclass
class RegistrationConfig:
    factors: tuple[int, ...] = (4, 2, 1)
    max_translation: float = 30.0  # mm
    max_rotation: float = 15.0  # degrees
    translation_step: float = 6.0  # mm, coarse grid
    rotation_step: float = 5.0  # degrees, coarse grid
    max_iter: int = 60
    tol_translation: float = 0.05  # mm
    tol_rotation: float = 0.05  # degrees
    max_residual: float | None = None
    echo: int = 0


def register_rigid(fixed: Volume, fixed_mask: Mask, moving: Volume, moving_mask: Mask,
                   config: RegistrationConfig = RegistrationConfig()) -> RigidTransform:
    """Rigid transform T (fixed frame -> moving frame) minimising in-mask MSE."""
    if fixed.dims != fixed_mask.dims or moving.dims != moving_mask.dims:
        raise ShapeMismatch("volume and mask dims differ")
    if fixed_mask.count == 0 or moving_mask.count == 0:
        raise NoOverlap("empty mask")
    if fixed.spacing != moving.spacing:
        raise ShapeMismatch("fixed and moving spacing differ")
    spacing = np.asarray(fixed.spacing)
    center = volume_center(fixed.dims, spacing)
    fz = _zscore(fixed, fixed_mask, config.echo)
    mz = _zscore(moving, moving_mask, config.echo)
    fc = np.argwhere(fixed_mask.data).mean(axis=0) * spacing
    mc = np.argwhere(moving_mask.data).mean(axis=0) * spacing
    fext = np.ptp(np.argwhere(fixed_mask.data), axis=0) * spacing
    if np.any(np.abs(fc - mc) > fext / 2 + config.max_translation + np.ptp(np.argwhere(moving_mask.data), axis=0) * spacing / 2):
        raise NoOverlap("masks are too far apart to overlap within the search range")

    levels = [_level(fz, fixed_mask.data, mz, spacing, f) for f in config.factors]
    params = np.zeros(6)
    params[3:] = mc - fc  # start from mask-centroid alignment, clipped to the search box
    params[3:] = np.clip(params[3:], -config.max_translation, config.max_translation)

    # coarse exhaustive search at the coarsest level
    lv = levels[0]
    tmax, tstep = config.max_translation, config.translation_step
    grid_t = np.arange(-tmax, tmax + 1e-9, tstep)
    best = (_cost(lv, params, center), params.copy())
    for tx, ty, tz in itertools.product(grid_t, grid_t, grid_t):
        p = np.array([0, 0, 0, tx, ty, tz], dtype=np.float64)
        c = _cost(lv, p, center)
        if c < best[0]:
            best = (c, p)
    rmax, rstep = np.deg2rad(config.max_rotation), np.deg2rad(config.rotation_step)
    grid_r = np.arange(-rmax, rmax + 1e-9, rstep)
    base = best[1].copy()
    for ax, ay, az in itertools.product(grid_r, grid_r, grid_r):
        p = base.copy()
        p[:3] = (ax, ay, az)
        c = _cost(lv, p, center)
        if c < best[0]:
            best = (c, p)
    if not np.isfinite(best[0]):
        raise NoOverlap("no transform in the search range overlaps the masks")
    params = best[1]

    # coordinate descent, coarse to fine
    tol = np.r_[np.full(3, np.deg2rad(config.tol_rotation)), np.full(3, config.tol_translation)]
    cost = best[0]
    for lv in levels:
        step = np.r_[np.full(3, np.deg2rad(2.0)), np.full(3, lv.factor * spacing.min())]
        cost = _cost(lv, params, center)
        for _ in range(config.max_iter):
            improved = False
            for i in range(6):
                for sign in (1.0, -1.0):
                    p = params.copy()
                    p[i] += sign * step[i]
                    c = _cost(lv, p, center)
                    if c < cost:
                        params, cost, improved = p, c, True
                        break
            if not improved:
                step = step / 2
                if np.all(step < tol):
                    break
        log.debug("level %dx: cost %.6f params %s", lv.factor, cost, params)
    if config.max_residual is not None and not cost <= config.max_residual:
        raise DidNotConverge(f"residual {cost:.4g} above {config.max_residual}")
    return RigidTransform(params[:3], params[3:], center)
