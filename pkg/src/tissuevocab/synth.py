"""Synthetic multi-sequence longitudinal cohorts with planted ground truth.

Each subject has an ellipsoidal organ mask split into Voronoi regions. Every
region carries one tissue class; each class has its own texture per sequence
(a Gaussian random field with given mean, std and correlation length). The
baseline class of a region is drawn from the subject's class composition; at
follow-up every region is relabelled through its arm's transition kernel.
Grades are a deterministic function of the true class proportions.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import seeding
from .errors import SpecInvalid
from .volume_store import (
    Mask,
    SubjectRecord,
    Visit,
    Volume,
    write_labels,
    write_manifest,
    write_mask,
    write_volume,
)

log = logging.getLogger(__name__)

VISITS = ("baseline", "followup")


@dataclass(frozen=True)
class ClassTexture:
    mean: float
    std: float = 1.0
    corr_len: float = 1.5  # in-plane Gaussian smoothing sigma, voxels
    decay: float = 1.0  # per-echo multiplicative factor


@dataclass
class SequenceSpec:
    name: str
    classes: list[ClassTexture]
    echoes: int = 1
    background: float = 0.0


@dataclass
class ArmSpec:
    name: str
    dose: float
    n_subjects: int
    kernel: np.ndarray  # (K, K) row-stochastic

    def __post_init__(self) -> None:
        self.kernel = np.asarray(self.kernel, dtype=np.float64)


@dataclass(frozen=True)
class GradeRule:
    """grade = number of thresholds <= weights . proportions"""

    name: str
    weights: tuple[float, ...]
    thresholds: tuple[float, ...]

    def grade(self, proportions: np.ndarray) -> int:
        score = float(np.dot(self.weights, proportions))
        return int(np.searchsorted(np.asarray(self.thresholds), score, side="right"))


@dataclass
class CohortSpec:
    arms: list[ArmSpec]
    sequences: list[SequenceSpec]
    k_true: int
    profiles: list[tuple[float, ...]]  # Dirichlet concentration per phenotype
    grade_rules: list[GradeRule] = field(default_factory=list)
    dims: tuple[int, int, int] = (96, 96, 24)
    spacing: tuple[float, float, float] = (1.5, 1.5, 3.0)
    n_regions: int = 48
    mask_radii: tuple[float, float, float] = (0.46, 0.44, 0.46)
    gain_sd: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        K = self.k_true
        if K < 1:
            raise SpecInvalid("k_true must be >= 1")
        if not self.arms or not self.sequences:
            raise SpecInvalid("need at least one arm and one sequence")
        for arm in self.arms:
            k = arm.kernel
            if k.shape != (K, K) or np.any(k < 0) or not np.allclose(k.sum(axis=1), 1.0, atol=1e-9):
                raise SpecInvalid(f"arm {arm.name}: kernel must be a {K}x{K} row-stochastic matrix")
            if arm.n_subjects < 0:
                raise SpecInvalid(f"arm {arm.name}: negative subject count")
        for seq in self.sequences:
            if len(seq.classes) != K:
                raise SpecInvalid(f"sequence {seq.name}: expected {K} class textures")
            if seq.echoes < 1:
                raise SpecInvalid(f"sequence {seq.name}: echoes must be >= 1")
        for prof in self.profiles:
            if len(prof) != K or min(prof) <= 0:
                raise SpecInvalid("each profile needs K positive concentrations")
        for rule in self.grade_rules:
            if len(rule.weights) != K:
                raise SpecInvalid(f"grade rule {rule.name}: expected {K} weights")
        if self.n_regions < 1 or min(self.dims) < 1:
            raise SpecInvalid("n_regions and dims must be positive")
        for a in range(K):
            for b in range(a + 1, K):
                if not any(_separated(s.classes[a], s.classes[b]) for s in self.sequences):
                    raise SpecInvalid(f"classes {a} and {b} are not separable in any sequence")

    @property
    def n_subjects(self) -> int:
        return sum(a.n_subjects for a in self.arms)


def _separated(a: ClassTexture, b: ClassTexture) -> bool:
    pooled = np.sqrt((a.std**2 + b.std**2) / 2)
    return abs(a.mean - b.mean) >= 3 * pooled


def default_spec(n_per_arm: int = 16, dims=(96, 96, 24), seed: int = 0, n_regions: int = 48) -> CohortSpec:
    """3 sequences (1, 2 and 6 echoes), 5 tissue classes, 3 arms with a dose-dependent 0 -> 4 shift."""
    K = 5
    t1w = SequenceSpec("t1w", [ClassTexture(0.0, 1.0, 1.0), ClassTexture(3.0, 1.0, 2.5), ClassTexture(6.0, 1.0, 1.0),
                               ClassTexture(9.0, 1.0, 2.5), ClassTexture(12.0, 1.0, 1.5)])
    dixon = SequenceSpec("dixon", [ClassTexture(9.0, 1.0, 2.0, 0.6), ClassTexture(0.0, 1.0, 1.0, 1.0),
                                   ClassTexture(12.0, 1.0, 2.0, 0.9), ClassTexture(3.0, 1.0, 1.0, 0.7),
                                   ClassTexture(6.0, 1.0, 1.5, 1.0)], echoes=2)
    six = SequenceSpec("sixecho", [ClassTexture(12.0, 1.0, 1.5, 0.8), ClassTexture(6.0, 1.0, 1.5, 0.95),
                                   ClassTexture(0.0, 1.0, 2.0, 0.9), ClassTexture(3.0, 1.0, 1.0, 0.97),
                                   ClassTexture(9.0, 1.0, 1.0, 0.85)], echoes=6)
    eye = np.eye(K)

    def resolve(p: float) -> np.ndarray:
        # every class but the last drifts into the last one with probability p
        k = 0.96 * eye + 0.01 * (1 - eye)
        k[:-1] *= 1 - p
        k[:-1, -1] += p
        return k

    arms = [ArmSpec("placebo", 0.0, n_per_arm, resolve(0.0)),
            ArmSpec("low", 1.0, n_per_arm, resolve(0.25)),
            ArmSpec("high", 2.0, n_per_arm, resolve(0.5))]
    lo, hi = 1.5, 10.0
    profiles = [tuple(hi if j == i else lo for j in range(K)) for i in range(K - 1)]
    rules = [
        GradeRule("steatosis", (1, 0, 0, 0, 0), (0.15, 0.35, 0.55)),
        GradeRule("ballooning", (0, 1, 0, 0, 0), (0.15, 0.35)),
        GradeRule("inflammation", (0, 0, 1, 0, 0), (0.15, 0.35, 0.55)),
        GradeRule("fibrosis", (0, 0, 0, 1, 0), (0.15, 0.35, 0.55)),
    ]
    return CohortSpec(arms, [t1w, dixon, six], K, profiles, rules, dims=dims, seed=seed, n_regions=n_regions)


# -- generation -------------------------------------------------------------

@dataclass
class SyntheticVisit:
    visit_id: str
    volumes: dict[str, Volume]
    mask: Mask
    truth: np.ndarray  # (nx, ny, nz) int, -1 outside the mask
    region_classes: np.ndarray

    @property
    def proportions(self) -> np.ndarray:
        return class_proportions(self.truth, int(self.region_classes.max(initial=0)) + 1)


@dataclass
class SyntheticSubject:
    subject_id: str
    arm: str
    dose: float
    phenotype: int
    labels: dict
    visits: dict[str, SyntheticVisit]


def class_proportions(truth: np.ndarray, K: int) -> np.ndarray:
    inside = truth[truth >= 0]
    return np.bincount(inside, minlength=K)[:K] / max(len(inside), 1)


def ellipsoid_mask(dims: Sequence[int], radii: Sequence[float]) -> Mask:
    grids = np.meshgrid(*[np.arange(d) for d in dims], indexing="ij")
    r = np.zeros(dims)
    for g, d, f in zip(grids, dims, radii):
        c = (d - 1) / 2
        r += ((g - c) / max(f * d, 1e-9)) ** 2
    return Mask(r <= 1.0)


def gaussian_field(shape: Sequence[int], corr_len: float, rng: np.random.Generator,
                   spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Unit-variance Gaussian random field by separable smoothing of white noise."""
    noise = rng.standard_normal(shape)
    if corr_len <= 0:
        return noise
    sig = [corr_len * spacing[0] / s for s in spacing][: len(shape)]
    f = ndimage.gaussian_filter(noise, sigma=sig, mode="wrap")
    sd = f.std()
    return f / sd if sd > 0 else f


def _regions(mask: Mask, n: int, spacing, rng) -> np.ndarray:
    fg = np.argwhere(mask.data)
    seeds = fg[rng.choice(len(fg), size=min(n, len(fg)), replace=False)]
    scale = np.asarray(spacing, dtype=np.float64)
    _, idx = cKDTree(seeds * scale).query(fg * scale)
    region = np.full(mask.dims, -1, dtype=np.int64)
    region[tuple(fg.T)] = idx
    return region


def _render(spec: CohortSpec, seq: SequenceSpec, truth: np.ndarray, gain: float, rng) -> Volume:
    dims = spec.dims
    data = np.full(dims + (seq.echoes,), seq.background, dtype=np.float64)
    data += 0.1 * rng.standard_normal(data.shape)
    for k, tex in enumerate(seq.classes):
        where = truth == k
        if not where.any():
            rng.standard_normal(1)
            continue
        field_ = gaussian_field(dims, tex.corr_len, rng, spec.spacing)[where]
        for e in range(seq.echoes):
            f = tex.decay**e
            data[where, e] = f * (tex.mean + tex.std * field_)
    return Volume((gain * data).astype(np.float32), spacing=spec.spacing, sequence_id=seq.name)


def generate_subject(spec: CohortSpec, index: int) -> SyntheticSubject:
    arm_of = [arm for arm in spec.arms for _ in range(arm.n_subjects)]
    arm = arm_of[index]
    sid = f"S{index:03d}"
    r = seeding.rng(spec.seed, "subject", index)
    K = spec.k_true
    phenotype = int(r.integers(len(spec.profiles)))
    composition = r.dirichlet(spec.profiles[phenotype])
    mask = ellipsoid_mask(spec.dims, spec.mask_radii)
    region = _regions(mask, spec.n_regions, spec.spacing, r)
    n_reg = int(region.max()) + 1
    base = r.choice(K, size=n_reg, p=composition)
    follow = np.array([r.choice(K, p=arm.kernel[c]) for c in base], dtype=np.int64)
    gain = float(np.exp(spec.gain_sd * r.standard_normal()))
    visits = {}
    for vid, classes in zip(VISITS, (base, follow)):
        truth = np.where(region >= 0, classes[np.maximum(region, 0)], -1)
        vr = seeding.rng(spec.seed, "texture", index, vid)
        vols = {seq.name: _render(spec, seq, truth, gain, vr) for seq in spec.sequences}
        visits[vid] = SyntheticVisit(vid, vols, mask, truth, classes)
    labels = {"arm": arm.name, "dose": arm.dose, "phenotype": phenotype}
    base_props = class_proportions(visits["baseline"].truth, K)
    for rule in spec.grade_rules:
        labels[rule.name] = rule.grade(base_props)
    return SyntheticSubject(sid, arm.name, arm.dose, phenotype, labels, visits)


def iter_cohort(spec: CohortSpec) -> Iterator[SyntheticSubject]:
    spec.validate()
    for i in range(spec.n_subjects):
        yield generate_subject(spec, i)


def generate_cohort(spec: CohortSpec) -> list[SyntheticSubject]:
    return list(iter_cohort(spec))


def ground_truth_maps(cohort: Sequence[SyntheticSubject]) -> dict[tuple[str, str], np.ndarray]:
    return {(s.subject_id, v.visit_id): v.truth for s in cohort for v in s.visits.values()}


def write_cohort(spec: CohortSpec, out_dir: str | os.PathLike) -> Path:
    """Stream the cohort to disk as VVOL1 files plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    records = []
    for subj in iter_cohort(spec):
        visits = {}
        for vid, v in subj.visits.items():
            base = out / subj.subject_id / vid
            seqs = {}
            for name, vol in v.volumes.items():
                p = base / f"{name}.vvol"
                write_volume(vol, p)
                seqs[name] = p
            write_mask(v.mask, base / "mask.vvol", spec.spacing)
            write_labels(v.truth, base / "truth.vvol", spec.spacing)
            vlabels = {}
            props = class_proportions(v.truth, spec.k_true)
            for rule in spec.grade_rules:
                vlabels[rule.name] = rule.grade(props)
            visits[vid] = Visit(vid, seqs, base / "mask.vvol", vlabels, base / "truth.vvol")
        records.append(SubjectRecord(subj.subject_id, visits, subj.labels))
        log.info("wrote %s", subj.subject_id)
    manifest = out / "manifest.json"
    write_manifest(records, manifest)
    return manifest


# -- planted patch sets -----------------------------------------------------

def planted_texture_patches(n: int, textures: Sequence[ClassTexture], s: int = 32, seed: int = 0
                            ) -> tuple[np.ndarray, np.ndarray]:
    """``n`` single-channel patches (n, 1, s, s), each a pure texture of a random class.

    The set is z-scored jointly, mirroring per-volume normalization.
    """
    rng = seeding.rng(seed, "planted")
    labels = np.sort(rng.integers(len(textures), size=n))
    labels = labels[rng.permutation(n)]
    out = np.empty((n, 1, s, s), dtype=np.float64)
    for i, k in enumerate(labels):
        t = textures[k]
        out[i, 0] = t.mean + t.std * gaussian_field((s, s), t.corr_len, rng, (1.0, 1.0))
    out = (out - out.mean()) / out.std()
    return out.astype(np.float32), labels
