"""Longitudinal analyses: difference signatures, tissue-transition matrices,
treatment-response regression and signature phenotypes."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import stats
from .errors import CodebookMismatch, DegenerateVariance, LayoutMismatch, ShapeMismatch, TooManyClusters
from .evaluation import stratified_kfold
from .forest import REGRESSION, ForestConfig, rf_fit, rf_predict
from .hierarchy import agglomerate, cut_dendrogram
from .registration import RigidTransform
from .signatures import ClusterMap, Signature

log = logging.getLogger(__name__)


# -- difference signatures --------------------------------------------------

@dataclass
class DifferenceSignature:
    values: np.ndarray
    layout: list[tuple[str, int]]
    subject_id: str = ""
    treatment: str | None = None


def difference_signature(baseline: Signature, followup: Signature, subject_id: str = "",
                         treatment: str | None = None) -> DifferenceSignature:
    if list(baseline.layout) != list(followup.layout):
        raise LayoutMismatch(f"{baseline.layout} vs {followup.layout}")
    return DifferenceSignature(followup.values - baseline.values, list(baseline.layout), subject_id, treatment)


# -- transitions ------------------------------------------------------------

@dataclass
class TransitionMatrix:
    probs: np.ndarray  # (K, K), rows with counts sum to 1
    counts: np.ndarray  # (K, K) int
    sequence_id: str = ""
    group: str = ""

    @property
    def K(self) -> int:
        return int(self.counts.shape[0])


def transition_matrix(map_t0: ClusterMap, map_t1: ClusterMap, transform: RigidTransform | None = None,
                      spacing=(1.0, 1.0, 1.0), group: str = "") -> TransitionMatrix:
    """Count label pairs (t0 label, t1 label) over matched positions.

    ``transform`` maps baseline world coordinates (mm) into the follow-up
    frame. Each baseline position takes the label of the nearest follow-up
    position within one stride (in voxels); positions with no such neighbour
    are dropped.
    """
    if map_t0.K != map_t1.K or map_t0.sequence_id != map_t1.sequence_id:
        raise CodebookMismatch(f"maps from different codebooks: K {map_t0.K}/{map_t1.K}, "
                               f"sequence {map_t0.sequence_id!r}/{map_t1.sequence_id!r}")
    K = map_t0.K
    counts = np.zeros((K, K), dtype=np.int64)
    if len(map_t0) and len(map_t1):
        spacing = np.asarray(spacing, dtype=np.float64)
        pts = map_t0.positions.astype(np.float64)
        if transform is not None and not transform.is_identity:
            pts = transform.apply(pts * spacing) / spacing
        radius = max(map_t0.stride, map_t1.stride)
        dist, idx = cKDTree(map_t1.positions.astype(np.float64)).query(pts, k=1, distance_upper_bound=radius + 1e-9)
        hit = np.isfinite(dist)
        np.add.at(counts, (map_t0.labels[hit], map_t1.labels[idx[hit]]), 1)
    return TransitionMatrix(row_normalize(counts), counts, map_t0.sequence_id, group)


def row_normalize(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)


def pooled_transition(mats: Sequence[TransitionMatrix]) -> TransitionMatrix:
    counts = sum(m.counts for m in mats)
    return TransitionMatrix(row_normalize(counts), counts, mats[0].sequence_id, mats[0].group)


@dataclass
class TransitionComparison:
    tests: list[list[stats.TestResult]]  # K x K
    mean_a: np.ndarray  # mean per-subject frequency
    mean_b: np.ndarray
    incidence_a: np.ndarray  # fraction of subjects whose frequency exceeds the threshold
    incidence_b: np.ndarray
    pooled_a: np.ndarray  # position-level frequency, pooled over subjects
    pooled_b: np.ndarray

    def p_values(self, corrected: bool = False) -> np.ndarray:
        return np.array([[(t.p_corrected if corrected else t.p) for t in row] for row in self.tests])


def compare_transitions(group_a: Sequence[TransitionMatrix], group_b: Sequence[TransitionMatrix],
                        n_perm: int = stats.DEFAULT_N_PERM, seed: int = 0, correct: bool = True,
                        incidence_threshold: float = 0.0) -> TransitionComparison:
    """Per-cell permutation tests on per-subject transition frequencies.

    Rows a subject never visits count as frequency 0. With ``correct`` the
    p-values are Bonferroni-corrected over the K*K cells.
    """
    if not group_a or not group_b:
        raise stats.EmptyGroup("both groups need at least one matrix")
    K = group_a[0].K
    if any(m.K != K for m in [*group_a, *group_b]):
        raise CodebookMismatch("matrices have different K")
    A = np.stack([m.probs.ravel() for m in group_a])
    B = np.stack([m.probs.ravel() for m in group_b])
    results = stats.permutation_test_many(A, B, n_perm, seed)
    if correct:
        for r, pc in zip(results, stats.bonferroni([r.p for r in results], K * K)):
            r.p_corrected = pc
    grid = [results[i * K : (i + 1) * K] for i in range(K)]
    return TransitionComparison(
        grid,
        A.mean(axis=0).reshape(K, K),
        B.mean(axis=0).reshape(K, K),
        (A > incidence_threshold).mean(axis=0).reshape(K, K),
        (B > incidence_threshold).mean(axis=0).reshape(K, K),
        pooled_transition(group_a).probs,
        pooled_transition(group_b).probs,
    )


# -- treatment response -----------------------------------------------------

@dataclass
class ResponseResult:
    subjects: list[str]
    arms: list[str]
    doses: np.ndarray
    predicted: np.ndarray  # out-of-fold predicted dose
    folds: np.ndarray
    pairs: list[tuple[str, str, stats.TestResult]]
    audit: list[dict] = field(default_factory=list)


def response_analysis(diffs: Sequence[DifferenceSignature], arms: Sequence[str], doses: Mapping[str, float],
                      k: int = 5, seed: int = 0, config: ForestConfig = ForestConfig()) -> ResponseResult:
    """Out-of-fold random-forest regression of dose on difference signatures,
    then Welch t-tests on predicted dose for every pair of arms (Bonferroni over pairs)."""
    if len(diffs) != len(arms):
        raise ShapeMismatch("one arm label per difference signature is required")
    layouts = {tuple(d.layout) for d in diffs}
    if len(layouts) > 1:
        raise LayoutMismatch("difference signatures have different layouts")
    X = np.stack([d.values for d in diffs])
    y = np.array([float(doses[a]) for a in arms])
    folds = stratified_kfold(list(arms), k, seed)
    pred = np.full(len(X), np.nan)
    audit = []
    for f in range(k):
        test = np.flatnonzero(folds == f)
        train = np.flatnonzero(folds != f)
        if len(test) == 0:
            continue
        forest = rf_fit(X[train], y[train], REGRESSION, config, seed + f)
        pred[test] = rf_predict(forest, X[test])
        audit.append({"fold": f, "train": [diffs[i].subject_id for i in train],
                      "test": [diffs[i].subject_id for i in test]})
    order = sorted(set(arms), key=lambda a: (doses[a], a))
    arms_arr = np.asarray(arms)
    pairs = []
    for a, b in itertools.combinations(order, 2):
        pairs.append((a, b, _pair_test(pred[arms_arr == a], pred[arms_arr == b])))
    corrected = stats.bonferroni([t.p for _, _, t in pairs])
    for (_, _, t), pc in zip(pairs, corrected):
        t.p_corrected = pc
    return ResponseResult([d.subject_id for d in diffs], list(arms), y, pred, folds, pairs, audit)


def _pair_test(a: np.ndarray, b: np.ndarray) -> stats.TestResult:
    try:
        return stats.t_test(a, b)
    except DegenerateVariance:
        # constant predictions within both arms: perfectly separated or identical
        diff = float(a.mean() - b.mean())
        stat = math.copysign(math.inf, diff) if diff else 0.0
        return stats.TestResult(stat, 0.0 if diff else 1.0, None, len(a), len(b), "welch-t-degenerate")


# -- phenotypes -------------------------------------------------------------

@dataclass
class PhenotypeAssignment:
    subjects: list[str]
    labels: np.ndarray  # 1..P, 1 = largest phenotype
    P: int

    def as_dict(self) -> dict[str, int]:
        return dict(zip(self.subjects, self.labels.tolist()))


def discover_phenotypes(signatures, P: int = 7, subjects: Sequence[str] | None = None) -> PhenotypeAssignment:
    X = np.asarray(signatures, dtype=np.float64)
    if P > len(X):
        raise TooManyClusters(f"P={P} exceeds {len(X)} subjects")
    subjects = list(subjects) if subjects is not None else [str(i) for i in range(len(X))]
    raw = cut_dendrogram(agglomerate(X), P)
    sizes = np.bincount(raw, minlength=P)
    first = np.array([np.flatnonzero(raw == c)[0] for c in range(P)])
    ranking = sorted(range(P), key=lambda c: (-sizes[c], first[c]))
    relabel = np.empty(P, dtype=np.int64)
    relabel[ranking] = np.arange(1, P + 1)
    return PhenotypeAssignment(subjects, relabel[raw], P)


def phenotype_associations(assignment: PhenotypeAssignment, grades: Mapping[str, Mapping[str, int]],
                           alpha: float = 0.05) -> list[dict]:
    """One row per (phenotype, grade name, grade level): 2x2 table, OR, Fisher p and a flag.

    The table is [[in phenotype & at level, in phenotype & not], [not & at level, not & not]];
    OR > 1 means the level is over-represented in the phenotype.
    """
    pheno = assignment.as_dict()
    names = sorted({g for s in grades.values() for g in s})
    rows = []
    for name in names:
        subs = [s for s in assignment.subjects if s in grades and grades[s].get(name) is not None]
        levels = sorted({grades[s][name] for s in subs})
        for p in range(1, assignment.P + 1):
            inside = np.array([pheno[s] == p for s in subs])
            for level in levels:
                at = np.array([grades[s][name] == level for s in subs])
                a, b = int(np.sum(inside & at)), int(np.sum(inside & ~at))
                c, d = int(np.sum(~inside & at)), int(np.sum(~inside & ~at))
                orr, pv = stats.odds_ratio([[a, b], [c, d]])
                flag = ("over" if orr > 1 else "under") if pv < alpha else ""
                rows.append({"phenotype": p, "grade": name, "level": level, "a": a, "b": b, "c": c, "d": d,
                             "odds_ratio": orr, "p": pv, "flag": flag})
    return rows
