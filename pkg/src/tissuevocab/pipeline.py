"""End-to-end analysis steps over a cohort manifest.

A *unit* is what one DCN is trained on: a single sequence under signature
fusion (SF), or the channel-stacked sequences under image fusion (IF).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import dcn, nn, seeding
from .config import RunConfig
from .errors import MissingSequence
from .evaluation import classification_metrics, stratified_kfold
from .forest import CLASSIFICATION, ForestConfig, rf_fit, rf_predict
from .longitudinal import (
    DifferenceSignature,
    TransitionMatrix,
    compare_transitions,
    difference_signature,
    discover_phenotypes,
    phenotype_associations,
    response_analysis,
    transition_matrix,
)
from .patches import PatchSet, sample_training_patches
from .registration import RegistrationConfig, RigidTransform, register_rigid
from .signatures import ClusterMap, Signature, cluster_map, fuse_signatures, fused_id, image_fuse, signature
from .volume_store import Mask, SubjectRecord, Visit, Volume

log = logging.getLogger(__name__)

BASELINE, FOLLOWUP = "baseline", "followup"


@dataclass(frozen=True)
class Unit:
    name: str
    sequences: tuple[str, ...]
    K: int


def units(cfg: RunConfig) -> list[Unit]:
    if cfg.fusion == "IF":
        return [Unit(fused_id(cfg.sequences), tuple(cfg.sequences), cfg.clusters_fused)]
    return [Unit(s, (s,), cfg.clusters) for s in cfg.sequences]


def unit_volume(visit: Visit, unit: Unit, cfg: RunConfig) -> Volume:
    missing = [s for s in unit.sequences if s not in visit.sequences]
    if missing:
        raise MissingSequence(f"visit {visit.visit_id} lacks {missing}")
    if len(unit.sequences) == 1:
        return visit.volume(unit.sequences[0])
    vols = {s: visit.volume(s) for s in unit.sequences}
    # sequences of one visit are acquired in the same frame
    transforms = {s: None for s in unit.sequences}
    return image_fuse(vols, cfg.reference_sequence, transforms, unit.sequences)


def iter_visits(subjects: Sequence[SubjectRecord]) -> Iterable[tuple[SubjectRecord, Visit]]:
    for s in subjects:
        for vid in sorted(s.visits):
            yield s, s.visits[vid]


# -- training ---------------------------------------------------------------

def sample_unit(subjects: Sequence[SubjectRecord], unit: Unit, cfg: RunConfig) -> PatchSet:
    pairs, ids = [], []
    for s, v in iter_visits(subjects):
        pairs.append((unit_volume(v, unit, cfg), v.load_mask()))
        ids.append((s.subject_id, v.visit_id, unit.name))
    M = max(cfg.n_patches, len(pairs))
    return sample_training_patches(pairs, M, cfg.patch_size, seeding.child_seed(cfg.seed, "unit", unit.name), ids)


def train_config(cfg: RunConfig) -> dcn.TrainConfig:
    return dcn.TrainConfig(batch_size=cfg.batch_size, lr=cfg.lr, momentum=cfg.momentum)


def new_model(unit: Unit, channels: int, cfg: RunConfig) -> nn.ConvAutoencoder:
    arch = nn.Architecture(in_channels=channels, size=cfg.patch_size)
    return nn.ConvAutoencoder(arch, seeding.child_seed(cfg.seed, "unit", unit.name), sequence_id=unit.name)


def pretrain_unit(patches: PatchSet, unit: Unit, cfg: RunConfig) -> dcn.TrainResult:
    model = new_model(unit, patches.channels, cfg)
    return dcn.pretrain(model, patches, cfg.pretrain_epochs, seeding.child_seed(cfg.seed, "unit", unit.name),
                        train_config(cfg))


def train_unit(model: nn.ConvAutoencoder, patches: PatchSet, unit: Unit, cfg: RunConfig) -> dcn.TrainResult:
    return dcn.train_dcn(model, patches, unit.K, cfg.lam, cfg.epochs,
                         seeding.child_seed(cfg.seed, "unit", unit.name), train_config(cfg))


# -- encoding ---------------------------------------------------------------

MapKey = tuple[str, str, str]  # (subject, visit, unit)


def encode_cohort(subjects: Sequence[SubjectRecord], models: dict[str, tuple[nn.ConvAutoencoder, dcn.Codebook]],
                  cfg: RunConfig) -> dict[MapKey, ClusterMap]:
    maps = {}
    for s, v in iter_visits(subjects):
        mask = v.load_mask()
        for unit in units(cfg):
            model, codebook = models[unit.name]
            maps[(s.subject_id, v.visit_id, unit.name)] = cluster_map(
                unit_volume(v, unit, cfg), mask, model, codebook, cfg.stride)
    return maps


def visit_signatures(maps: dict[MapKey, ClusterMap], cfg: RunConfig) -> dict[tuple[str, str], Signature]:
    order = [u.name for u in units(cfg)]
    by_visit: dict[tuple[str, str], dict[str, Signature]] = {}
    for (sid, vid, uname), cmap in maps.items():
        by_visit.setdefault((sid, vid), {})[uname] = signature(cmap)
    return {key: fuse_signatures(sigs, order) for key, sigs in sorted(by_visit.items())}


# -- analyses ---------------------------------------------------------------

def forest_config(cfg: RunConfig) -> ForestConfig:
    return ForestConfig(n_trees=cfg.n_trees)


def grade_prediction(signatures: dict[tuple[str, str], Signature], subjects: Sequence[SubjectRecord],
                     cfg: RunConfig, grade_names: Sequence[str] | None = None, visit: str = BASELINE):
    """Binary low/high grade prediction per grade with stratified k-fold CV.

    Returns (metric rows, per-subject prediction rows).
    """
    labelled = [s for s in subjects if (s.subject_id, visit) in signatures]
    if grade_names is None:
        grade_names = sorted({k for s in labelled for k, v in s.labels.items()
                              if isinstance(v, int) and not isinstance(v, bool) and k not in ("phenotype",)})
    metrics, preds = [], []
    for name in grade_names:
        subs = [s for s in labelled if isinstance(s.labels.get(name), int)]
        X = np.stack([signatures[(s.subject_id, visit)].values for s in subs])
        y = np.array([int(s.labels[name] > cfg.low_max_grade) for s in subs])
        if len(np.unique(y)) < 2:
            log.warning("grade %s has a single class; skipped", name)
            continue
        folds = stratified_kfold(y, cfg.folds, seeding.child_seed(cfg.seed, "folds", name))
        proba = np.full(len(y), np.nan)
        for f in range(cfg.folds):
            test, train = folds == f, folds != f
            if not test.any():
                continue
            if len(np.unique(y[train])) < 2:
                proba[test] = float(y[train][0])
                continue
            forest = rf_fit(X[train], y[train], CLASSIFICATION, forest_config(cfg),
                            seeding.child_seed(cfg.seed, "forest", name, f))
            col = list(forest.classes).index(1)
            proba[test] = rf_predict(forest, X[test])[:, col]
        pred = (proba > 0.5).astype(int)
        m = classification_metrics(y, pred)
        metrics.append({"grade": name, "n": len(y), "n_high": int(y.sum()), **m})
        for s, yt, pr, fo in zip(subs, y, proba, folds):
            preds.append({"grade": name, "subject": s.subject_id, "fold": int(fo), "high": int(yt),
                          "p_high": float(pr), "predicted": int(pr > 0.5)})
    return metrics, preds


def difference_signatures(signatures: dict[tuple[str, str], Signature], subjects: Sequence[SubjectRecord],
                          arm_key: str = "arm") -> list[DifferenceSignature]:
    out = []
    for s in subjects:
        if (s.subject_id, BASELINE) in signatures and (s.subject_id, FOLLOWUP) in signatures:
            out.append(difference_signature(signatures[(s.subject_id, BASELINE)],
                                            signatures[(s.subject_id, FOLLOWUP)], s.subject_id,
                                            s.labels.get(arm_key)))
    return out


def arm_doses(subjects: Sequence[SubjectRecord]) -> dict[str, float]:
    doses = {}
    for s in subjects:
        if "arm" in s.labels:
            doses[s.labels["arm"]] = float(s.labels.get("dose", len(doses)))
    return doses


def response(signatures, subjects: Sequence[SubjectRecord], cfg: RunConfig):
    diffs = [d for d in difference_signatures(signatures, subjects) if d.treatment is not None]
    return response_analysis(diffs, [d.treatment for d in diffs], arm_doses(subjects), cfg.folds,
                             seeding.child_seed(cfg.seed, "response"), forest_config(cfg))


def register_visits(subject: SubjectRecord, cfg: RunConfig) -> RigidTransform:
    ref = cfg.reference_sequence
    b, f = subject.visits[BASELINE], subject.visits[FOLLOWUP]
    return register_rigid(b.volume(ref), b.load_mask(), f.volume(ref), f.load_mask(), RegistrationConfig())


def subject_transitions(maps: dict[MapKey, ClusterMap], subjects: Sequence[SubjectRecord], cfg: RunConfig,
                        transforms: dict[str, RigidTransform] | None = None) -> dict[str, dict[str, TransitionMatrix]]:
    """Per unit, per subject transition matrix (baseline -> follow-up)."""
    out: dict[str, dict[str, TransitionMatrix]] = {}
    for s in subjects:
        if BASELINE not in s.visits or FOLLOWUP not in s.visits:
            continue
        t = (transforms or {}).get(s.subject_id)
        spacing = s.visits[BASELINE].volume(cfg.sequences[0]).spacing if t is not None else (1.0, 1.0, 1.0)
        for unit in units(cfg):
            m0 = maps[(s.subject_id, BASELINE, unit.name)]
            m1 = maps[(s.subject_id, FOLLOWUP, unit.name)]
            out.setdefault(unit.name, {})[s.subject_id] = transition_matrix(
                m0, m1, t, spacing, str(s.labels.get("arm", "")))
    return out


def transition_rows(per_unit: dict[str, dict[str, TransitionMatrix]], subjects: Sequence[SubjectRecord],
                    cfg: RunConfig, control: str | None = None) -> list[dict]:
    """Compare every arm with the control arm (lowest dose), cell by cell."""
    doses = arm_doses(subjects)
    if not doses:
        return []
    arms = sorted(doses, key=lambda a: (doses[a], a))
    control = control or arms[0]
    arm_of = {s.subject_id: s.labels.get("arm") for s in subjects}
    rows = []
    for uname, mats in per_unit.items():
        ctrl = [m for sid, m in sorted(mats.items()) if arm_of[sid] == control]
        for arm in arms:
            if arm == control:
                continue
            grp = [m for sid, m in sorted(mats.items()) if arm_of[sid] == arm]
            if not grp or not ctrl:
                continue
            cmp = compare_transitions(ctrl, grp, cfg.n_perm, seeding.child_seed(cfg.seed, "transitions", uname, arm),
                                      True, cfg.incidence_threshold)
            K = ctrl[0].K
            for i in range(K):
                for j in range(K):
                    t = cmp.tests[i][j]
                    rows.append({"seq": uname, "group_a": control, "group_b": arm, "i": i, "j": j,
                                 "prob_a": cmp.mean_a[i, j], "prob_b": cmp.mean_b[i, j],
                                 "pooled_a": cmp.pooled_a[i, j], "pooled_b": cmp.pooled_b[i, j],
                                 "incidence_a": cmp.incidence_a[i, j], "incidence_b": cmp.incidence_b[i, j],
                                 "p": t.p, "p_corr": t.p_corrected})
    return rows


def phenotypes(signatures, subjects: Sequence[SubjectRecord], cfg: RunConfig, visit: str = BASELINE):
    subs = [s for s in subjects if (s.subject_id, visit) in signatures]
    X = np.stack([signatures[(s.subject_id, visit)].values for s in subs])
    assignment = discover_phenotypes(X, cfg.phenotypes, [s.subject_id for s in subs])
    grades = {s.subject_id: {k: v for k, v in s.labels.items()
                             if isinstance(v, int) and not isinstance(v, bool) and k != "phenotype"}
              for s in subs}
    return assignment, phenotype_associations(assignment, grades)
