"""Cross-validation folds, classification metrics, cluster agreement and density curves."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import seeding


def stratified_kfold(y: Sequence, k: int = 5, seed: int = 0, exclude_at_most: int | None = None) -> np.ndarray:
    """Fold index per sample, or -1 for samples of excluded rare classes.

    Classes are visited in sorted order; each class's members are shuffled and
    dealt round-robin, with the deal position carried over between classes. Fold
    sizes and per-class fold counts therefore differ by at most one.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    y = np.asarray(y)
    folds = np.full(len(y), -1, dtype=np.int64)
    rng = seeding.rng(seed, "kfold")
    pointer = 0
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        if exclude_at_most is not None and len(members) <= exclude_at_most:
            continue
        members = members[rng.permutation(len(members))]
        folds[members] = (pointer + np.arange(len(members))) % k
        pointer = (pointer + len(members)) % k
    return folds


def excluded_classes(y: Sequence, exclude_at_most: int = 5) -> list:
    values, counts = np.unique(np.asarray(y), return_counts=True)
    return [v.item() for v, c in zip(values, counts) if c <= exclude_at_most]


def _ratio(num: int, den: int) -> float:
    return num / den if den else float("nan")


def confusion(y_true, y_pred, positive=1) -> dict[str, int]:
    t = np.asarray(y_true) == positive
    p = np.asarray(y_pred) == positive
    return {"TP": int(np.sum(t & p)), "FP": int(np.sum(~t & p)), "TN": int(np.sum(~t & ~p)), "FN": int(np.sum(t & ~p))}


def classification_metrics(y_true, y_pred, positive=1) -> dict[str, float]:
    c = confusion(y_true, y_pred, positive)
    tp, fp, tn, fn = c["TP"], c["FP"], c["TN"], c["FN"]
    return {
        "Acc": _ratio(tp + tn, tp + fp + tn + fn),
        "PPV": _ratio(tp, tp + fp),
        "NPV": _ratio(tn, tn + fn),
        "Sens": _ratio(tp, tp + fn),
        "Spec": _ratio(tn, tn + fp),
    }


def adjusted_rand_index(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if len(a) != len(b):
        raise ValueError("label arrays differ in length")
    n = len(a)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max(initial=-1) + 1, bi.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    comb2 = lambda x: x * (x - 1) // 2  # noqa: E731
    index = int(comb2(table).sum())
    sa = int(comb2(table.sum(axis=1)).sum())
    sb = int(comb2(table.sum(axis=0)).sum())
    total = math.comb(n, 2)
    if total == 0:
        return 1.0
    expected = sa * sb / total
    maximum = (sa + sb) / 2
    if maximum == expected:
        return 1.0
    return (index - expected) / (maximum - expected)


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    sd = x.std(ddof=1) if n > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25]) if n else (0.0, 0.0)
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * n ** (-1 / 5) if spread > 0 else 1.0


def predicted_density(values, grid, bandwidth: float | None = None) -> np.ndarray:
    """Gaussian kernel density of ``values`` evaluated on ``grid`` (presentation only)."""
    v = np.asarray(values, dtype=np.float64)
    g = np.asarray(grid, dtype=np.float64)
    h = bandwidth or silverman_bandwidth(v)
    z = (g[:, None] - v[None, :]) / h
    return np.exp(-0.5 * z * z).sum(axis=1) / (len(v) * h * math.sqrt(2 * math.pi))
