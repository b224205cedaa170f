"""Random forests (classification and regression) grown from bootstrap samples.

Trees are unpruned CART trees: Gini impurity for classification, variance for
regression, a fresh random feature subset at every split, and leaves down to
``min_leaf`` samples. Training rows are put into a canonical order first, so
the fitted forest does not depend on the order in which samples are given.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import seeding
from .errors import (
    BadMagic,
    ChecksumMismatch,
    DegenerateLabels,
    EmptyFeatures,
    IoFailure,
    ShapeMismatch,
    TruncatedFile,
    VersionMismatch,
)

CLASSIFICATION = "classification"
REGRESSION = "regression"


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 500
    max_features: str | int | float = "auto"  # "auto": sqrt(D) classification, D/3 regression
    min_leaf: int = 1
    max_depth: int | None = None
    bootstrap: bool = True

    def n_candidates(self, D: int, task: str) -> int:
        mf = self.max_features
        if mf == "auto":
            m = math.sqrt(D) if task == CLASSIFICATION else D / 3
        elif mf == "sqrt":
            m = math.sqrt(D)
        elif mf == "third":
            m = D / 3
        elif mf in ("all", None):
            m = D
        elif isinstance(mf, float):
            m = mf * D
        else:
            m = int(mf)
        return int(min(D, max(1, math.floor(m))))


@dataclass
class Tree:
    feature: np.ndarray  # (n_nodes,) int, -1 at leaves
    threshold: np.ndarray  # go left when x[feature] <= threshold
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, n_out): class probabilities or the mean target
    gain: np.ndarray  # weighted impurity decrease at each split node

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] >= 0
        while active.any():
            n = node[active]
            go_left = X[rows[active], self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


@dataclass
class Forest:
    trees: list[Tree]
    task: str
    n_features: int
    classes: np.ndarray | None = None
    config: ForestConfig = field(default_factory=ForestConfig)
    seed: int = 0

    @property
    def n_trees(self) -> int:
        return len(self.trees)


# -- fitting ----------------------------------------------------------------

def _best_split(X: np.ndarray, y: np.ndarray, feats: np.ndarray, task: str, min_leaf: int):
    """Best (score, feature, threshold) over ``feats``; ties go to the earliest feature in ``feats``.

    Maximises the children's summed ``||counts||^2 / n`` (Gini) or ``sum^2 / n``
    (variance), which is equivalent to minimising the weighted child impurity.
    """
    n = len(X)
    best = (-np.inf, -1, 0.0)
    if n < 2 * min_leaf or len(feats) == 0:
        return best
    cols = X[:, feats]  # (n, F)
    order = np.argsort(cols, axis=0, kind="stable")
    xs = np.take_along_axis(cols, order, axis=0)
    ok = xs[:-1] < xs[1:]  # cut after row i, (n-1, F)
    if min_leaf > 1:
        ok[: min_leaf - 1] = False
        ok[n - min_leaf :] = False
    if not ok.any():
        return best
    nl = np.arange(1, n, dtype=np.float64)[:, None]
    nr = n - nl
    if task == CLASSIFICATION:
        ys = y[order]  # (n, F, C)
        cl = np.cumsum(ys, axis=0)[:-1]
        cr = y.sum(axis=0) - cl
        score = (cl * cl).sum(axis=2) / nl + (cr * cr).sum(axis=2) / nr
    else:
        ys = y[order]  # (n, F)
        sl = np.cumsum(ys, axis=0)[:-1]
        sr = y.sum() - sl
        score = sl * sl / nl + sr * sr / nr
    score = np.where(ok, score, -np.inf)
    per_feat = score.max(axis=0)
    top = per_feat.max()
    tol = 1e-12 * max(1.0, abs(top))
    j = int(np.flatnonzero(per_feat >= top - tol)[0])
    i = int(np.argmax(score[:, j]))
    a, b = xs[i, j], xs[i + 1, j]
    thr = (a + b) / 2
    if not a <= thr < b:
        thr = a
    return float(score[i, j]), int(feats[j]), float(thr)


def _node_stats(y: np.ndarray, task: str) -> tuple[np.ndarray, float]:
    """(leaf value, n * impurity)."""
    n = len(y)
    if task == CLASSIFICATION:
        c = y.sum(axis=0)
        return c / n, float(n - (c * c).sum() / n)
    mean = float(y.mean())
    return np.array([mean]), float(((y - mean) ** 2).sum())


def _grow(X: np.ndarray, y: np.ndarray, task: str, config: ForestConfig, rng: np.random.Generator) -> Tree:
    D = X.shape[1]
    m = config.n_candidates(D, task)
    feature, threshold, left, right, value, gain = [], [], [], [], [], []

    def new_node(idx):
        v, imp = _node_stats(y[idx], task)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(v)
        gain.append(0.0)
        return len(feature) - 1, imp

    root, root_imp = new_node(np.arange(len(X)))
    stack = [(root, np.arange(len(X)), root_imp, 0)]
    while stack:
        node, idx, imp, depth = stack.pop()
        if imp <= 1e-12 * len(idx) or len(idx) < 2 * config.min_leaf:
            continue
        if config.max_depth is not None and depth >= config.max_depth:
            continue
        perm = rng.permutation(D)
        score, f, thr = _best_split(X[idx], y[idx], perm[:m], task, config.min_leaf)
        if f < 0 and m < D:
            score, f, thr = _best_split(X[idx], y[idx], perm[m:], task, config.min_leaf)
        if f < 0:
            continue
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        ln, limp = new_node(li)
        rn, rimp = new_node(ri)
        feature[node], threshold[node], left[node], right[node] = f, thr, ln, rn
        gain[node] = imp - limp - rimp
        stack.append((rn, ri, rimp, depth + 1))
        stack.append((ln, li, limp, depth + 1))
    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64),
        np.asarray(gain, dtype=np.float64),
    )


def rf_fit(X, y, task: str = CLASSIFICATION, config: ForestConfig = ForestConfig(), seed: int = 0) -> Forest:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise EmptyFeatures(f"feature matrix has shape {X.shape}")
    if len(y) != len(X):
        raise ShapeMismatch(f"{len(X)} rows but {len(y)} labels")
    if len(X) < 2:
        raise DegenerateLabels("need at least 2 samples")
    if task == CLASSIFICATION:
        classes, codes = np.unique(y, return_inverse=True)
        if len(classes) < 2:
            raise DegenerateLabels(f"single class {classes.tolist()}")
        target_raw = codes.astype(np.float64)
    elif task == REGRESSION:
        classes = None
        target_raw = y.astype(np.float64)
        if not np.all(np.isfinite(target_raw)):
            raise ValueError("regression targets must be finite")
    else:
        raise ValueError(f"unknown task {task!r}")
    order = np.lexsort(tuple([target_raw] + [X[:, j] for j in range(X.shape[1])]))
    X = X[order]
    target_raw = target_raw[order]
    target = np.eye(len(classes))[target_raw.astype(np.int64)] if classes is not None else target_raw
    n = len(X)
    trees = []
    for t in range(config.n_trees):
        r = seeding.rng(seed, "tree", t)
        idx = r.integers(0, n, size=n) if config.bootstrap else np.arange(n)
        trees.append(_grow(X[idx], target[idx], task, config, r))
    return Forest(trees, task, X.shape[1], classes, config, seed)


# -- prediction -------------------------------------------------------------

def rf_predict(forest: Forest, X) -> np.ndarray:
    """Class-probability rows (classification) or mean leaf values (regression)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise ShapeMismatch(f"expected {forest.n_features} features, got shape {X.shape}")
    acc = None
    for tree in forest.trees:
        p = tree.predict(X)
        acc = p if acc is None else acc + p
    out = acc / forest.n_trees
    return out if forest.task == CLASSIFICATION else out[:, 0]


def rf_predict_labels(forest: Forest, X) -> np.ndarray:
    proba = rf_predict(forest, X)
    return forest.classes[np.argmax(proba, axis=1)]


def rf_feature_importance(forest: Forest) -> np.ndarray:
    """Mean impurity decrease per feature, normalized per tree and overall to sum 1."""
    total = np.zeros(forest.n_features)
    for tree in forest.trees:
        imp = np.zeros(forest.n_features)
        split = tree.feature >= 0
        np.add.at(imp, tree.feature[split], tree.gain[split])
        s = imp.sum()
        if s > 0:
            total += imp / s
    s = total.sum()
    return total / s if s > 0 else total


# -- serialization ----------------------------------------------------------

FOREST_MAGIC = b"RFST1"
FOREST_VERSION = 1


def encode_forest(forest: Forest) -> bytes:
    header = {
        "format_version": FOREST_VERSION,
        "task": forest.task,
        "n_features": forest.n_features,
        "classes": None if forest.classes is None else forest.classes.tolist(),
        "config": asdict(forest.config),
        "seed": forest.seed,
        "nodes": [t.n_nodes for t in forest.trees],
        "n_out": int(forest.trees[0].value.shape[1]) if forest.trees else 0,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = []
    for t in forest.trees:
        parts += [t.feature.astype("<i8"), t.threshold.astype("<f8"), t.left.astype("<i8"),
                  t.right.astype("<i8"), t.value.astype("<f8"), t.gain.astype("<f8")]
    body = FOREST_MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(p.tobytes() for p in parts)
    return body + hashlib.sha256(body).digest()


def decode_forest(buf: bytes) -> Forest:
    if buf[:5] != FOREST_MAGIC:
        raise BadMagic("not an RFST1 forest file")
    if len(buf) < 9 + 32:
        raise TruncatedFile("forest file truncated")
    body, digest = buf[:-32], buf[-32:]
    (hlen,) = struct.unpack_from("<I", body, 5)
    if 9 + hlen > len(body):
        raise TruncatedFile("forest header truncated")
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch("forest checksum mismatch")
    header = json.loads(body[9 : 9 + hlen])
    if header.get("format_version") != FOREST_VERSION:
        raise VersionMismatch(f"forest format {header.get('format_version')} unsupported")
    off = 9 + hlen
    n_out = header["n_out"]
    trees = []

    def take(dtype, count):
        nonlocal off
        size = np.dtype(dtype).itemsize * count
        if off + size > len(body):
            raise TruncatedFile("forest payload truncated")
        a = np.frombuffer(body, dtype=dtype, count=count, offset=off).copy()
        off += size
        return a

    for n in header["nodes"]:
        f, th, le, ri = take("<i8", n), take("<f8", n), take("<i8", n), take("<i8", n)
        val = take("<f8", n * n_out).reshape(n, n_out)
        g = take("<f8", n)
        trees.append(Tree(f.astype(np.int64), th, le.astype(np.int64), ri.astype(np.int64), val, g))
    cfg = ForestConfig(**header["config"])
    classes = None if header["classes"] is None else np.asarray(header["classes"])
    return Forest(trees, header["task"], header["n_features"], classes, cfg, header["seed"])


def save_forest(forest: Forest, path: str | os.PathLike) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(encode_forest(forest))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_forest(path: str | os.PathLike) -> Forest:
    with open(path, "rb") as fh:
        return decode_forest(fh.read())
