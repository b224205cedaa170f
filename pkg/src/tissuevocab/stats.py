"""Welch t-test, Bonferroni, permutation tests, Pearson correlation and odds ratios."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import betainc

from . import seeding
from .errors import DegenerateVariance, EmptyGroup, TooFewSamples

DEFAULT_N_PERM = 10_000


@dataclass
class TestResult:
    __test__ = False  # not a pytest class

    statistic: float
    p: float
    p_corrected: float | None = None
    n_a: int = 0
    n_b: int = 0
    method: str = ""

    def as_row(self) -> dict:
        return {"statistic": self.statistic, "p": self.p, "p_corr": self.p_corrected,
                "n_a": self.n_a, "n_b": self.n_b, "method": self.method}


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if not math.isfinite(t):
        return 0.0
    x = df / (df + t * t)
    return float(min(1.0, max(0.0, betainc(df / 2, 0.5, x))))


def t_test(a, b) -> TestResult:
    """Welch's unequal-variance two-sample t-test, two-sided."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise TooFewSamples(f"t-test needs >= 2 samples per group, got {len(a)} and {len(b)}")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    if se2 <= 0:
        raise DegenerateVariance("both groups have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2 * se2 / (va * va / (len(a) - 1) + vb * vb / (len(b) - 1))
    return TestResult(float(t), t_sf_two_sided(t, df), None, len(a), len(b), "welch-t")


def bonferroni(ps: Sequence[float], m: int | None = None) -> list[float]:
    m = len(ps) if m is None else m
    if m < 1:
        raise ValueError("m must be >= 1")
    return [min(1.0, float(p) * m) for p in ps]


# -- permutation tests ------------------------------------------------------

def _canonical(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Order the two groups independently of how they were passed in."""
    ka = (a.shape[0], tuple(np.sort(a, axis=0).ravel().tolist()))
    kb = (b.shape[0], tuple(np.sort(b, axis=0).ravel().tolist()))
    return (a, b, False) if ka <= kb else (b, a, True)


def _memberships(n: int, n_a: int, n_perm: int, seed: int) -> tuple[np.ndarray, bool]:
    """Rows mark group-a members for each relabelling; exhaustive when affordable."""
    total = math.comb(n, n_a)
    if total <= n_perm:
        G = np.zeros((total, n), dtype=np.float64)
        for r, combo in enumerate(itertools.combinations(range(n), n_a)):
            G[r, list(combo)] = 1.0
        return G, True
    rng = seeding.rng(seed, "permutation")
    G = np.zeros((n_perm, n), dtype=np.float64)
    chunk = 4096
    for start in range(0, n_perm, chunk):
        rows = min(chunk, n_perm - start)
        picks = np.argsort(rng.random((rows, n)), axis=1)[:, :n_a]
        np.put_along_axis(G[start : start + rows], picks, 1.0, axis=1)
    return G, False


def permutation_test_many(A, B, n_perm: int = DEFAULT_N_PERM, seed: int = 0) -> list[TestResult]:
    """Difference-of-means permutation tests for every column of A (n_a, m) vs B (n_b, m).

    All columns share the same relabellings. When the number of distinct
    splits is at most ``n_perm`` they are enumerated exactly and
    p = #{|stat| >= |obs|} / #splits; otherwise p = (1 + #) / (1 + n_perm).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if len(A) == 0 or len(B) == 0:
        raise EmptyGroup("permutation test needs two nonempty groups")
    g1, g2, swapped = _canonical(A, B)
    n1, n2 = len(g1), len(g2)
    pooled = np.concatenate([g1, g2])
    obs = g1.mean(axis=0) - g2.mean(axis=0)
    G, exhaustive = _memberships(n1 + n2, n1, n_perm, seed)
    s1 = G @ pooled
    stats = s1 / n1 - (pooled.sum(axis=0) - s1) / n2
    tol = 1e-12 * np.maximum(1.0, np.abs(obs))
    hits = np.sum(np.abs(stats) >= np.abs(obs) - tol, axis=0)
    if exhaustive:
        p = hits / len(G)
        method = "permutation-exact"
    else:
        p = (1 + hits) / (1 + n_perm)
        method = "permutation"
    sign = -1.0 if swapped else 1.0
    na, nb = len(A), len(B)
    return [TestResult(float(sign * o), float(q), None, na, nb, method) for o, q in zip(obs, p)]


def permutation_test(a, b, n_perm: int = DEFAULT_N_PERM, seed: int = 0) -> TestResult:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if len(a) == 0 or len(b) == 0:
        raise EmptyGroup("permutation test needs two nonempty groups")
    if n_perm < 100 and math.comb(len(a) + len(b), len(a)) > n_perm:
        raise ValueError("n_perm must be >= 100 unless it covers every split")
    return permutation_test_many(a, b, n_perm, seed)[0]


# -- correlation and contingency tables -------------------------------------

def pearson(x, y) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ValueError("x and y differ in length")
    n = len(x)
    if n < 3:
        raise TooFewSamples("pearson needs >= 3 pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DegenerateVariance("constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1 - r * r))
    return r, t_sf_two_sided(t, n - 2)


def fisher_exact(table) -> float:
    """Two-sided Fisher exact p: total probability of tables no more likely than the observed one."""
    (a, b), (c, d) = [[int(v) for v in row] for row in table]
    if min(a, b, c, d) < 0:
        raise ValueError("counts must be nonnegative")
    r1, r2, c1 = a + b, c + d, a + c
    n = r1 + r2
    lo, hi = max(0, c1 - r2), min(r1, c1)
    weights = {x: math.comb(r1, x) * math.comb(r2, c1 - x) for x in range(lo, hi + 1)}
    w_obs = weights[a]
    tail = sum(w for w in weights.values() if w <= w_obs)
    return min(1.0, tail / math.comb(n, c1))


def odds_ratio(table) -> tuple[float, float]:
    """(OR, Fisher p) for [[a, b], [c, d]]; +0.5 added to every cell when any cell is zero."""
    (a, b), (c, d) = [[float(v) for v in row] for row in table]
    if min(a, b, c, d) < 0:
        raise ValueError("counts must be nonnegative")
    if min(a, b, c, d) == 0:
        a, b, c, d = a + 0.5, b + 0.5, c + 0.5, d + 0.5
    return (a * d) / (b * c), fisher_exact(table)
