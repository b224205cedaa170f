"""Average-linkage agglomerative clustering on Euclidean distances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FewerThanTwoPoints, TooManyClusters


@dataclass(frozen=True)
class Merge:
    a: int  # node ids: 0..n-1 are points, n+i is the cluster made by merge i
    b: int
    height: float
    size: int


@dataclass
class Dendrogram:
    merges: list[Merge]
    n: int
    linkage: str = "average"
    metric: str = "euclidean"

    @property
    def heights(self) -> np.ndarray:
        return np.array([m.height for m in self.merges])


def pairwise_distances(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def agglomerate(X) -> Dendrogram:
    """Exact average linkage via the Lance-Williams update.

    Clusters occupy slots; a merge of slots i < j keeps slot i. The pair with
    the smallest distance is merged, ties going to the smallest (i, j).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if n < 2:
        raise FewerThanTwoPoints(f"need at least 2 points, got {n}")
    D = pairwise_distances(X)
    iu = np.triu_indices(n, 1)
    work = np.full((n, n), np.inf)
    work[iu] = D[iu]
    size = np.ones(n, dtype=np.int64)
    node = np.arange(n)
    merges = []
    for step in range(n - 1):
        flat = int(np.argmin(work))
        i, j = divmod(flat, n)
        h = float(work[i, j])
        a, b = sorted((int(node[i]), int(node[j])))
        merges.append(Merge(a, b, h, int(size[i] + size[j])))
        # d(k, i u j) = (n_i d(k,i) + n_j d(k,j)) / (n_i + n_j)
        full = np.minimum(work, work.T)
        new = (size[i] * full[i] + size[j] * full[j]) / (size[i] + size[j])
        size[i] += size[j]
        node[i] = n + step
        lower, upper = np.arange(i), np.arange(i + 1, n)
        work[lower, i] = new[lower]
        work[i, upper] = new[upper]
        work[j, :] = np.inf
        work[:, j] = np.inf
    return Dendrogram(merges, n)


def cut_dendrogram(d: Dendrogram, P: int) -> np.ndarray:
    """Labels 0..P-1 after undoing the P-1 last merges; numbered by first member index."""
    if P > d.n:
        raise TooManyClusters(f"P={P} exceeds {d.n} points")
    if P < 1:
        raise ValueError("P must be >= 1")
    parent = list(range(2 * d.n - 1))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for k, m in enumerate(d.merges[: d.n - P]):
        new = d.n + k
        parent[find(m.a)] = new
        parent[find(m.b)] = new
    roots = [find(i) for i in range(d.n)]
    relabel: dict[int, int] = {}
    return np.array([relabel.setdefault(r, len(relabel)) for r in roots], dtype=np.int64)
