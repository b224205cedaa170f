"""Joint autoencoder + k-means training (deep clustering network).

Training runs in three phases: reconstruction-only pretraining, k-means on
the pretrained latents, then alternating mini-batch updates of

1. the network, on ``L_recon + lam * L_cluster`` with centroids held fixed,
2. the batch's cluster assignments (nearest centroid),
3. the assigned centroids, by the online rule ``c_k <- c_k - (c_k - z) / n_k``.

Per-cluster counts ``n_k`` are reset at the start of every epoch.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn, seeding
from .errors import (
    BadMagic,
    EmptyClusterUnrecoverable,
    IoFailure,
    ShapeMismatch,
    TooFewSamples,
    TruncatedFile,
)
from .patches import PatchSet

log = logging.getLogger(__name__)


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, dim) float64
    counts: np.ndarray | None = None
    lam: float = 0.5
    sequence_id: str = ""

    def __post_init__(self) -> None:
        self.centroids = np.array(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ShapeMismatch(f"codebook needs K >= 2 centroids, got shape {self.centroids.shape}")
        if self.counts is None:
            self.counts = np.zeros(self.K, dtype=np.int64)

    @property
    def K(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 1e-3
    momentum: float = 0.9
    holdout: float = 0.1
    max_reinit: int = 5
    kmeans_restarts: int = 10


@dataclass
class TrainResult:
    model: nn.ConvAutoencoder
    codebook: Codebook | None = None
    history: list[dict] = field(default_factory=list)
    assignments: np.ndarray | None = None
    train_index: np.ndarray | None = None
    heldout_index: np.ndarray | None = None


# -- k-means ----------------------------------------------------------------

def squared_distances(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = np.asarray(X, dtype=np.float64)[:, None, :] - np.asarray(centroids, dtype=np.float64)[None, :, :]
    return np.sum(diff * diff, axis=2)


def assign_many(latents: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per row; ties go to the lowest index."""
    if len(latents) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(squared_distances(latents, centroids), axis=1)


def assign(latent: np.ndarray, codebook: Codebook) -> int:
    return int(assign_many(np.asarray(latent)[None, :], codebook.centroids)[0])


def kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def lloyd(X: np.ndarray, init: np.ndarray, tol: float = 1e-6, max_iter: int = 300) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations until the largest centroid shift is <= tol. Empty clusters keep their centroid."""
    X = np.asarray(X, dtype=np.float64)
    centroids = np.array(init, dtype=np.float64)
    labels = assign_many(X, centroids)
    for _ in range(max_iter):
        new = centroids.copy()
        for k in range(len(centroids)):
            members = X[labels == k]
            if len(members):
                new[k] = members.mean(axis=0)
        shift = np.sqrt(np.max(np.sum((new - centroids) ** 2, axis=1)))
        centroids = new
        labels = assign_many(X, centroids)
        if shift <= tol:
            break
    return centroids, labels


def inertia(X: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = np.asarray(X, dtype=np.float64) - centroids[labels]
    return float(np.sum(diff * diff))


def kmeans(X: np.ndarray, K: int, seed: int = 0, tol: float = 1e-6, max_iter: int = 300,
           n_init: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """k-means++ seeding then Lloyd; with ``n_init`` > 1 the lowest-inertia restart wins (first on ties).

    Restart ``r`` seeds from stream ("kmeans", r), except restart 0 which uses ("kmeans",).
    """
    if len(X) < K:
        raise TooFewSamples(f"{len(X)} samples for {K} clusters")
    best = None
    for r in range(max(n_init, 1)):
        stream = seeding.rng(seed, "kmeans") if r == 0 else seeding.rng(seed, "kmeans", r)
        centroids, labels = lloyd(X, kmeans_pp(X, K, stream), tol, max_iter)
        score = inertia(X, centroids, labels)
        if best is None or score < best[0]:
            best = (score, centroids, labels)
    return best[1], best[2]


def init_clusters(model: nn.ConvAutoencoder, patches: PatchSet | np.ndarray, K: int, seed: int = 0,
                  lam: float = 0.5, n_init: int = 1) -> Codebook:
    batch = patches.tensor() if isinstance(patches, PatchSet) else patches
    if len(batch) < K:
        raise TooFewSamples(f"{len(batch)} patches for {K} clusters")
    z = nn.encode(model, batch)
    centroids, labels = kmeans(z, K, seed, n_init=n_init)
    return Codebook(centroids, np.bincount(labels, minlength=K), lam, model.sequence_id)


# -- losses and online updates ---------------------------------------------

def cluster_loss(latents: np.ndarray, codebook: Codebook, assignments: np.ndarray) -> float:
    """Mean over samples of ||z_i - C m_i||^2."""
    z = np.asarray(latents, dtype=np.float64)
    diff = z - codebook.centroids[np.asarray(assignments)]
    return float(np.mean(np.sum(diff * diff, axis=1)))


def update_centroid(codebook: Codebook, k: int, latent: np.ndarray) -> Codebook:
    codebook.counts[k] += 1
    c = codebook.centroids[k]
    codebook.centroids[k] = c - (c - np.asarray(latent, dtype=np.float64)) / codebook.counts[k]
    return codebook


# -- training loops ---------------------------------------------------------

def _split(n: int, seed: int, holdout: float) -> tuple[np.ndarray, np.ndarray]:
    perm = seeding.rng(seed, "split").permutation(n)
    n_hold = int(round(n * holdout)) if n >= 10 else 0
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def _batches(train: np.ndarray, seed: int, epoch: int, batch_size: int):
    order = train[seeding.rng(seed, "shuffle", epoch).permutation(len(train))]
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _heldout_losses(model, data, idx, codebook, lam) -> dict:
    if len(idx) == 0:
        return {}
    x = data[idx]
    recon = 0.0
    z_all = []
    for start in range(0, len(x), 256):
        node = nn.training_loss(model, x[start : start + 256])
        recon += node.recon * len(node.latents)
        z_all.append(node.latents)
    nn._clear(model)
    out = {"heldout_recon": recon / len(x)}
    if codebook is not None:
        z = np.concatenate(z_all)
        cl = cluster_loss(z, codebook, assign_many(z, codebook.centroids))
        out["heldout_cluster"] = cl
        out["heldout_total"] = out["heldout_recon"] + lam * cl
    return out


def pretrain(model: nn.ConvAutoencoder, patches: PatchSet | np.ndarray, epochs: int, seed: int = 0,
             config: TrainConfig = TrainConfig()) -> TrainResult:
    """Reconstruction-only training on a 90% split; returns a trained copy of ``model``."""
    data = patches.tensor() if isinstance(patches, PatchSet) else np.asarray(patches)
    if len(data) == 0:
        raise TooFewSamples("empty patch set")
    model = model.copy()
    train, held = _split(len(data), seed, config.holdout)
    opt = nn.SGD(model.parameters(), config.lr, config.momentum)
    history = [{"epoch": 0, **_heldout_losses(model, data, held, None, 0.0)}]
    for epoch in range(1, epochs + 1):
        total = 0.0
        for idx in _batches(train, seed, epoch, config.batch_size):
            node = nn.training_loss(model, data[idx])
            nn.backward(node)
            opt.step()
            total += node.value * len(idx)
        rec = {"epoch": epoch, "train_loss": total / len(train), **_heldout_losses(model, data, held, None, 0.0)}
        log.info("pretrain epoch %d: %s", epoch, rec)
        history.append(rec)
    return TrainResult(model, None, history, train_index=train, heldout_index=held)


def train_dcn(model: nn.ConvAutoencoder, patches: PatchSet | np.ndarray, K: int, lam: float = 0.5,
              epochs: int = 100, seed: int = 0, config: TrainConfig = TrainConfig(),
              codebook: Codebook | None = None) -> TrainResult:
    """Alternating joint training starting from a (pretrained) model.

    Batch order and the held-out split use the same random streams as
    :func:`pretrain`, so with ``lam == 0`` the network follows exactly the
    plain autoencoder trajectory.
    """
    data = patches.tensor() if isinstance(patches, PatchSet) else np.asarray(patches)
    model = model.copy()
    train, held = _split(len(data), seed, config.holdout)
    if len(train) < K:
        raise TooFewSamples(f"{len(train)} training patches for {K} clusters")
    if codebook is None:
        z0 = nn.encode(model, data[train])
        centroids, _ = kmeans(z0, K, seed, n_init=config.kmeans_restarts)
        codebook = Codebook(centroids, None, lam, model.sequence_id)
    else:
        codebook = Codebook(codebook.centroids.copy(), None, lam, codebook.sequence_id)
    assignments = np.full(len(data), -1, dtype=np.int64)
    assignments[train] = assign_many(nn.encode(model, data[train]), codebook.centroids)
    opt = nn.SGD(model.parameters(), config.lr, config.momentum)
    reinit = np.zeros(K, dtype=np.int64)
    history = [{"epoch": 0, **_heldout_losses(model, data, held, codebook, lam)}]
    for epoch in range(1, epochs + 1):
        codebook.counts[:] = 0
        seen = np.zeros(K, dtype=bool)
        total = 0.0
        for idx in _batches(train, seed, epoch, config.batch_size):
            targets = codebook.centroids[assignments[idx]] if lam != 0 else None
            node = nn.training_loss(model, data[idx], targets, lam)
            nn.backward(node)
            opt.step()
            total += node.value * len(idx)
            z = nn.encode(model, data[idx]).astype(np.float64)
            a = assign_many(z, codebook.centroids)
            assignments[idx] = a
            for zi, k in zip(z, a):
                update_centroid(codebook, k, zi)
            seen[a] = True
        empty = np.flatnonzero(~seen)
        if len(empty):
            z_train = nn.encode(model, data[train]).astype(np.float64)
            dist = np.sum((z_train - codebook.centroids[assignments[train]]) ** 2, axis=1)
            far = np.argsort(-dist, kind="stable")
            for rank, k in enumerate(empty):
                reinit[k] += 1
                if reinit[k] >= config.max_reinit:
                    raise EmptyClusterUnrecoverable(f"cluster {k} emptied {reinit[k]} times")
                j = far[rank]
                codebook.centroids[k] = z_train[j]
                assignments[train[j]] = k
                log.warning("epoch %d: cluster %d empty, reinitialized", epoch, k)
        rec = {"epoch": epoch, "train_loss": total / len(train), **_heldout_losses(model, data, held, codebook, lam)}
        log.info("dcn epoch %d: %s", epoch, rec)
        history.append(rec)
    return TrainResult(model, codebook, history, assignments, train, held)


def predict_clusters(model: nn.ConvAutoencoder, codebook: Codebook, patches: PatchSet | np.ndarray) -> np.ndarray:
    data = patches.tensor() if isinstance(patches, PatchSet) else np.asarray(patches)
    return assign_many(nn.encode(model, data), codebook.centroids)


# -- serialization ----------------------------------------------------------

CODEBOOK_MAGIC = b"DCNC1"


def save_codebook(cb: Codebook, path: str | os.PathLike) -> None:
    sid = cb.sequence_id.encode("utf-8")
    body = (
        CODEBOOK_MAGIC
        + struct.pack("<II", cb.K, cb.dim)
        + np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes()
        + struct.pack("<fI", cb.lam, len(sid))
        + sid
    )
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(body)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_codebook(path: str | os.PathLike) -> Codebook:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != CODEBOOK_MAGIC:
        raise BadMagic("not a DCNC1 codebook file")
    if len(buf) < 13:
        raise TruncatedFile("codebook header truncated")
    K, dim = struct.unpack_from("<II", buf, 5)
    off = 13 + 4 * K * dim
    if len(buf) < off + 8:
        raise TruncatedFile("codebook payload truncated")
    cents = np.frombuffer(buf, dtype="<f4", count=K * dim, offset=13).reshape(K, dim)
    lam, slen = struct.unpack_from("<fI", buf, off)
    if len(buf) != off + 8 + slen:
        raise TruncatedFile("codebook sequence id truncated")
    sid = buf[off + 8 :].decode("utf-8")
    return Codebook(cents.astype(np.float64), None, float(lam), sid)
