"""A small convolutional autoencoder with hand-written reverse-mode gradients.

Only the layers the architecture needs are implemented: 3x3 "same"
convolution, ReLU, 2x2 max pooling, nearest-neighbour 2x upsampling and dense
layers. Activations flow through the layers as NHWC arrays; the public entry
points (:func:`encode`, :func:`reconstruction_loss`, ...) take NCHW batches.

Default architecture for a 32x32xC input::

    conv(C->50) relu pool | conv(50->20) relu pool | conv(20->10) relu pool | dense(160->20)
    dense(20->160) relu | up conv(10->20) relu | up conv(20->50) relu | up conv(50->C)
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import seeding
from .errors import (
    BadMagic,
    ChecksumMismatch,
    DivergenceDetected,
    GraphNotBuilt,
    IoFailure,
    ShapeMismatch,
    TruncatedFile,
    VersionMismatch,
)

DEFAULT_FEATURES = (50, 20, 10)
LATENT_DIM = 20
CHECK_FINITE = bool(os.environ.get("TISSUEVOCAB_DEBUG"))


class Tensor:
    """A parameter array with its accumulated gradient."""

    def __init__(self, data: np.ndarray, name: str = ""):
        self.data = data
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        g = g.astype(self.data.dtype, copy=False)
        self.grad = g.copy() if self.grad is None else self.grad + g


# -- layers -----------------------------------------------------------------

class Layer:
    params: tuple[Tensor, ...] = ()

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv3x3(Layer):
    """3x3 convolution with zero "same" padding. Weights are (3, 3, cin, cout).

    The padded input is viewed as one flat (B*Hp*Wp, C) matrix; tap (i, j) is
    then a contiguous row shift by ``i*Wp + j``, so no per-tap copies are made.
    Rows that fall in the padding are computed and discarded.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32, name: str = "conv"):
        bound = np.sqrt(6.0 / (9 * cin))
        self.w = Tensor(rng.uniform(-bound, bound, size=(3, 3, cin, cout)).astype(dtype), name + ".w")
        self.b = Tensor(np.zeros(cout, dtype=dtype), name + ".b")
        self.params = (self.w, self.b)
        self._cache = None

    @staticmethod
    def _shifts(Wp: int) -> list[tuple[int, int, int]]:
        return [(i, j, i * Wp + j) for i in range(3) for j in range(3)]

    def forward(self, x):
        B, H, W, C = x.shape
        w = self.w.data
        O = w.shape[3]
        if C != w.shape[2]:
            raise ShapeMismatch(f"conv expects {w.shape[2]} channels, got {C}")
        if C <= 4:
            # im2col: a contraction over C alone would be too thin for BLAS
            xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
            cols = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
            cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, 9 * C)
            out = (cols @ w.reshape(9 * C, O)).reshape(B, H, W, O)
            self._cache = ("cols", x.shape, cols)
            return out + self.b.data
        Hp, Wp = H + 2, W + 2
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        xf = xp.reshape(-1, C)
        N = xf.shape[0]
        L = N - (2 * Wp + 2)
        of = np.zeros((N, O), dtype=x.dtype)
        if O <= 4:
            # all taps in one product, then add the shifted tap columns
            y = (xf @ w.transpose(2, 0, 1, 3).reshape(C, 9 * O)).reshape(N, 9, O)
            for k, (_, _, s) in enumerate(self._shifts(Wp)):
                of[:L] += y[s : s + L, k, :]
        else:
            for i, j, s in self._shifts(Wp):
                of[:L] += xf[s : s + L] @ w[i, j]
        self._cache = ("flat", x.shape, xf)
        return of.reshape(B, Hp, Wp, O)[:, :H, :W, :] + self.b.data

    def backward(self, dout):
        if self._cache is None:
            raise GraphNotBuilt("conv backward before forward")
        kind, (B, H, W, C), saved = self._cache
        self._cache = None
        O = dout.shape[3]
        w = self.w.data
        self.b.accumulate(dout.reshape(-1, O).sum(axis=0, dtype=np.float64))
        Hp, Wp = H + 2, W + 2
        if kind == "cols":
            d2 = dout.reshape(-1, O)
            self.w.accumulate((saved.T @ d2).reshape(3, 3, C, O))
            dcols = (d2 @ w.reshape(9 * C, O).T).reshape(B, H, W, 3, 3, C)
            dxp = np.zeros((B, Hp, Wp, C), dtype=dout.dtype)
            for i in range(3):
                for j in range(3):
                    dxp[:, i : i + H, j : j + W, :] += dcols[:, :, :, i, j, :]
            return dxp[:, 1:-1, 1:-1, :]
        xf = saved
        N = xf.shape[0]
        L = N - (2 * Wp + 2)
        dpad = np.zeros((B, Hp, Wp, O), dtype=dout.dtype)
        dpad[:, :H, :W, :] = dout
        df = dpad.reshape(N, O)
        if O <= 4:
            g = np.zeros((N, 9, O), dtype=dout.dtype)
            for k, (_, _, s) in enumerate(self._shifts(Wp)):
                g[s : s + L, k, :] = df[:L]
            g = g.reshape(N, 9 * O)
            wexp = w.transpose(2, 0, 1, 3).reshape(C, 9 * O)
            self.w.accumulate((xf.T @ g).reshape(C, 3, 3, O).transpose(1, 2, 0, 3))
            dxf = g @ wexp.T
        else:
            dw = np.empty_like(w)
            dxf = np.zeros((N, C), dtype=dout.dtype)
            for i, j, s in self._shifts(Wp):
                dw[i, j] = xf[s : s + L].T @ df[:L]
                dxf[s : s + L] += df[:L] @ w[i, j].T
            self.w.accumulate(dw)
        return dxf.reshape(B, Hp, Wp, C)[:, 1 : H + 1, 1 : W + 1, :]


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dout):
        mask = getattr(self, "_mask", None)
        if mask is None:
            raise GraphNotBuilt("relu backward before forward")
        self._mask = None
        return dout * mask


class MaxPool2(Layer):
    """2x2 max pooling. On ties the first element in row-major window order wins."""

    def forward(self, x):
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise ShapeMismatch(f"maxpool needs even spatial dims, got {(H, W)}")
        taps = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
        out = np.maximum(np.maximum(taps[0], taps[1]), np.maximum(taps[2], taps[3]))
        winner = np.full(out.shape, 3, dtype=np.int8)
        for k in (2, 1, 0):
            winner[taps[k] == out] = k
        self._cache = (x.shape, winner)
        return out

    def backward(self, dout):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise GraphNotBuilt("maxpool backward before forward")
        shape, winner = cache
        self._cache = None
        dx = np.empty(shape, dtype=dout.dtype)
        for k, (a, b) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            dx[:, a::2, b::2] = dout * (winner == k)
        return dx


class Upsample2(Layer):
    """Nearest-neighbour 2x upsampling."""

    def forward(self, x):
        B, H, W, C = x.shape
        self._built = True
        return np.broadcast_to(x[:, :, None, :, None, :], (B, H, 2, W, 2, C)).reshape(B, 2 * H, 2 * W, C)

    def backward(self, dout):
        if not getattr(self, "_built", False):
            raise GraphNotBuilt("upsample backward before forward")
        self._built = False
        B, H2, W2, C = dout.shape
        return dout.reshape(B, H2 // 2, 2, W2 // 2, 2, C).sum(axis=(2, 4))


class Dense(Layer):
    """Fully connected layer on flattened input; output is reshaped to ``out_shape``."""

    def __init__(self, nin: int, nout: int, rng: np.random.Generator, dtype=np.float32,
                 out_shape: tuple[int, ...] | None = None, name: str = "dense"):
        bound = np.sqrt(6.0 / nin)
        self.w = Tensor(rng.uniform(-bound, bound, size=(nin, nout)).astype(dtype), name + ".w")
        self.b = Tensor(np.zeros(nout, dtype=dtype), name + ".b")
        self.params = (self.w, self.b)
        self.out_shape = out_shape
        self._cache = None

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.w.data.shape[0]:
            raise ShapeMismatch(f"dense expects {self.w.data.shape[0]} inputs, got {flat.shape[1]}")
        self._cache = (x.shape, flat)
        out = flat @ self.w.data + self.b.data
        if self.out_shape is not None:
            out = out.reshape((x.shape[0],) + self.out_shape)
        return out

    def backward(self, dout):
        if self._cache is None:
            raise GraphNotBuilt("dense backward before forward")
        shape, flat = self._cache
        self._cache = None
        d2 = dout.reshape(dout.shape[0], -1)
        self.w.accumulate(flat.T @ d2)
        self.b.accumulate(d2.sum(axis=0, dtype=np.float64))
        return (d2 @ self.w.data.T).reshape(shape)


# -- model ------------------------------------------------------------------

@dataclass(frozen=True)
class Architecture:
    in_channels: int = 1
    size: int = 32
    features: tuple[int, ...] = DEFAULT_FEATURES
    latent: int = LATENT_DIM

    @property
    def bottleneck(self) -> tuple[int, int, int]:
        side = self.size // 2 ** len(self.features)
        return (side, side, self.features[-1])

    def validate(self) -> None:
        if self.size % 2 ** len(self.features) or self.size < 2 ** len(self.features):
            raise ShapeMismatch(f"input size {self.size} not divisible by 2^{len(self.features)}")


class ConvAutoencoder:
    def __init__(self, arch: Architecture = Architecture(), seed: int = 0, dtype=np.float32,
                 sequence_id: str = ""):
        arch.validate()
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.sequence_id = sequence_id
        rng = seeding.rng(seed, "init")
        enc: list[Layer] = []
        cin = arch.in_channels
        for i, f in enumerate(arch.features):
            enc += [Conv3x3(cin, f, rng, dtype, f"enc{i}"), ReLU(), MaxPool2()]
            cin = f
        bneck = arch.bottleneck
        nflat = int(np.prod(bneck))
        enc.append(Dense(nflat, arch.latent, rng, dtype, name="enc_dense"))
        dec: list[Layer] = [Dense(arch.latent, nflat, rng, dtype, out_shape=bneck, name="dec_dense"), ReLU()]
        outs = list(reversed(arch.features[:-1])) + [arch.in_channels]
        cin = arch.features[-1]
        for i, f in enumerate(outs):
            dec += [Upsample2(), Conv3x3(cin, f, rng, dtype, f"dec{i}")]
            if i < len(outs) - 1:
                dec.append(ReLU())
            cin = f
        self.encoder = enc
        self.decoder = dec
        self._graph = 0

    @property
    def layers(self) -> list[Layer]:
        return self.encoder + self.decoder

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for p in self.parameters():
            yield p.name, p

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> "ConvAutoencoder":
        _clear(self)
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ConvAutoencoder":
        other = self.copy()
        other.dtype = np.dtype(dtype)
        for p in other.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return other

    # internal NHWC passes
    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        a = self.arch
        if batch.ndim != 4 or batch.shape[1:] != (a.in_channels, a.size, a.size):
            raise ShapeMismatch(f"expected batch (B, {a.in_channels}, {a.size}, {a.size}), got {batch.shape}")
        return np.asarray(batch, dtype=self.dtype).transpose(0, 2, 3, 1)

    def _run(self, layers: Sequence[Layer], x: np.ndarray) -> np.ndarray:
        for layer in layers:
            x = layer.forward(x)
            if CHECK_FINITE and not np.all(np.isfinite(x)):
                raise DivergenceDetected(f"non-finite activation after {type(layer).__name__}")
        return x

    def _back(self, layers: Sequence[Layer], d: np.ndarray) -> np.ndarray:
        for layer in reversed(layers):
            d = layer.backward(d)
        return d


def encode(model: ConvAutoencoder, batch: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Latent vectors (B, latent) for an NCHW batch. Pure: no graph is kept."""
    x = model._check_batch(batch)
    outs = []
    for start in range(0, max(len(x), 1), chunk):
        part = x[start : start + chunk]
        if len(part) == 0:
            break
        outs.append(model._run(model.encoder, part))
    _clear(model)
    if not outs:
        return np.zeros((0, model.arch.latent), dtype=model.dtype)
    return np.concatenate(outs)


def decode(model: ConvAutoencoder, latents: np.ndarray) -> np.ndarray:
    y = model._run(model.decoder, np.asarray(latents, dtype=model.dtype))
    _clear(model)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _clear(model: ConvAutoencoder) -> None:
    model._graph += 1
    for layer in model.layers:
        for attr in ("_cache", "_mask"):
            if hasattr(layer, attr):
                setattr(layer, attr, None)
        if hasattr(layer, "_built"):
            layer._built = False


class LossNode:
    """Scalar result of a training forward pass; call :func:`backward` on it once."""

    def __init__(self, model, value, recon, cluster, dy, dz_cluster, graph):
        self.model = model
        self.value = value
        self.recon = recon
        self.cluster = cluster
        self._dy = dy
        self._dz_cluster = dz_cluster
        self._graph = graph
        self.latents = None

    def __float__(self) -> float:
        return float(self.value)


def training_loss(model: ConvAutoencoder, batch: np.ndarray, targets: np.ndarray | None = None,
                  lam: float = 0.0, scale: float = 1.0) -> LossNode:
    """Forward pass building the graph for ``scale * (L_recon + lam * L_cluster)``.

    ``targets`` are the assigned centroids C m_i per sample; they are treated
    as constants. With ``lam == 0`` the cluster term is not evaluated at all.
    """
    x = model._check_batch(batch)
    _clear(model)
    z = model._run(model.encoder, x)
    y = model._run(model.decoder, z)
    diff = y - x
    recon = float(np.mean(np.square(diff, dtype=np.float64)))
    dy = (scale * 2.0 / diff.size) * diff
    cluster = 0.0
    dz = None
    if lam != 0 and targets is not None:
        t = np.asarray(targets, dtype=np.float64)
        if t.shape != z.shape:
            raise ShapeMismatch(f"targets {t.shape} do not match latents {z.shape}")
        dzf = z.astype(np.float64) - t
        cluster = float(np.mean(np.sum(dzf * dzf, axis=1)))
        dz = (scale * lam * 2.0 / len(z) * dzf).astype(model.dtype)
    value = scale * (recon + lam * cluster)
    if not np.isfinite(value):
        raise DivergenceDetected(f"loss is {value}")
    node = LossNode(model, value, recon, cluster, dy.astype(model.dtype), dz, model._graph)
    node.latents = z
    return node


def reconstruction_loss(model: ConvAutoencoder, batch: np.ndarray) -> LossNode:
    """Mean squared reconstruction error over all elements of the batch."""
    return training_loss(model, batch)


def backward(node: LossNode) -> dict[str, np.ndarray]:
    """Accumulate parameter gradients for ``node`` and return them by name."""
    model = node.model
    if node._dy is None or node._graph != model._graph:
        raise GraphNotBuilt("no forward graph for this loss (already consumed or overwritten)")
    model.zero_grad()
    dz = model._back(model.decoder, node._dy)
    if node._dz_cluster is not None:
        dz = dz + node._dz_cluster
    model._back(model.encoder, dz)
    node._dy = None
    model._graph += 1
    grads = {}
    for p in model.parameters():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        grads[p.name] = p.grad
    return grads


# -- optimizer --------------------------------------------------------------

def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], velocities: list[np.ndarray],
             lr: float, momentum: float) -> None:
    """In place: v <- momentum * v + g; p <- p - lr * v."""
    for p, g, v in zip(params, grads, velocities):
        v *= momentum
        v += g
        p.data -= lr * v


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_step(self.params, grads, self.velocity, self.lr, self.momentum)


# -- serialization ----------------------------------------------------------

MODEL_MAGIC = b"DCNW1"
MODEL_VERSION = 1


def save_model(model: ConvAutoencoder, path: str | os.PathLike) -> None:
    a = model.arch
    desc = {
        "format_version": MODEL_VERSION,
        "in_channels": a.in_channels,
        "size": a.size,
        "features": list(a.features),
        "latent": a.latent,
        "sequence_id": model.sequence_id,
        "params": [[p.name, list(p.shape)] for p in model.parameters()],
    }
    dbytes = json.dumps(desc, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in model.parameters())
    body = MODEL_MAGIC + struct.pack("<I", len(dbytes)) + dbytes + payload
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(body + hashlib.sha256(body).digest())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_model(path: str | os.PathLike) -> ConvAutoencoder:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != MODEL_MAGIC:
        raise BadMagic("not a DCNW1 model file")
    if len(buf) < 5 + 4 + 32:
        raise TruncatedFile("model file too short")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch("model checksum does not match content")
    (dlen,) = struct.unpack_from("<I", body, 5)
    desc = json.loads(body[9 : 9 + dlen].decode("utf-8"))
    if desc.get("format_version") != MODEL_VERSION:
        raise VersionMismatch(f"model format version {desc.get('format_version')} != {MODEL_VERSION}")
    arch = Architecture(desc["in_channels"], desc["size"], tuple(desc["features"]), desc["latent"])
    model = ConvAutoencoder(arch, sequence_id=desc.get("sequence_id", ""))
    offset = 9 + dlen
    for p, (name, shape) in zip(model.parameters(), desc["params"]):
        n = int(np.prod(shape))
        if p.name != name or list(p.shape) != list(shape):
            raise VersionMismatch(f"parameter layout mismatch at {name}")
        if offset + 4 * n > len(body):
            raise TruncatedFile("model payload truncated")
        p.data = np.frombuffer(body, dtype="<f4", count=n, offset=offset).astype(np.float32).reshape(shape)
        offset += 4 * n
    if offset != len(body):
        raise TruncatedFile("unexpected bytes after model payload")
    return model
