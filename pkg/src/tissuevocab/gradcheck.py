"""Central finite-difference checks of the hand-written gradients.

The miniature network below exercises every layer type and every code path of
the convolution (im2col for thin inputs, the fused-tap path for thin outputs
and the per-tap path otherwise) on 4x4 inputs in float64.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import nn, seeding

MINI_ARCH = nn.Architecture(in_channels=2, size=4, features=(6, 5), latent=3)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out[i] = (hi - lo) / (2 * eps)
    return g


def kink_margin(model: nn.ConvAutoencoder, batch: np.ndarray) -> float:
    """Smallest distance of any ReLU input from 0 or any live pooling winner from its runner-up.

    Central differences are only exact for this piecewise-smooth network when
    no perturbation crosses such a kink.
    """
    x = model._check_batch(batch)
    margin = np.inf
    for layer in model.layers:
        if isinstance(layer, nn.ReLU):
            margin = min(margin, float(np.min(np.abs(x))))
        elif isinstance(layer, nn.MaxPool2):
            taps = np.stack([x[:, a::2, b::2] for a in (0, 1) for b in (0, 1)])
            top2 = np.sort(taps, axis=0)[-2:]
            live = top2[1] > 0  # all-zero windows only move through a ReLU kink, checked above
            if live.any():
                margin = min(margin, float(np.min((top2[1] - top2[0])[live])))
        x = layer.forward(x)
    nn._clear(model)
    return margin


def check_network(seed: int = 0, eps: float = 1e-3, lam: float = 0.7, batch: int = 2,
                  min_margin: float = 5e-3) -> list[dict]:
    """Max relative error per parameter tensor of the full loss (reconstruction + clustering).

    Inputs are redrawn until every kink is at least ``min_margin`` away.
    """
    model = nn.ConvAutoencoder(MINI_ARCH, seed=seed, dtype=np.float64)
    r = seeding.rng(seed, "gradcheck")
    shape = (batch, MINI_ARCH.in_channels, MINI_ARCH.size, MINI_ARCH.size)
    for _ in range(1000):
        x = r.standard_normal(shape)
        if kink_margin(model, x) >= min_margin:
            break
    else:
        raise RuntimeError("could not draw a gradient-check batch away from kinks")
    targets = r.standard_normal((batch, MINI_ARCH.latent))

    def loss() -> float:
        return nn.training_loss(model, x, targets, lam).value

    node = nn.training_loss(model, x, targets, lam)
    grads = {k: v.copy() for k, v in nn.backward(node).items()}
    rows = []
    for name, p in model.named_parameters():
        num = numeric_gradient(loss, p.data, eps)
        rows.append({"layer": name, "kind": "parameter", "max_rel_err": max_relative_error(grads[name], num)})
    return rows


def _layer_cases(r: np.random.Generator) -> list[tuple[str, nn.Layer, tuple[int, ...]]]:
    f64 = np.float64
    return [
        ("conv_im2col", nn.Conv3x3(3, 5, r, f64), (2, 4, 4, 3)),
        ("conv_fused_taps", nn.Conv3x3(6, 2, r, f64), (2, 4, 4, 6)),
        ("conv_per_tap", nn.Conv3x3(6, 7, r, f64), (2, 4, 4, 6)),
        ("relu", nn.ReLU(), (2, 4, 4, 3)),
        ("maxpool", nn.MaxPool2(), (2, 4, 4, 3)),
        ("upsample", nn.Upsample2(), (2, 2, 2, 3)),
        ("dense", nn.Dense(12, 4, r, f64, out_shape=(1, 1, 4)), (2, 2, 2, 3)),
    ]


def check_layers(seed: int = 0, eps: float = 1e-3) -> list[dict]:
    """Per layer: input and parameter gradients of sum(upstream * layer(x))."""
    r = seeding.rng(seed, "gradcheck", "layers")
    rows = []
    for name, layer, shape in _layer_cases(r):
        x = r.standard_normal(shape)
        if name == "relu":
            # keep entries away from the kink so central differences are exact
            x = np.where(np.abs(x) < 10 * eps, x + np.sign(x + 1e-12) * 20 * eps, x)
        if name == "maxpool":
            x = x + np.arange(x.size).reshape(shape) * 1e-2  # distinct values, no near-ties
        dout = r.standard_normal(layer.forward(x).shape)

        def f() -> float:
            return float(np.sum(dout * layer.forward(x)))

        for p in layer.params:
            p.zero_grad()
        layer.forward(x)
        dx = layer.backward(dout)
        analytic = {p.name: p.grad.copy() for p in layer.params}
        rows.append({"layer": name, "kind": "input", "max_rel_err": max_relative_error(dx, numeric_gradient(f, x, eps))})
        for p in layer.params:
            num = numeric_gradient(f, p.data, eps)
            rows.append({"layer": f"{name}:{p.name}", "kind": "parameter",
                         "max_rel_err": max_relative_error(analytic[p.name], num)})
    return rows


def run_all(seed: int = 0, eps: float = 1e-3) -> list[dict]:
    return check_layers(seed, eps) + check_network(seed, eps)
