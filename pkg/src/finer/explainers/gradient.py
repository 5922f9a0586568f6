"""White-box explainers: gradient x input, integrated gradients, DeepLIFT (Rescale)."""

from __future__ import annotations

import numpy as np

from finer.explainers.base import Attribution
from finer.net import Model, ShapeError, _as_batch, _layer_backward, _run, input_gradient

# below this input difference the Rescale ratio falls back to the local gradient
_RESCALE_EPS = 1e-10


def _check(model: Model, *arrays):
    for a in arrays:
        if np.shape(a) != model.input_shape:
            raise ShapeError(f"layer 0 ({model.layers[0].kind}): expected input {model.input_shape}, "
                             f"got {np.shape(a)}")


def gradients_explain(model: Model, x_v) -> Attribution:
    x_v = np.asarray(getattr(x_v, "matrix", x_v), dtype=np.float64)
    _check(model, x_v)
    return Attribution(input_gradient(model, x_v) * x_v, forwards=1)


def ig_explain(model: Model, x_v, b_v, steps: int = 64) -> Attribution:
    """Midpoint Riemann sum of gradients along the straight path b_v -> x_v."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x_v = np.asarray(getattr(x_v, "matrix", x_v), dtype=np.float64)
    b_v = np.asarray(getattr(b_v, "matrix", b_v), dtype=np.float64)
    _check(model, x_v, b_v)
    delta = x_v - b_v
    alphas = (np.arange(steps) + 0.5) / steps
    total = np.zeros_like(x_v)
    chunk = 64
    for s in range(0, steps, chunk):
        a = alphas[s:s + chunk]
        path = b_v[None] + a[:, None, None] * delta[None]
        total += input_gradient(model, path).sum(axis=0)
    return Attribution(delta * total / steps, forwards=steps)


def _rescale(dy: np.ndarray, dx: np.ndarray, local: np.ndarray) -> np.ndarray:
    safe = np.abs(dx) > _RESCALE_EPS
    return np.where(safe, dy / np.where(safe, dx, 1.0), local)


def _maxpool_multipliers(zx: np.ndarray, zb: np.ndarray, yx: np.ndarray, yb: np.ndarray) -> np.ndarray:
    """Multipliers M (L, C) with sum_t M[t, c] * dz[t, c] == dy[c] exactly.

    Credit goes to the positions holding the maximum under the input and under
    the baseline, scaled so the channel's output difference is recovered. If
    that split is degenerate, fall back to projecting dy onto dz.
    """
    dz = zx - zb
    dy = yx - yb
    L, C = zx.shape
    w = np.zeros_like(zx)
    cols = np.arange(C)
    w[zx.argmax(axis=0), cols] += 0.5
    w[zb.argmax(axis=0), cols] += 0.5
    denom = (w * dz).sum(axis=0)
    norm2 = (dz * dz).sum(axis=0)
    scale = np.maximum(np.abs(dz).max(axis=0), 1e-300)
    M = np.zeros_like(zx)
    ok = np.abs(denom) > 1e-8 * scale
    M[:, ok] = w[:, ok] * (dy[ok] / denom[ok])
    proj = ~ok & (norm2 > 0)
    M[:, proj] = dz[:, proj] * (dy[proj] / norm2[proj])
    return M


def deeplift_explain(model: Model, x_v, b_v) -> Attribution:
    """Rescale-rule DeepLIFT: one batched forward of (x, b) and one layer-wise backward."""
    x_v = np.asarray(getattr(x_v, "matrix", x_v), dtype=np.float64)
    b_v = np.asarray(getattr(b_v, "matrix", b_v), dtype=np.float64)
    _check(model, x_v, b_v)
    xb, _ = _as_batch(model, np.stack([x_v, b_v]))
    acts = _run(model, xb)
    mult = np.ones((1, 1))
    for i in range(len(model.layers) - 1, -1, -1):
        spec, p = model.layers[i], model.params[i]
        zin, zout = acts[i], acts[i + 1]
        if spec.kind in ("dense", "conv1d"):
            mult, _ = _layer_backward(spec, p, zin[:1], zout[:1], mult, False)
        elif spec.kind == "relu":
            mult = mult * _rescale(zout[0] - zout[1], zin[0] - zin[1], (zin[0] > 0).astype(float))[None]
        elif spec.kind == "sigmoid-head":
            local = zout[0] * (1.0 - zout[0])
            mult = mult * _rescale(zout[0] - zout[1], zin[0] - zin[1], local)[None]
        elif spec.kind == "global-max-pool":
            M = _maxpool_multipliers(zin[0], zin[1], zout[0], zout[1])
            mult = M[None] * mult[:, None, :]
        else:
            raise NotImplementedError(f"DeepLIFT has no rule for layer kind {spec.kind!r}")
    return Attribution(mult[0] * (x_v - b_v), forwards=2)
