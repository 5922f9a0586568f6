"""Small numpy network engine: forward, input gradients, parameter gradients, training.

Supported layer kinds are the ones the benchmark architectures need::

    dense            (B, *) -> (B, out)        flattens its input
    conv1d           (B, L, Cin) -> (B, L-K+1, Cout), valid padding, stride 1
    relu
    global-max-pool  (B, L, C) -> (B, C)
    sigmoid-head     (B, 1) -> (B, 1), must be last

Everything is float64. Inputs may be a single ``(m, n)`` matrix or a batch
``(B, m, n)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

KINDS = ("dense", "conv1d", "relu", "global-max-pool", "sigmoid-head")
CHECKPOINT_FORMAT = "finer-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    kernel: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "dense":
            d.update(in_features=self.in_features, out_features=self.out_features)
        elif self.kind == "conv1d":
            d.update(in_features=self.in_features, out_features=self.out_features, kernel=self.kernel)
        return d


def dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("dense", in_features, out_features)


def conv1d(in_channels: int, out_channels: int, kernel: int) -> LayerSpec:
    return LayerSpec("conv1d", in_channels, out_channels, kernel)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def global_max_pool() -> LayerSpec:
    return LayerSpec("global-max-pool")


def sigmoid_head() -> LayerSpec:
    return LayerSpec("sigmoid-head")


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _out_shape(spec: LayerSpec, shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    """Per-sample output shape of ``spec`` given per-sample input ``shape``."""
    where = f"layer {index} ({spec.kind})"
    if spec.kind == "dense":
        width = int(np.prod(shape))
        if width != spec.in_features:
            raise ShapeError(f"{where}: expects {spec.in_features} inputs, got shape {shape}")
        return (spec.out_features,)
    if spec.kind == "conv1d":
        if len(shape) != 2 or shape[1] != spec.in_features:
            raise ShapeError(f"{where}: expects (L, {spec.in_features}) input, got {shape}")
        if shape[0] < spec.kernel:
            raise ShapeError(f"{where}: sequence length {shape[0]} shorter than kernel {spec.kernel}")
        return (shape[0] - spec.kernel + 1, spec.out_features)
    if spec.kind == "global-max-pool":
        if len(shape) != 2:
            raise ShapeError(f"{where}: expects (L, C) input, got {shape}")
        return (shape[1],)
    if spec.kind == "sigmoid-head":
        if shape != (1,):
            raise ShapeError(f"{where}: expects a single logit, got {shape}")
        return shape
    return shape


@dataclass
class Model:
    """Layer stack ``f: R^{m x n} -> [0, 1]`` with per-layer parameters and freeze flags."""

    input_shape: tuple[int, int]
    layers: list[LayerSpec]
    params: list[dict[str, np.ndarray]]
    frozen: list[bool] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if not self.frozen:
            self.frozen = [False] * len(self.layers)
        if len(self.params) != len(self.layers) or len(self.frozen) != len(self.layers):
            raise ShapeError("params/frozen must have one entry per layer")
        kinds = [s.kind for s in self.layers]
        if kinds.count("sigmoid-head") != 1 or kinds[-1] != "sigmoid-head":
            raise ShapeError("exactly one sigmoid-head is required and it must be the last layer")
        shape = self.input_shape
        for i, (spec, p) in enumerate(zip(self.layers, self.params)):
            for name, want in _param_shapes(spec).items():
                got = p.get(name)
                if got is None or got.shape != want:
                    raise ShapeError(f"layer {i} ({spec.kind}): parameter {name} should have shape {want}")
            shape = _out_shape(spec, shape, i)

    def copy(self) -> "Model":
        return Model(
            self.input_shape,
            list(self.layers),
            [{k: v.copy() for k, v in p.items()} for p in self.params],
            list(self.frozen),
        )

    def freeze(self, flags: Sequence[bool]) -> "Model":
        m = self.copy()
        if len(flags) != len(m.layers):
            raise ValueError("one freeze flag per layer is required")
        m.frozen = [bool(f) for f in flags]
        return m


def _param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    if spec.kind == "dense":
        return {"W": (spec.in_features, spec.out_features), "b": (spec.out_features,)}
    if spec.kind == "conv1d":
        return {"W": (spec.kernel, spec.in_features, spec.out_features), "b": (spec.out_features,)}
    return {}


def init_params(layers: Sequence[LayerSpec], seed: int) -> list[dict[str, np.ndarray]]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    rng = np.random.default_rng(seed)
    params = []
    for spec in layers:
        shapes = _param_shapes(spec)
        if not shapes:
            params.append({})
            continue
        fan_in = spec.in_features * (spec.kernel if spec.kind == "conv1d" else 1)
        bound = 1.0 / np.sqrt(fan_in)
        params.append({k: rng.uniform(-bound, bound, size=s) for k, s in shapes.items()})
    return params


def build_model(input_shape: tuple[int, int], layers: Sequence[LayerSpec], seed: int) -> Model:
    return Model(tuple(input_shape), list(layers), init_params(layers, seed))


def cnn(m: int, n: int, channels: int = 16, kernel: int = 3, hidden: int = 16, seed: int = 0) -> Model:
    """Sequence classifier in the style of opcode CNNs: conv, max-pool, dense head."""
    return build_model(
        (m, n),
        [conv1d(n, channels, kernel), relu(), global_max_pool(),
         dense(channels, hidden), relu(), dense(hidden, 1), sigmoid_head()],
        seed,
    )


def mlp(m: int, n: int, hidden: int = 32, seed: int = 0) -> Model:
    return build_model((m, n), [dense(m * n, hidden), relu(), dense(hidden, 1), sigmoid_head()], seed)


ARCHITECTURES: dict[str, Callable[..., Model]] = {"cnn": cnn, "mlp": mlp}


# --- layer rules -------------------------------------------------------------

def _windows(x: np.ndarray, k: int) -> np.ndarray:
    # (B, L, C) -> (B, L-k+1, k*C), row-major over (k, C)
    w = sliding_window_view(x, k, axis=1)  # (B, L', C, k)
    return np.ascontiguousarray(w.transpose(0, 1, 3, 2)).reshape(x.shape[0], w.shape[1], -1)


def _layer_forward(spec: LayerSpec, p: dict, x: np.ndarray) -> np.ndarray:
    kind = spec.kind
    if kind == "dense":
        return x.reshape(x.shape[0], -1) @ p["W"] + p["b"]
    if kind == "conv1d":
        cols = _windows(x, spec.kernel)
        return cols @ p["W"].reshape(-1, spec.out_features) + p["b"]
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "global-max-pool":
        return x.max(axis=1)
    return sigmoid(x)


def _layer_backward(spec: LayerSpec, p: dict, x: np.ndarray, y: np.ndarray, g: np.ndarray,
                    want_params: bool) -> tuple[np.ndarray, dict]:
    """Return (dL/dx, {param: dL/dparam}) given dL/dy."""
    kind = spec.kind
    if kind == "dense":
        flat = x.reshape(x.shape[0], -1)
        grads = {"W": flat.T @ g, "b": g.sum(axis=0)} if want_params else {}
        return (g @ p["W"].T).reshape(x.shape), grads
    if kind == "conv1d":
        k, cin, cout = p["W"].shape
        grads = {}
        if want_params:
            cols = _windows(x, k)
            grads = {
                "W": np.tensordot(cols, g, axes=([0, 1], [0, 1])).reshape(k, cin, cout),
                "b": g.sum(axis=(0, 1)),
            }
        dcols = (g @ p["W"].reshape(-1, cout).T).reshape(g.shape[0], g.shape[1], k, cin)
        dx = np.zeros_like(x)
        span = g.shape[1]
        for j in range(k):
            dx[:, j:j + span, :] += dcols[:, :, j, :]
        return dx, grads
    if kind == "relu":
        return g * (x > 0), {}
    if kind == "global-max-pool":
        idx = x.argmax(axis=1)  # (B, C); first maximum on ties
        dx = np.zeros_like(x)
        b, c = np.meshgrid(np.arange(x.shape[0]), np.arange(x.shape[2]), indexing="ij")
        dx[b, idx, c] = g
        return dx, {}
    return g * y * (1.0 - y), {}


# --- public passes -----------------------------------------------------------

@dataclass
class ForwardTrace:
    output: float
    activations: list[np.ndarray]


def _as_batch(model: Model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == len(model.input_shape)
    if single:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"layer 0 ({model.layers[0].kind}): input shape {x.shape[1:]} "
                         f"does not match model input {model.input_shape}")
    return x, single


def _run(model: Model, xb: np.ndarray) -> list[np.ndarray]:
    acts = [xb]
    for spec, p in zip(model.layers, model.params):
        acts.append(_layer_forward(spec, p, acts[-1]))
    return acts


def forward(model: Model, x_v) -> ForwardTrace:
    """Positive-class probability plus every layer's activation for one input."""
    xb, single = _as_batch(model, x_v)
    if not single:
        raise ShapeError("forward takes a single input; use predict_proba for batches")
    acts = _run(model, xb)
    return ForwardTrace(float(acts[-1][0, 0]), [a[0] for a in acts[1:]])


def predict_proba(model: Model, X, batch_size: int = 512) -> np.ndarray:
    """f(x) for a batch (B, m, n); returns shape (B,)."""
    xb, single = _as_batch(model, X)
    out = np.empty(xb.shape[0])
    for s in range(0, xb.shape[0], batch_size):
        out[s:s + batch_size] = _run(model, xb[s:s + batch_size])[-1][:, 0]
    return out[0:1] if single else out


def predict_label(model: Model, x_v) -> int | np.ndarray:
    p = predict_proba(model, x_v)
    labels = (p >= 0.5).astype(int)
    return int(labels[0]) if np.asarray(x_v).ndim == 2 else labels


def input_gradient(model: Model, x_v) -> np.ndarray:
    """d f(x)/d x, same shape as the input (single or batch)."""
    xb, single = _as_batch(model, x_v)
    acts = _run(model, xb)
    g = np.ones_like(acts[-1])
    for i in range(len(model.layers) - 1, -1, -1):
        g, _ = _layer_backward(model.layers[i], model.params[i], acts[i], acts[i + 1], g, False)
    return g[0] if single else g


def cross_entropy(model: Model, X, y) -> float:
    """Mean binary cross entropy computed from the pre-sigmoid logit."""
    xb, _ = _as_batch(model, X)
    if xb.shape[0] == 0:
        return 0.0
    z = _run(model, xb)[-2][:, 0]
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def loss_and_grads(model: Model, terms: Iterable[tuple[np.ndarray, np.ndarray, float]]
                   ) -> tuple[float, list[float], list[dict[str, np.ndarray]]]:
    """Weighted sum of per-set mean cross entropies and its parameter gradient.

    ``terms`` is a sequence of ``(X, y, weight)``; empty sets contribute zero.
    Returns ``(total, per_term_losses, grads)``.
    """
    grads = [{k: np.zeros_like(v) for k, v in p.items()} for p in model.params]
    total = 0.0
    per_term = []
    n_layers = len(model.layers)
    for X, y, weight in terms:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] == 0:
            per_term.append(0.0)
            continue
        xb, _ = _as_batch(model, X)
        y = np.asarray(y, dtype=np.float64)
        acts = _run(model, xb)
        z = acts[-2][:, 0]
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        per_term.append(loss)
        if weight == 0.0:
            continue
        total += weight * loss
        g = ((sigmoid(z) - y) * (weight / xb.shape[0]))[:, None]
        # skip the sigmoid head: the gradient above is already w.r.t. the logit
        for i in range(n_layers - 2, -1, -1):
            need = not model.frozen[i] and bool(model.params[i])
            if i == 0 and not need:
                break
            g, pg = _layer_backward(model.layers[i], model.params[i], acts[i], acts[i + 1], g, need)
            for k, v in pg.items():
                grads[i][k] += v
    return total, per_term, grads


# --- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


class MomentumSGD:
    def __init__(self, model: Model, lr: float, momentum: float):
        self.lr = lr
        self.momentum = momentum
        self.velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in model.params]

    def step(self, model: Model, grads: list[dict[str, np.ndarray]]) -> None:
        for i, (p, g, vel) in enumerate(zip(model.params, grads, self.velocity)):
            if model.frozen[i]:
                continue
            for k in p:
                vel[k] *= self.momentum
                vel[k] += g[k]
                p[k] -= self.lr * vel[k]


# extra_terms(model, batch_indices, epoch, batch_index) -> [(X, y, weight), ...]
ExtraTerms = Callable[[Model, np.ndarray, int, int], list]
# on_epoch(model, epoch, stats) -> True to stop early
EpochHook = Callable[[Model, int, dict], bool]


def fit(model: Model, X, y, cfg: TrainConfig,
        loss_terms: Sequence[tuple[np.ndarray, np.ndarray, float]] = (),
        extra_terms: ExtraTerms | None = None,
        on_epoch: EpochHook | None = None) -> Model:
    """Mini-batch momentum SGD on weighted cross entropy; returns a trained copy.

    ``loss_terms`` are auxiliary labeled sets ``(X, y, weight)``; each is shuffled
    with its own stream and split into as many batches as the primary data, so
    adding a zero-weight term never changes the trajectory.
    """
    model = model.copy()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if all(model.frozen):
        return model
    n = X.shape[0]
    n_batches = max(1, int(np.ceil(n / cfg.batch_size)))
    rng = np.random.default_rng(cfg.seed)
    aux_rngs = [np.random.default_rng([cfg.seed, j + 1]) for j in range(len(loss_terms))]
    opt = MomentumSGD(model, cfg.lr, cfg.momentum)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        aux_orders = [np.array_split(r.permutation(len(t[0])), n_batches) for r, t in zip(aux_rngs, loss_terms)]
        epoch_loss = 0.0
        term_sums: list[float] = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            terms = [(X[idx], y[idx], 1.0)]
            for (Xa, ya, wa), parts in zip(loss_terms, aux_orders):
                terms.append((np.asarray(Xa)[parts[b]], np.asarray(ya)[parts[b]], wa))
            if extra_terms is not None:
                terms.extend(extra_terms(model, idx, epoch, b))
            total, per_term, grads = loss_and_grads(model, terms)
            if not np.isfinite(total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.step(model, grads)
            epoch_loss += total
            if len(term_sums) < len(per_term):
                term_sums.extend([0.0] * (len(per_term) - len(term_sums)))
            for j, v in enumerate(per_term):
                term_sums[j] += v
        stats = {"epoch": epoch, "loss": epoch_loss / n_batches,
                 "terms": [v / n_batches for v in term_sums]}
        log.debug("epoch %d loss %.6f", epoch, stats["loss"])
        if on_epoch is not None and on_epoch(model, epoch, stats):
            break
    return model


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(model: Model) -> bytes:
    """Self-describing JSON; floats are written with shortest round-trip repr."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_shape": list(model.input_shape),
        "layers": [s.to_dict() for s in model.layers],
        "frozen": list(model.frozen),
        "params": [
            {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in sorted(p.items())}
            for p in model.params
        ],
    }
    return json.dumps(doc, separators=(",", ":")).encode()


def load_checkpoint(data: bytes) -> Model:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"cannot parse checkpoint: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a finer checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        layers = [LayerSpec(**d) for d in doc["layers"]]
        params = [
            {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in p.items()}
            for p in doc["params"]
        ]
        return Model(tuple(doc["input_shape"]), layers, params, list(doc["frozen"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
