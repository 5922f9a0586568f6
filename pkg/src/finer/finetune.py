"""Explanation-guided fine-tuning.

Each batch is augmented from the current model state: a surrogate explainer
picks every positive prediction's ROI, and three extra labeled sets are built
by masking with the batch's true negatives:

* sanitized (TP with ROI masked) -> label 0
* variant (TP with everything but the ROI masked) -> label 1
* counter examples (FP with ROI masked, and with non-ROI masked) -> label 0

The objective is cross entropy on the batch plus the lambda-weighted cross
entropies of the three sets.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from finer.explainers import ExplainerConfig, explain_ic, ic_aggregate, sub_seed
from finer.explainers.gradient import gradients_explain
from finer.ic import BaselineSet, Encoded, Masker, complement, select_roi
from finer.net import Model, TrainConfig, fit, input_gradient, loss_and_grads, predict_proba
from finer.task import ProblemSample, Vectorizer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinetuneConfig:
    lambdas: tuple[float, float, float] = (0.5, 0.5, 0.5)
    percentile: float = 30.0
    surrogate: str = "gradients"
    epochs: int = 5
    lr: float = 0.01
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0
    frozen: tuple[bool, ...] | None = None
    # early stop once validation AMP changes by < plateau_tol (relative) for `patience` epochs
    patience: int = 3
    plateau_tol: float = 0.01
    val_percentile: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if len(self.lambdas) != 3 or not all(np.isfinite(self.lambdas)) or min(self.lambdas) < 0:
            raise ValueError("lambdas must be three finite non-negative reals")

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.lr, self.batch_size, self.epochs, self.seed, self.momentum)


@dataclass
class AugmentedBatch:
    x_san: np.ndarray
    x_var: np.ndarray
    x_cou: np.ndarray
    san_origin: list[str] = field(default_factory=list)
    var_origin: list[str] = field(default_factory=list)
    cou_origin: list[str] = field(default_factory=list)
    rois: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.x_san), len(self.x_var), len(self.x_cou)


def _surrogate_scores(model: Model, data: Encoded, idx, name: str, B: BaselineSet,
                      cfg: ExplainerConfig, seed: int) -> list[np.ndarray]:
    if name == "gradients":
        X = data.X[idx]
        e = input_gradient(model, X) * X
        return [ic_aggregate(e[j], data.indicators[i]).scores for j, i in enumerate(idx)]
    out = []
    for i in idx:
        I = data.indicators[i]
        b_v = Masker(data.X[i], I, B).apply(range(len(I)))
        out.append(explain_ic(name, model, data.X[i], I, B, b_v, cfg, seed).scores)
    return out


def augment_batch(model: Model, data: Encoded, idx, cfg: FinetuneConfig, phi: Vectorizer,
                  fallback: list[ProblemSample] | None = None, seed: int = 0,
                  explainer_cfg: ExplainerConfig = ExplainerConfig()) -> AugmentedBatch:
    """Build the sanitized, variant and counter-example sets for one batch."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty batch")
    m, n = phi.shape
    empty = AugmentedBatch(np.zeros((0, m, n)), np.zeros((0, m, n)), np.zeros((0, m, n)))
    pred = predict_proba(model, data.X[idx]) >= 0.5
    y = data.y[idx]
    pos = idx[pred]
    if pos.size == 0:
        return empty
    tn = [data.samples[i] for i in idx[~pred & (y == 0)]]
    if not tn:
        if not fallback:
            raise ValueError("batch has no true negatives and no fallback benign pool was given")
        log.info("batch without true negatives; masking from the global benign pool")
        tn = list(fallback)
    B = BaselineSet(tn, phi, seed)
    scores = _surrogate_scores(model, data, pos, cfg.surrogate, B, explainer_cfg, seed)
    out = AugmentedBatch([], [], [])
    for i, s in zip(pos, scores):
        I = data.indicators[i]
        sid = data.samples[i].id
        r = select_roi(s, p=cfg.percentile)
        rest = complement(r, len(I))
        masker = Masker(data.X[i], I, B)
        out.rois[sid] = r.indices
        if data.y[i] == 1:
            out.x_san.append(masker.apply(r.indices))
            out.san_origin.append(sid)
            out.x_var.append(masker.apply(rest.indices))
            out.var_origin.append(sid)
        else:
            out.x_cou.append(masker.apply(r.indices))
            out.x_cou.append(masker.apply(rest.indices))
            out.cou_origin.extend([sid, sid])
    for name in ("x_san", "x_var", "x_cou"):
        rows = getattr(out, name)
        setattr(out, name, np.stack(rows) if rows else np.zeros((0, m, n)))
    return out


def multitask_terms(X, y, aug: AugmentedBatch, lambdas) -> list[tuple[np.ndarray, np.ndarray, float]]:
    l1, l2, l3 = lambdas
    return [
        (X, y, 1.0),
        (aug.x_san, np.zeros(len(aug.x_san)), l1),
        (aug.x_var, np.ones(len(aug.x_var)), l2),
        (aug.x_cou, np.zeros(len(aug.x_cou)), l3),
    ]


def multitask_loss(model: Model, X, y, aug: AugmentedBatch, lambdas) -> float:
    """CE(X, y) + l1*CE(x_san, 0) + l2*CE(x_var, 1) + l3*CE(x_cou, 0); empty sets add 0."""
    total, _, _ = loss_and_grads(model, multitask_terms(X, y, aug, lambdas))
    return total


def validation_amp(model: Model, val: Encoded, B: BaselineSet, p: float) -> float:
    """AMP under the gradient explainer on the validation risk predictions."""
    if len(val) == 0:
        return float("nan")
    vals = []
    for i, I in enumerate(val.indicators):
        e = ic_aggregate(gradients_explain(model, val.X[i]), I)
        vals.append(Masker(val.X[i], I, B).apply(select_roi(e, p=p).indices))
    return float(np.mean(predict_proba(model, np.stack(vals))))


def _plateau(history: list[float], patience: int, tol: float) -> bool:
    if len(history) <= patience:
        return False
    recent = history[-(patience + 1):]
    for a, b in zip(recent, recent[1:]):
        if abs(b - a) > tol * max(abs(a), 1e-12):
            return False
    return True


@dataclass
class FinetuneResult:
    model: Model
    history: list[dict]

    def csv(self) -> str:
        buf = io.StringIO()
        cols = ["epoch", "L0", "L1", "L2", "L3", "train_acc", "val_acc", "val_amp"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])
        return buf.getvalue()


def finetune(model: Model, train: Encoded, cfg: FinetuneConfig, phi: Vectorizer,
             val: Encoded | None = None, explainer_cfg: ExplainerConfig = ExplainerConfig()) -> FinetuneResult:
    """Fine-tune with explanation-guided augmentation recomputed every batch."""
    if cfg.frozen is not None:
        model = model.freeze(cfg.frozen)
    benign = [s for s in train.samples if s.label == 0]
    val_risk = val.subset([i for i in range(len(val)) if val.y[i] == 1]) if val is not None else None
    val_B = BaselineSet([s for s in val.samples if s.label == 0], phi, sub_seed(cfg.seed, "val-mask")) \
        if val is not None and (val.y == 0).any() else None
    history: list[dict] = []
    amps: list[float] = []

    def extra(cur: Model, idx, epoch: int, b: int):
        aug = augment_batch(cur, train, idx, cfg, phi, benign,
                            sub_seed(cfg.seed, f"augment-{epoch}-{b}"), explainer_cfg)
        return multitask_terms(np.zeros((0,) + phi.shape), np.zeros(0), aug, cfg.lambdas)[1:]

    def on_epoch(cur: Model, epoch: int, stats: dict) -> bool:
        terms = stats["terms"] + [0.0] * (4 - len(stats["terms"]))
        row = {"epoch": epoch, "L0": terms[0], "L1": terms[1], "L2": terms[2], "L3": terms[3],
               "train_acc": float(np.mean((predict_proba(cur, train.X) >= 0.5) == train.y))}
        if val is not None:
            row["val_acc"] = float(np.mean((predict_proba(cur, val.X) >= 0.5) == val.y))
            row["val_amp"] = validation_amp(cur, val_risk, val_B, cfg.val_percentile) if val_B else float("nan")
        else:
            row["val_acc"] = row["val_amp"] = float("nan")
        history.append(row)
        log.info("finetune epoch %d: L0 %.4f L1 %.4f L2 %.4f L3 %.4f acc %.3f val_amp %.4f",
                 epoch, row["L0"], row["L1"], row["L2"], row["L3"], row["train_acc"], row["val_amp"])
        if np.isfinite(row["val_amp"]):
            amps.append(row["val_amp"])
            return _plateau(amps, cfg.patience, cfg.plateau_tol)
        return False

    out = fit(model, train.X, train.y, cfg.train_config(), extra_terms=extra, on_epoch=on_epoch)
    return FinetuneResult(out, history)
