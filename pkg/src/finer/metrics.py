"""Explanation quality: DA, MPD, AMP, global fidelity, intersection size, ROC/AUC."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from finer.ic import BaselineSet, ICIndicator, Masker, roi_size, select_roi, top_indices
from finer.net import Model, predict_proba

DEFAULT_K_GRID = (1, 2, 3, 5, 8, 12, 16)
DEFAULT_P_GRID = (5, 10, 20, 40, 60, 80)


def _scores(e) -> np.ndarray:
    return np.asarray(getattr(e, "scores", e), dtype=np.float64)


def _mat(x) -> np.ndarray:
    return np.asarray(getattr(x, "matrix", x), dtype=np.float64)


def da_k(x_v, e_v, model: Model, k: int) -> float:
    """f(x') with the k highest-scoring cells of e_v set to zero."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = _mat(x_v)
    vals = np.asarray(getattr(e_v, "values", e_v), dtype=np.float64).ravel()
    cells = top_indices(vals, min(k, vals.size))
    x2 = x.ravel().copy()
    x2[cells] = 0.0
    out = float(predict_proba(model, x2.reshape(x.shape))[0])
    assert 0.0 <= out <= 1.0
    return out


def mpd_k(x_v, e, model: Model, k: int, I: ICIndicator, B: BaselineSet,
          masker: Masker | None = None, fx: float | None = None) -> float:
    """f(x) - f(x with its top-k ICs replaced by benign ones)."""
    scores = _scores(e)
    if scores.size != len(I):
        raise ValueError("attribution length does not match the IC array")
    masker = masker or Masker(x_v, I, B)
    r = select_roi(scores, k=min(k, scores.size))
    # single-sample calls so callers that pass ``fx`` get bit-identical results
    before = float(predict_proba(model, masker.x_v)[0]) if fx is None else fx
    out = before - float(predict_proba(model, masker.apply(r.indices))[0])
    assert -1.0 <= out <= 1.0
    return out


@dataclass
class FidelityReport:
    values: list[float]
    mean: float | None
    k: int
    explainer: str
    filtered: int
    seed: int = 0
    sample_ids: list[str] = field(default_factory=list)

    @property
    def no_data(self) -> bool:
        return not self.values


@dataclass(frozen=True)
class CurvePoint:
    x: float
    y: float


def global_fidelity(model: Model, items: Sequence[tuple[str, np.ndarray, ICIndicator]],
                    attributions: Mapping[str, object], k: int, B: BaselineSet,
                    explainer: str = "") -> FidelityReport:
    """Mean MPD@k over samples with more than k valid ICs.

    ``items`` are (sample id, x_v, indicator); ``attributions`` maps a sample
    id to its IC attribution.
    """
    vals, ids = [], []
    for sid, x_v, I in sorted(items, key=lambda t: t[0]):
        if len(I) <= k:
            continue
        vals.append(mpd_k(x_v, attributions[sid], model, k, I, B))
        ids.append(sid)
    mean = float(np.mean(vals)) if vals else None
    return FidelityReport(vals, mean, k, explainer, len(items) - len(vals), B.seed, ids)


def amp(model: Model, items: Sequence[tuple[str, np.ndarray, ICIndicator]],
        attributions: Mapping[str, Mapping[str, object]], p: float, B: BaselineSet) -> float:
    """Average f(x') after masking the top-p% ICs, over all (explainer, sample) pairs.

    ``attributions`` maps explainer id -> sample id -> IC attribution.
    """
    if not attributions:
        raise ValueError("need at least one explainer")
    total, count = 0.0, 0
    for name in sorted(attributions):
        per = attributions[name]
        batch = []
        for sid, x_v, I in items:
            r = select_roi(_scores(per[sid]), p=p)
            batch.append(Masker(x_v, I, B).apply(r.indices))
        if batch:
            total += float(predict_proba(model, np.stack(batch)).sum())
            count += len(batch)
    out = total / count
    assert 0.0 <= out <= 1.0
    return out


def intersection_size(e1, e2, k: int) -> float:
    a, b = _scores(e1), _scores(e2)
    if a.size != b.size:
        raise ValueError("attributions cover different IC arrays")
    c = roi_size(a.size, k=k)
    return len(set(top_indices(a, c)) & set(top_indices(b, c))) / c


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """ROC points from a descending threshold sweep; tied scores move together."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    P, N = labels.sum(), (~labels).sum()
    tpr = np.r_[0.0, tp / P] if P else np.r_[0.0, np.zeros_like(tp, dtype=float)]
    fpr = np.r_[0.0, fp / N] if N else np.r_[0.0, np.zeros_like(fp, dtype=float)]
    return fpr, tpr


def auc(scores, labels) -> float:
    fpr, tpr = roc_curve(scores, labels)
    out = float(np.trapezoid(tpr, fpr))
    assert -1e-12 <= out <= 1.0 + 1e-12
    return min(max(out, 0.0), 1.0)


@dataclass
class ROCResult:
    pooled_auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    local: list[float | None]

    @property
    def mean_local(self) -> float | None:
        vals = [v for v in self.local if v is not None]
        return float(np.mean(vals)) if vals else None


def roc_auc(attributions: Sequence[object], truths: Sequence[Sequence[int]]) -> ROCResult:
    """Pooled and per-sample AUC of IC scores against ground-truth IC sets.

    A sample whose ICs are all positive or all negative has no local AUC
    (``None``) but still joins the pooled curve.
    """
    all_s, all_y, local = [], [], []
    for e, truth in zip(attributions, truths):
        s = _scores(e)
        y = np.zeros(s.size, dtype=bool)
        y[list(truth)] = True
        all_s.append(s)
        all_y.append(y)
        local.append(auc(s, y) if 0 < y.sum() < y.size else None)
    s, y = np.concatenate(all_s), np.concatenate(all_y)
    fpr, tpr = roc_curve(s, y)
    return ROCResult(auc(s, y), fpr, tpr, local)
