"""Task-aware explanation generation: domain-adjusted explainers combined by local MPD weights."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from finer.explainers import EXPLAINERS, ExplainerConfig, ICAttribution, explain_ic
from finer.ic import ROI, BaselineSet, ICIndicator, Masker, select_roi
from finer.metrics import mpd_k
from finer.net import Model, predict_proba

SCENARIOS: dict[str, tuple[str, ...]] = {
    "black-box": ("lime", "lemna", "shapley"),
    "low-cost": ("gradients", "ig", "deeplift"),
    "unlimited": EXPLAINERS,
}


def scenario_explainers(scenario: str | tuple[str, ...]) -> tuple[str, ...]:
    if isinstance(scenario, str):
        try:
            return SCENARIOS[scenario]
        except KeyError:
            raise KeyError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}") from None
    return tuple(scenario)


def normalize_attribution(e) -> np.ndarray:
    """Shift to a zero minimum and scale to unit sum; constant input becomes uniform."""
    s = np.asarray(getattr(e, "scores", e), dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty attribution")
    if not np.all(np.isfinite(s)):
        raise ValueError("attribution has non-finite values")
    shifted = s - s.min()
    total = shifted.sum()
    if total <= 0:
        return np.full(s.size, 1.0 / s.size)
    return shifted / total


def normalize_weights(w) -> np.ndarray:
    """Clip negatives to zero and L1-normalize; all non-positive gives uniform."""
    w = np.clip(np.asarray(w, dtype=np.float64), 0.0, None)
    total = w.sum()
    if not total > 0:
        return np.full(w.size, 1.0 / w.size)
    return w / total


@dataclass
class DomainExplanation:
    sample_id: str
    scenario: str
    k: int
    roi: ROI = field(default_factory=ROI)
    roi_names: list[str] = field(default_factory=list)
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    explainers: dict[str, dict] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)
    mpd: float | None = None
    reason: str = ""

    @property
    def empty(self) -> bool:
        return not self.roi.indices

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "scenario": self.scenario,
            "k": self.k,
            "reason": self.reason,
            "explainers": {
                name: {"scores": d["scores"].tolist(), "weight": self.weights.get(name), "forwards": d["forwards"]}
                for name, d in self.explainers.items()
            },
            "final_scores": self.scores.tolist(),
            "roi": list(self.roi.indices),
            "roi_names": self.roi_names,
            "mpd": self.mpd,
        }


def _attributions(names, model, x_v, I, B, b_v, cfg, seed, given):
    out = {}
    for name in names:
        if given is not None and name in given:
            out[name] = given[name]
        else:
            out[name] = explain_ic(name, model, x_v, I, B, b_v, cfg, seed)
    return out


def _combine(x_v, I: ICIndicator, model: Model, scenario, k: int, B: BaselineSet, b_v,
             cfg: ExplainerConfig, seed: int, weight_B: BaselineSet | None, eval_B: BaselineSet | None,
             attributions: Mapping[str, ICAttribution] | None, weight_k: int | None,
             weighted: bool, sample_id: str) -> DomainExplanation:
    if k < 1:
        raise ValueError("k must be >= 1")
    x_v = np.asarray(getattr(x_v, "matrix", x_v), dtype=np.float64)
    label = scenario if isinstance(scenario, str) else "+".join(scenario)
    sid = sample_id or I.sample_id
    fx = float(predict_proba(model, x_v)[0])
    if fx < 0.5:
        return DomainExplanation(sid, label, k, reason="normal-sample")
    names = scenario_explainers(scenario)
    attr = _attributions(names, model, x_v, I, B, b_v, cfg, seed, attributions)
    E = np.stack([normalize_attribution(attr[n]) for n in names])
    weight_B = weight_B or B
    eval_B = eval_B or weight_B
    masker = Masker(x_v, I, weight_B)
    raw_w = np.array([mpd_k(x_v, attr[n], model, weight_k or k, I, weight_B, masker, fx) for n in names])
    w = normalize_weights(raw_w) if weighted else np.ones(len(names))
    final = E.T @ w
    roi = select_roi(final, k=k)
    mpd = mpd_k(x_v, final, model, k, I, eval_B, None, fx)
    return DomainExplanation(
        sid, label, k, roi, I.names(roi.indices), final,
        {n: {"scores": attr[n].scores, "forwards": attr[n].forwards, "mpd": float(m)}
         for n, m in zip(names, raw_w)},
        {n: float(v) for n, v in zip(names, w)},
        mpd,
    )


def explain_ensemble(x_v, I: ICIndicator, model: Model, scenario, k: int, B: BaselineSet, b_v=None,
                     cfg: ExplainerConfig = ExplainerConfig(), seed: int = 0,
                     weight_B: BaselineSet | None = None, eval_B: BaselineSet | None = None,
                     attributions: Mapping[str, ICAttribution] | None = None,
                     weight_k: int | None = None, sample_id: str = "") -> DomainExplanation:
    """Weight each explainer by its own MPD@k on this sample and combine normalized scores.

    ``weight_B`` is the baseline set used for the MPD weighting and ``eval_B``
    the one behind the MPD stored on the result (both default to ``B``).
    ``attributions`` may supply precomputed IC attributions.
    """
    return _combine(x_v, I, model, scenario, k, B, b_v, cfg, seed, weight_B, eval_B, attributions,
                    weight_k, True, sample_id)


def naive_ensemble(x_v, I: ICIndicator, model: Model, scenario, k: int, B: BaselineSet, b_v=None,
                   cfg: ExplainerConfig = ExplainerConfig(), seed: int = 0,
                   eval_B: BaselineSet | None = None,
                   attributions: Mapping[str, ICAttribution] | None = None,
                   sample_id: str = "") -> DomainExplanation:
    """Plain sum of the normalized attributions (unit weights)."""
    return _combine(x_v, I, model, scenario, k, B, b_v, cfg, seed, None, eval_B, attributions,
                    None, False, sample_id)
