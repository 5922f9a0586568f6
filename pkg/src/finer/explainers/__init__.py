"""The six attribution methods with IC-level domain adjustment.

Gradient-family methods (``gradients``, ``ig``, ``deeplift``) attribute cells
of x_v and are aggregated to ICs; perturbation methods (``lime``, ``lemna``,
``shapley``) sample or enumerate IC on/off patterns directly and only see
model outputs.
"""

from __future__ import annotations

import zlib

import numpy as np

from finer.explainers.base import Attribution, BlackBox, ExplainerConfig, ICAttribution, ic_aggregate
from finer.explainers.gradient import deeplift_explain, gradients_explain, ig_explain
from finer.explainers.shapley import InfeasibleError, shapley_explain, shapley_feature_explain
from finer.explainers.surrogate import (
    fit_linear, kernel_weights, lemna_explain, lime_explain, lime_feature_explain, neighborhood,
    neighbors_for, tv_prox,
)
from finer.ic import BaselineSet, ICIndicator, Masker
from finer.net import Model

GRADIENT_FAMILY = ("gradients", "ig", "deeplift")
PERTURBATION_FAMILY = ("lime", "lemna", "shapley")
EXPLAINERS = GRADIENT_FAMILY + PERTURBATION_FAMILY


def sub_seed(seed: int, label: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(label.encode())]).generate_state(1)[0])


def explain_ic(name: str, model: Model, x_v, I: ICIndicator, B: BaselineSet, b_v=None,
               cfg: ExplainerConfig = ExplainerConfig(), seed: int = 0) -> ICAttribution:
    """IC attribution of one sample with explainer ``name``.

    ``b_v`` is the gradient-family baseline input; perturbation methods mask
    with ``B`` instead.
    """
    x_v = np.asarray(getattr(x_v, "matrix", x_v), dtype=np.float64)
    if name in GRADIENT_FAMILY:
        if name == "gradients":
            e = gradients_explain(model, x_v)
        elif name == "ig":
            e = ig_explain(model, x_v, b_v, cfg.ig_steps)
        else:
            e = deeplift_explain(model, x_v, b_v)
        return ic_aggregate(e, I, name, e.forwards)
    if name not in PERTURBATION_FAMILY:
        raise KeyError(f"unknown explainer {name!r}; choose from {', '.join(EXPLAINERS)}")
    O = BlackBox(model)
    masker = Masker(x_v, I, B)
    s = sub_seed(seed, name)
    if name == "lime":
        out = lime_explain(O, masker, cfg.n_neighbors, s, cfg)
    elif name == "lemna":
        out = lemna_explain(O, masker, cfg.n_neighbors, s, cfg)
    else:
        out = shapley_explain(O, masker, "auto", s, cfg)
    assert out.forwards == O.calls, "forward accounting mismatch"
    return out


__all__ = [
    "Attribution", "BlackBox", "ExplainerConfig", "ICAttribution", "InfeasibleError",
    "EXPLAINERS", "GRADIENT_FAMILY", "PERTURBATION_FAMILY",
    "deeplift_explain", "explain_ic", "fit_linear", "gradients_explain", "ic_aggregate", "ig_explain",
    "kernel_weights", "lemna_explain", "lime_explain", "lime_feature_explain", "neighborhood",
    "neighbors_for", "shapley_explain", "shapley_feature_explain", "sub_seed", "tv_prox",
]
