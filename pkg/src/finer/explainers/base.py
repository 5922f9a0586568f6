from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from finer.ic import ICIndicator
from finer.net import Model, predict_proba


@dataclass
class Attribution:
    """Cell-level importance scores for one input."""

    values: np.ndarray
    forwards: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("attribution contains non-finite values")


@dataclass
class ICAttribution:
    scores: np.ndarray
    explainer: str = ""
    forwards: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1:
            raise ValueError("IC attribution must be a vector")
        if not np.all(np.isfinite(self.scores)):
            raise FloatingPointError("IC attribution contains non-finite values")

    def __len__(self) -> int:
        return self.scores.size


class BlackBox:
    """Output-only access to a classifier, counting every input it scores.

    Perturbation explainers receive one of these instead of the model, so
    they cannot reach middle-layer activations.
    """

    def __init__(self, model: Model):
        self._predict = lambda X: predict_proba(model, X)
        self.calls = 0

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        self.calls += X.shape[0]
        return self._predict(X)


def ic_aggregate(e_v, I: ICIndicator, explainer: str = "", forwards: int = 0) -> ICAttribution:
    """score_j = || e_v restricted to IC j's cells ||_1."""
    values = np.asarray(getattr(e_v, "values", e_v), dtype=np.float64)
    if values.shape != I.I.shape:
        raise ValueError(f"attribution shape {values.shape} does not match indicator {I.I.shape}")
    absval = np.abs(values).sum(axis=1)
    scores = np.array([absval[I.row_slice(j)].sum() for j in range(len(I))])
    if forwards == 0:
        forwards = getattr(e_v, "forwards", 0)
    return ICAttribution(scores, explainer, forwards)


@dataclass(frozen=True)
class ExplainerConfig:
    ig_steps: int = 64
    n_neighbors: int = 1000
    off_prob: float = 0.5
    kernel_width: float | None = None   # default 0.75 * sqrt(|I|)
    ridge: float = 1e-3
    lemna_components: int = 3
    lemna_penalty: float = 1e-2
    lemna_max_iter: int = 200
    lemna_tol: float = 1e-5
    shapley_exact_cap: int = 12
    shapley_permutations: int = 200
