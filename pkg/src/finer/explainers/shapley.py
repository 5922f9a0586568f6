from __future__ import annotations

import math

import numpy as np

from finer.explainers.base import ExplainerConfig, ICAttribution
from finer.ic import Masker


class InfeasibleError(ValueError):
    """Exact enumeration would need more coalitions than allowed."""


def coalition_table(n: int) -> np.ndarray:
    """(2^n, n) boolean membership table; row s has bit j set iff player j is in S."""
    s = np.arange(1 << n)[:, None]
    return ((s >> np.arange(n)[None]) & 1).astype(bool)


def shapley_from_values(values: np.ndarray, n: int) -> np.ndarray:
    """Exact Shapley values from v(S) indexed by coalition bitmask."""
    masks = np.arange(1 << n)
    size = np.array([bin(int(s)).count("1") for s in masks])
    weight = np.array([math.factorial(k) * math.factorial(n - k - 1) / math.factorial(n) if k < n else 0.0
                       for k in range(n + 1)])
    phi = np.zeros(n)
    for j in range(n):
        bit = 1 << j
        without = masks[(masks & bit) == 0]
        phi[j] = np.sum(weight[size[without]] * (values[without | bit] - values[without]))
    return phi


def check_exact(n_players: int, cap: int) -> None:
    if n_players > cap:
        raise InfeasibleError(f"exact Shapley over {n_players} players needs 2^{n_players} coalitions "
                              f"(cap 2^{cap}); use sampled mode")


def shapley_explain(O, masker: Masker, budget: str | int = "exact", seed: int = 0,
                    cfg: ExplainerConfig = ExplainerConfig()) -> ICAttribution:
    """IC-level Shapley values for v(S) = f(mask(x, complement(S))).

    ``budget`` is ``"exact"``, ``"auto"`` (exact up to the cap, else sampled)
    or an integer number of sampled permutations.
    """
    n = masker.n_ics
    if budget == "auto":
        budget = "exact" if n <= cfg.shapley_exact_cap else cfg.shapley_permutations
    if budget == "exact":
        check_exact(n, cfg.shapley_exact_cap)
        members = coalition_table(n)
        values = np.empty(members.shape[0])
        for s in range(0, members.shape[0], 256):
            values[s:s + 256] = O(masker.batch(~members[s:s + 256]))
        return ICAttribution(shapley_from_values(values, n), "shapley", members.shape[0],
                             {"mode": "exact", "v_empty": float(values[0]), "v_full": float(values[-1])})
    perms = int(budget)
    if perms < 1:
        raise ValueError("need at least one permutation")
    rng = np.random.default_rng(seed)
    orders = np.stack([rng.permutation(n) for _ in range(perms)])
    # coalition after adding the first t players of each permutation, t = 1..n
    members = np.zeros((perms, n, n), dtype=bool)
    for t in range(n):
        members[np.arange(perms)[:, None], t:, orders[:, t][:, None]] = True
    flat = members.reshape(perms * n, n)
    v_empty = float(O(masker.batch(np.ones((1, n), dtype=bool)))[0])
    vals = np.empty(flat.shape[0])
    for s in range(0, flat.shape[0], 256):
        vals[s:s + 256] = O(masker.batch(~flat[s:s + 256]))
    vals = vals.reshape(perms, n)
    prev = np.concatenate([np.full((perms, 1), v_empty), vals[:, :-1]], axis=1)
    phi = np.zeros(n)
    np.add.at(phi, orders.ravel(), (vals - prev).ravel())
    return ICAttribution(phi / perms, "shapley", 1 + flat.shape[0], {"mode": "sampled", "permutations": perms})


def shapley_feature_explain(O, x_v, cap: int = 12) -> np.ndarray:
    """Cell-level exact Shapley: one player per cell of x_v. Guarded by the cap."""
    x_v = np.asarray(getattr(x_v, "matrix", x_v))
    check_exact(int(x_v.size), cap)
    n = x_v.size
    members = coalition_table(n)
    X = members.reshape((-1,) + x_v.shape) * x_v[None]
    return shapley_from_values(O(X), n).reshape(x_v.shape)
