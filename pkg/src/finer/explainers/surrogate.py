"""Perturbation explainers with surrogate models: LIME and LEMNA, at IC level.

Neighbors are binary on/off patterns over the valid ICs; an "off" IC is
replaced by its benign baseline block (see :class:`finer.ic.Masker`). Row 0 of
every neighborhood is the unperturbed instance.
"""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy.special import logsumexp

from finer.explainers.base import Attribution, ExplainerConfig, ICAttribution
from finer.ic import Masker

log = logging.getLogger(__name__)


def neighborhood(n_features: int, n_neighbors: int, seed: int, off_prob: float = 0.5) -> np.ndarray:
    """(N, n_features) boolean ON patterns; row 0 keeps every feature."""
    rng = np.random.default_rng(seed)
    on = np.ones((n_neighbors, n_features), dtype=bool)
    on[1:] = rng.random((n_neighbors - 1, n_features)) >= off_prob
    return on


def kernel_weights(on: np.ndarray, width: float | None = None) -> np.ndarray:
    """Exponential kernel over the Hamming distance to the all-on pattern."""
    n = on.shape[1]
    if width is None:
        width = 0.75 * math.sqrt(n)
    d = (~on).sum(axis=1).astype(np.float64)
    return np.sqrt(np.exp(-(d ** 2) / width ** 2))


def _solve_normal(G: np.ndarray, rhs: np.ndarray, ridge: float) -> np.ndarray:
    try:
        if np.linalg.cond(G) < 1e12:
            return np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError:
        pass
    log.debug("singular normal equations, ridge %.1e", ridge)
    return np.linalg.solve(G + ridge * np.eye(G.shape[0]), rhs)


def tv_prox(y: np.ndarray, lam: float) -> np.ndarray:
    """argmin_x 0.5*||x - y||^2 + lam * sum |x[i+1] - x[i]| (Condat's direct algorithm)."""
    y = np.asarray(y, dtype=np.float64)
    N = y.size
    if N <= 1 or lam <= 0:
        return y.copy()
    x = np.empty(N)
    k = k0 = kplus = kminus = 0
    umin, umax = lam, -lam
    vmin, vmax = y[0] - lam, y[0] + lam
    while True:
        while k == N - 1:
            if umin < 0.0:
                x[k0:kminus + 1] = vmin
                k0 = kminus + 1
                k = kminus = k0
                vmin = y[k]
                umin = lam
                umax = vmin + umin - vmax
            elif umax > 0.0:
                x[k0:kplus + 1] = vmax
                k0 = kplus + 1
                k = kplus = k0
                vmax = y[k]
                umax = -lam
                umin = vmax + umax - vmin
            else:
                vmin += umin / (k - k0 + 1)
                x[k0:k + 1] = vmin
                return x
        umin += y[k + 1] - vmin
        if umin < -lam:
            x[k0:kminus + 1] = vmin
            k0 = kminus + 1
            k = kplus = kminus = k0
            vmin = y[k]
            vmax = vmin + 2 * lam
            umin, umax = lam, -lam
            continue
        umax += y[k + 1] - vmax
        if umax > lam:
            x[k0:kplus + 1] = vmax
            k0 = kplus + 1
            k = kplus = kminus = k0
            vmax = y[k]
            vmin = vmax - 2 * lam
            umin, umax = lam, -lam
            continue
        k += 1
        if umin >= lam:
            kminus = k
            vmin += (umin - lam) / (kminus - k0 + 1)
            umin = lam
        if umax <= -lam:
            kplus = k
            vmax += (umax + lam) / (kplus - k0 + 1)
            umax = -lam


def fit_linear(Z: np.ndarray, y: np.ndarray, a: np.ndarray, penalty: float = 0.0,
               ridge: float = 1e-3, warm: np.ndarray | None = None,
               max_iter: int = 5000, tol: float = 1e-12) -> tuple[np.ndarray, float]:
    """Weighted least squares with an optional fused-lasso penalty on the coefficients.

    Minimizes 0.5 * sum_i a_i (y_i - c - Z_i.b)^2 / sum(a) + penalty * TV(b).
    The intercept is profiled out by weighted centering; the penalized case
    runs FISTA with the exact TV proximal step. Returns (b, c).
    """
    Z = np.asarray(Z, dtype=np.float64)
    s = a.sum()
    if s <= 0:
        return np.zeros(Z.shape[1]), 0.0
    w = a / s
    zm = w @ Z
    ym = float(w @ y)
    Zc = Z - zm
    yc = y - ym
    G = Zc.T @ (w[:, None] * Zc)
    rhs = Zc.T @ (w * yc)
    if penalty <= 0:
        b = _solve_normal(G, rhs, ridge)
        return b, ym - float(zm @ b)
    L = max(np.linalg.eigvalsh(G)[-1], 1e-12)
    b = np.zeros(Z.shape[1]) if warm is None else warm.copy()
    v, t = b.copy(), 1.0
    for _ in range(max_iter):
        b_next = tv_prox(v - (G @ v - rhs) / L, penalty / L)
        t_next = (1 + math.sqrt(1 + 4 * t * t)) / 2
        v = b_next + ((t - 1) / t_next) * (b_next - b)
        done = np.max(np.abs(b_next - b)) < tol
        b, t = b_next, t_next
        if done:
            break
    return b, ym - float(zm @ b)


def _query(O, masker: Masker, on: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty(on.shape[0])
    for s in range(0, on.shape[0], chunk):
        out[s:s + chunk] = O(masker.batch(~on[s:s + chunk]))
    return out


def lime_explain(O, masker: Masker, n_neighbors: int = 1000, seed: int = 0,
                 cfg: ExplainerConfig = ExplainerConfig(), on: np.ndarray | None = None) -> ICAttribution:
    """Weighted linear surrogate over IC on/off patterns; returns its coefficients."""
    n = masker.n_ics
    if n_neighbors < n + 1:
        raise ValueError(f"need at least {n + 1} neighbors for {n} ICs")
    if on is None:
        on = neighborhood(n, n_neighbors, seed, cfg.off_prob)
    y = _query(O, masker, on)
    a = kernel_weights(on, cfg.kernel_width)
    b, c = fit_linear(on.astype(np.float64), y, a, 0.0, cfg.ridge)
    return ICAttribution(b, "lime", on.shape[0], {"intercept": c})


def _gauss_logpdf(y, mu, var):
    return -0.5 * (np.log(2 * np.pi * var) + (y - mu) ** 2 / var)


def lemna_explain(O, masker: Masker, n_neighbors: int = 1000, seed: int = 0,
                  cfg: ExplainerConfig = ExplainerConfig(), K: int | None = None,
                  penalty: float | None = None, on: np.ndarray | None = None) -> ICAttribution:
    """Mixture of K fused-lasso linear regressions fitted by EM.

    Uses the same neighborhood and kernel weights as LIME. The returned
    coefficients belong to the component most responsible for the
    unperturbed instance.
    """
    K = cfg.lemna_components if K is None else K
    penalty = cfg.lemna_penalty if penalty is None else penalty
    n = masker.n_ics
    if n_neighbors < n + 1:
        raise ValueError(f"need at least {n + 1} neighbors for {n} ICs")
    if K < 1:
        raise ValueError("K must be >= 1")
    if on is None:
        on = neighborhood(n, n_neighbors, seed, cfg.off_prob)
    y = _query(O, masker, on)
    Z = on.astype(np.float64)
    kw = kernel_weights(on, cfg.kernel_width)
    N = Z.shape[0]
    rng = np.random.default_rng([seed, 7])
    resp = np.ones((N, 1)) if K == 1 else rng.dirichlet(np.ones(K), size=N)
    betas = [None] * K
    coefs = np.zeros((K, n))
    icpt = np.zeros(K)
    var = np.ones(K)
    pi = np.full(K, 1.0 / K)
    best = (-np.inf, None)
    prev = -np.inf
    converged = False
    it = 0
    for it in range(1, cfg.lemna_max_iter + 1):
        for k in range(K):
            a = kw * resp[:, k]
            coefs[k], icpt[k] = fit_linear(Z, y, a, penalty, cfg.ridge, betas[k])
            betas[k] = coefs[k]
            resid = y - icpt[k] - Z @ coefs[k]
            var[k] = max(float(a @ resid ** 2) / max(a.sum(), 1e-300), 1e-6)
            pi[k] = max(float(a.sum() / kw.sum()), 1e-12)
        pi /= pi.sum()
        logp = np.log(pi)[None] + _gauss_logpdf(y[:, None], icpt[None] + Z @ coefs.T, var[None])
        norm = logsumexp(logp, axis=1)
        ll = float(kw @ norm / kw.sum())
        resp = np.exp(logp - norm[:, None])
        if ll > best[0]:
            best = (ll, (coefs.copy(), icpt.copy(), resp[0].copy()))
        if abs(ll - prev) < cfg.lemna_tol:
            converged = True
            break
        prev = ll
    if not converged:
        log.info("LEMNA EM stopped at the %d-iteration cap", cfg.lemna_max_iter)
    c_best, i_best, r0 = best[1]
    comp = int(np.argmax(r0))
    return ICAttribution(c_best[comp], "lemna", N,
                         {"converged": converged, "iterations": it, "component": comp,
                          "intercept": float(i_best[comp]), "loglik": best[0]})


def lime_feature_explain(O, x_v, n_neighbors: int, seed: int = 0,
                         cfg: ExplainerConfig = ExplainerConfig()) -> Attribution:
    """Feature-level LIME over token rows, with zero-nullification of "off" rows.

    This is the unadjusted baseline used for cost comparisons: the surrogate
    has one coefficient per non-padding row of x_v.
    """
    x_v = np.asarray(getattr(x_v, "matrix", x_v), dtype=np.float64)
    rows = np.flatnonzero(np.any(x_v != 0, axis=1))
    d = rows.size
    if n_neighbors < d + 1:
        raise ValueError(f"need at least {d + 1} neighbors for {d} features")
    on = neighborhood(d, n_neighbors, seed, cfg.off_prob)
    y = np.empty(n_neighbors)
    for s in range(0, n_neighbors, 128):
        part = on[s:s + 128]
        X = np.broadcast_to(x_v, (part.shape[0],) + x_v.shape).copy()
        keep = np.ones((part.shape[0], x_v.shape[0]), dtype=bool)
        keep[:, rows] = part
        X *= keep[:, :, None]
        y[s:s + 128] = O(X)
    b, _ = fit_linear(on.astype(np.float64), y, kernel_weights(on, cfg.kernel_width), 0.0, cfg.ridge)
    values = np.zeros_like(x_v)
    values[rows] = (b / x_v.shape[1])[:, None]
    return Attribution(values, forwards=n_neighbors)


def neighbors_for(n_features: int, per_parameter: float) -> int:
    """Neighbor budget giving ``per_parameter`` samples per surrogate parameter."""
    return int(math.ceil(per_parameter * (n_features + 1)))
