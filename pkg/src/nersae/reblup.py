"""Robust EBLUP for the nested error regression model.

The variance matrix of area ``i`` is ``V_i = sigma_e2 I + sigma_v2 J``
(compound symmetry), so every inverse and trace has a closed form in
``gamma_i = sigma_v2 / (sigma_v2 + sigma_e2 / n_i)``.

Two fitting routes are provided:

``"marginal"`` (default)
    beta and delta = (sigma_v2, sigma_e2) from the Huber-robustified
    marginal likelihood equations

        sum_i X_i' V_i^-1 U_i^1/2 psi(r_i) = 0,
        sum_i psi(r_i)' U_i^1/2 V_i^-1 dV_i/d delta_l V_i^-1 U_i^1/2 psi(r_i)
            = K sum_i tr(V_i^-1 dV_i/d delta_l),

    with ``r_i = U_i^-1/2 (y_i - X_i beta)`` and ``U_i = diag(V_i)``.  Since V
    is linear in delta, the second set reads ``a(delta) = A(delta) delta``
    and is solved by the fixed point ``delta <- A^-1 a``.  The effects v_i
    then solve the robust v-equation with beta and delta held fixed.
``"fellner"``
    alternates :func:`robust_effects_solve` (joint robust Henderson system)
    with :func:`robust_variance_update`.

Both reduce to Gaussian maximum likelihood EBLUP as ``c -> inf``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import stats

from .data import SurveyDataset, design_check
from .samplers import RngStream

__all__ = [
    "HuberPsi",
    "REBLUPFit",
    "ConvergenceError",
    "huber_psi",
    "robust_effects_solve",
    "robust_variance_update",
    "fit_reblup",
    "bootstrap_mse",
]

VAR_FLOOR = 1e-8


class ConvergenceError(RuntimeError):
    """Raised when iterative fitting fails in a way results cannot absorb."""


def huber_psi(u, c: float):
    """Huber's psi: ``u`` clipped to ``[-c, c]``."""
    return np.clip(u, -c, c)


@dataclass(frozen=True)
class HuberPsi:
    c: float = 1.345

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"Huber constant must be positive, got {self.c}")

    @property
    def K(self) -> float:
        """``E[psi(U)^2]`` for standard normal U."""
        c = self.c
        inside = math.erf(c / math.sqrt(2.0))
        return c * c * (1.0 - inside) + inside - 2.0 * c * stats.norm.pdf(c)

    def __call__(self, u):
        return huber_psi(u, self.c)

    def weight(self, u):
        """``psi(u)/u`` with ``w(0) = 1``."""
        a = np.abs(np.asarray(u, float))
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(a <= self.c, 1.0, self.c / a)


@dataclass
class REBLUPFit:
    beta: np.ndarray
    sigma_v2: float
    sigma_e2: float
    v: np.ndarray
    theta: np.ndarray
    iterations_used: int
    converged: bool
    final_residual_norm: float
    psi: HuberPsi
    method: str = "marginal"
    mse: Optional[np.ndarray] = None
    bootstrap_failures: int = 0

    @property
    def delta(self) -> tuple:
        return (self.sigma_v2, self.sigma_e2)

    @property
    def rmse(self) -> Optional[np.ndarray]:
        return None if self.mse is None else np.sqrt(self.mse)


# ---------------------------------------------------------------------------
# Henderson-type effects solve (joint beta, v)


def robust_effects_solve(
    data: SurveyDataset,
    beta,
    delta,
    psi: HuberPsi = HuberPsi(),
    tol: float = 1e-8,
    max_iter: int = 200,
    v0=None,
    update_beta: bool = True,
):
    """IRLS solution of the robustified mixed model equations.

    Solves, for fixed ``delta = (sigma_v2, sigma_e2)``,

        sum_ij x_ij psi(r_ij / sigma_e) / sigma_e = 0
        sum_j psi(r_ij / sigma_e) / sigma_e - psi(v_i / sigma_v) / sigma_v = 0

    with ``r_ij = y_ij - x_ij' beta - v_i``.  With ``update_beta=False`` only
    the v-equations are solved.  Returns ``(beta, v, converged, iterations)``.
    """
    sv2, se2 = map(float, delta)
    if not (sv2 > 0 and se2 > 0):
        raise ValueError("variance components must be positive")
    se, sv = math.sqrt(se2), math.sqrt(sv2)
    X, y, area, m, p = data.X, data.y, data.area, data.m, data.p
    beta = np.array(beta, float)
    v = np.zeros(m) if v0 is None else np.array(v0, float)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r = y - X @ beta - v[area]
        w = psi.weight(r / se)
        u = psi.weight(v / sv)
        wsum = data.area_sum(w)
        dv = wsum / se2 + u / sv2
        if update_beta:
            # absorb v: v_i = (sum_j w (y - x beta)) / (se2 * dv_i)
            wx = np.zeros((m, p))
            np.add.at(wx, area, w[:, None] * X)
            wy = data.area_sum(w * y)
            A = X.T @ (w[:, None] * X) / se2 - (wx.T / (se2 * se2 * dv)) @ wx
            b = X.T @ (w * y) / se2 - (wx.T / (se2 * se2 * dv)) @ wy
            try:
                new_beta = np.linalg.solve(A, b)
            except np.linalg.LinAlgError as exc:
                raise ConvergenceError("singular weighted mixed model system") from exc
            new_v = (wy - wx @ new_beta) / (se2 * dv)
        else:
            new_beta = beta
            new_v = data.area_sum(w * (y - X @ beta)) / (se2 * dv)
        scale = max(np.max(np.abs(beta)), np.max(np.abs(v)), 1.0)
        change = max(np.max(np.abs(new_beta - beta)), np.max(np.abs(new_v - v))) / scale
        beta, v = new_beta, new_v
        if change < tol:
            converged = True
            break
    return beta, v, converged, it


def _mme_v_block_trace(data, w, u, sv2, se2):
    # diagonal of the v-block of the inverse weighted MME with beta fixed
    dv = data.area_sum(w) / se2 + u / sv2
    return float(np.sum(1.0 / dv))


def robust_variance_update(
    data: SurveyDataset, beta, v, delta, psi: HuberPsi = HuberPsi(), damping: float = 0.5
):
    """One fixed-point step on the robustified ML variance equations.

    Classical ML fixed point (exact at c = inf)::

        sigma_v2 <- sum v_i^2 / (m - tr T / sigma_v2)
        sigma_e2 <- sum r_ij^2 / (n - m + tr T / sigma_v2)

    where T is the prediction-variance block of v from the mixed model
    equations with beta fixed.  The robust form replaces ``x^2`` by
    ``s^2 psi(x/s)^2 / K``.  A step to a non-finite or non-positive value is
    replaced by ``damping`` times the current value, and results are floored.
    """
    sv2, se2 = map(float, delta)
    if not (sv2 > 0 and se2 > 0):
        raise ValueError("variance components must be positive")
    se, sv = math.sqrt(se2), math.sqrt(sv2)
    K = psi.K
    r = data.y - data.X @ np.asarray(beta, float) - np.asarray(v, float)[data.area]
    v = np.asarray(v, float)
    trT = _mme_v_block_trace(data, np.ones(data.n), np.ones(data.m), sv2, se2)
    num_v = sv2 * float(np.sum(psi(v / sv) ** 2)) / K
    num_e = se2 * float(np.sum(psi(r / se) ** 2)) / K
    new_v = num_v / (data.m - trT / sv2)
    new_e = num_e / (data.n - data.m + trT / sv2)
    if not math.isfinite(new_v) or new_v <= 0:
        new_v = damping * sv2
    if not math.isfinite(new_e) or new_e <= 0:
        new_e = damping * se2
    if not (math.isfinite(new_v) and math.isfinite(new_e)):
        raise ConvergenceError("variance update produced non-finite values")
    return max(new_v, VAR_FLOOR), max(new_e, VAR_FLOOR)


# ---------------------------------------------------------------------------
# marginal robust ML


class _AreaSums:
    """Per-area sufficient pieces reused across iterations."""

    def __init__(self, data):
        self.n_i = data.n_i.astype(float)
        self.sx = np.zeros((data.m, data.p))
        np.add.at(self.sx, data.area, data.X)
        self.has = self.n_i > 0


def _marginal_beta_step(data, sums, beta, sv2, se2, psi):
    X, y, area = data.X, data.y, data.area
    su = math.sqrt(sv2 + se2)
    w = psi.weight((y - X @ beta) / su)
    gam = np.where(sums.has, sv2 / (sv2 + se2 / np.maximum(sums.n_i, 1)), 0.0)
    g = gam / np.maximum(sums.n_i, 1)
    wx = np.zeros_like(sums.sx)
    np.add.at(wx, area, w[:, None] * X)
    wy = data.area_sum(w * y)
    A = X.T @ (w[:, None] * X) - (sums.sx.T * g) @ wx
    b = X.T @ (w * y) - (sums.sx.T * g) @ wy
    return np.linalg.solve(A, b)


def _marginal_delta_step(data, sums, beta, sv2, se2, psi):
    X, y, area = data.X, data.y, data.area
    su2 = sv2 + se2
    ps = psi((y - X @ beta) / math.sqrt(su2))
    n = sums.n_i
    gam = np.where(sums.has, sv2 / (sv2 + se2 / np.maximum(n, 1)), 0.0)
    # g = V^-1 psi, per unit
    psum = data.area_sum(ps)
    g = (ps - (gam / np.maximum(n, 1))[area] * psum[area]) / se2
    gsum = data.area_sum(g)
    a = su2 * np.array([np.sum(gsum ** 2), np.sum(g ** 2)])
    lam = se2 + n * sv2
    K = psi.K
    A_vv = K * np.sum(np.where(sums.has, (n / lam) ** 2, 0.0))
    A_ve = K * np.sum(np.where(sums.has, n / lam ** 2, 0.0))
    A_ee = K * np.sum(np.where(sums.has, (n - 1) / se2 ** 2 + 1.0 / lam ** 2, 0.0))
    A = np.array([[A_vv, A_ve], [A_ve, A_ee]])
    new = np.linalg.solve(A, a)
    return new


def _start(data):
    beta, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
    e = data.y - data.X @ beta
    se2 = float(e @ e) / max(data.n - data.p, 1)
    means = data.area_sum(e)[data.n_i > 0] / data.n_i[data.n_i > 0]
    sv2 = max(float(np.var(means, ddof=1)) - se2 / float(np.mean(data.n_i[data.n_i > 0])), 0.1 * se2)
    return beta, sv2, se2


def fit_reblup(
    data: SurveyDataset,
    psi: HuberPsi = HuberPsi(),
    tol: float = 1e-6,
    max_iter: int = 200,
    method: str = "marginal",
    start=None,
) -> REBLUPFit:
    """Robust EBLUP fit; ``theta_i = Xbar_i' beta + v_i``.

    ``start`` may be a previous fit (warm start for bootstrap refits).
    """
    if method not in ("marginal", "fellner"):
        raise ValueError(f"unknown method {method!r}")
    data.require_areas(2)
    design_check(data)
    if start is None:
        beta, sv2, se2 = _start(data)
        v = np.zeros(data.m)
    else:
        beta, v = np.array(start.beta), np.array(start.v)
        sv2, se2 = max(start.sigma_v2, VAR_FLOOR), max(start.sigma_e2, VAR_FLOOR)
    converged = False
    change = math.inf
    it = 0
    if method == "marginal":
        sums = _AreaSums(data)
        for it in range(1, max_iter + 1):
            try:
                new_beta = _marginal_beta_step(data, sums, beta, sv2, se2, psi)
                dv, de = _marginal_delta_step(data, sums, new_beta, sv2, se2, psi)
            except np.linalg.LinAlgError as exc:
                raise ConvergenceError("singular system in robust ML iteration") from exc
            if not (math.isfinite(dv) and math.isfinite(de)):
                raise ConvergenceError("variance step produced non-finite values")
            dv = dv if dv > 0 else 0.5 * sv2
            de = de if de > 0 else 0.5 * se2
            dv, de = max(dv, VAR_FLOOR), max(de, VAR_FLOOR)
            change = max(
                np.max(np.abs(new_beta - beta)) / max(np.max(np.abs(beta)), 1e-12),
                abs(dv - sv2) / sv2,
                abs(de - se2) / se2,
            )
            beta, sv2, se2 = new_beta, dv, de
            if change < tol:
                converged = True
                break
        beta_v, v, ok, _ = robust_effects_solve(
            data, beta, (sv2, se2), psi, tol=1e-10, max_iter=500, v0=v, update_beta=False
        )
        converged = converged and ok
    else:
        for it in range(1, max_iter + 1):
            new_beta, v, _, _ = robust_effects_solve(
                data, beta, (sv2, se2), psi, tol=1e-10, max_iter=500, v0=v
            )
            dv, de = robust_variance_update(data, new_beta, v, (sv2, se2), psi)
            change = max(
                np.max(np.abs(new_beta - beta)) / max(np.max(np.abs(beta)), 1e-12),
                abs(dv - sv2) / sv2,
                abs(de - se2) / se2,
            )
            beta, sv2, se2 = new_beta, dv, de
            if change < tol:
                converged = True
                break
        beta, v, _, _ = robust_effects_solve(
            data, beta, (sv2, se2), psi, tol=1e-10, max_iter=500, v0=v
        )
    theta = data.xbar @ beta + v
    return REBLUPFit(beta, float(sv2), float(se2), v, theta, it, converged, float(change), psi, method)


# ---------------------------------------------------------------------------
# parametric bootstrap


def _bootstrap_one(fit, data, gen, tol, max_iter):
    v_star = math.sqrt(fit.sigma_v2) * gen.standard_normal(data.m)
    e_star = math.sqrt(fit.sigma_e2) * gen.standard_normal(data.n)
    y_star = data.X @ fit.beta + v_star[data.area] + e_star
    theta_star = data.xbar @ fit.beta + v_star
    refit = fit_reblup(data.with_y(y_star), fit.psi, tol, max_iter, fit.method, start=fit)
    return (refit.theta - theta_star) ** 2, refit.converged


def bootstrap_mse(
    fit: REBLUPFit,
    data: SurveyDataset,
    B: int = 100,
    rng=None,
    *,
    seed: int = 0,
    jobs: int = 1,
    tol: float = 1e-6,
    max_iter: int = 200,
    max_failure_rate: float = 0.10,
) -> np.ndarray:
    """Parametric bootstrap MSE of the REBLUP ``theta_i``.

    Replicate ``b`` draws from its own child stream of ``RngStream(seed)``
    (or of ``rng`` when an :class:`RngStream` is given), so results do not
    depend on ``jobs``.
    """
    if B < 1:
        raise ValueError("B must be positive")
    stream = rng if isinstance(rng, RngStream) else RngStream(seed if rng is None else int(rng))
    gens = stream.children(B)

    def one(b):
        return _bootstrap_one(fit, data, gens[b], tol, max_iter)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, range(B)))
    else:
        results = [one(b) for b in range(B)]
    failures = sum(not ok for _, ok in results)
    if failures > max_failure_rate * B:
        raise ConvergenceError(
            f"{failures} of {B} bootstrap refits did not converge (limit {max_failure_rate:.0%})"
        )
    return np.mean([sq for sq, _ in results], axis=0)
