"""Gibbs scan kernels for the normal and normal-mixture NER models.

Two implementations of each chain driver share one random-number
consumption order, so for a given generator state they follow the same
trajectory up to floating-point summation order:

* ``*_loops`` -- explicit loops, compiled by numba when available;
* ``*_numpy`` -- vectorised numpy, one Python-level call per scan.

Scan orders: DG ``beta -> v -> sigma_v2 -> sigma_e2``; NM
``z -> p_e -> beta -> v -> sigma_v2 -> sigma1_2 -> sigma2_2``.

Bounds (``beta_lo/beta_hi``, ``var_lo/var_hi``) truncate the flat priors to
a box.  The defaults (infinite box) give the model's improper priors; finite
boxes make the prior proper, which the stationarity checks need.  A boxed
beta block is drawn by rejection from its Gaussian conditional; when the box
holds too little conditional mass, a few coordinate-wise Gibbs sweeps of
exact truncated normals run instead.  The switch depends only on the
conditioning values, so the block conditional stays invariant.
"""
from __future__ import annotations

import math

import numpy as np

from ._accel import USE_NUMBA, jit
from ._truncgamma import trunc_inv_gamma_draw

_MAX_BETA_TRIES = 200
_COORD_SWEEPS = 5

# column layout of the scalar draw matrices
DG_SCALARS = ("sigma_v2", "sigma_e2")
NM_SCALARS = ("sigma_v2", "sigma1_2", "sigma2_2", "p_e", "n1")


@jit
def _var_draw(rng, shape, rate, lo, hi):
    if lo == 0.0 and math.isinf(hi) and rate > 0.0 and shape > 0.0:
        return rate / rng.standard_gamma(shape)
    return trunc_inv_gamma_draw(rng, shape, rate, lo, hi)


@jit
def trunc_std_normal(rng, a, b):
    """Standard normal restricted to ``[a, b]`` (exact rejection sampling).

    Two-sided intervals around zero use normal or uniform proposals; tail
    intervals use a translated exponential proposal with the optimal rate,
    or a uniform proposal when the interval is narrow.
    """
    sign = 1.0
    if b <= 0.0:  # reflect onto the positive axis
        a, b, sign = -b, -a, -1.0
    if a < 0.0:
        if b - a > 2.5066282746310002:
            while True:
                z = rng.standard_normal()
                if a <= z <= b:
                    return sign * z
        while True:
            z = a + (b - a) * rng.random()
            if rng.random() <= math.exp(-0.5 * z * z):
                return sign * z
    alpha = 0.5 * (a + math.sqrt(a * a + 4.0))
    if alpha * (b - a) >= 1.0:
        while True:
            z = a + rng.standard_exponential() / alpha
            if z <= b and rng.random() <= math.exp(-0.5 * (z - alpha) ** 2):
                return sign * z
    while True:
        z = a + (b - a) * rng.random()
        if rng.random() <= math.exp(0.5 * (a * a - z * z)):
            return sign * z


@jit
def _coordinate_sweeps(rng, A, mean, beta_lo, beta_hi, out):
    # Gibbs sweeps over the coordinates of N(mean, A^-1) on the box; ``out``
    # holds the current (in-box) value on entry.
    p = mean.shape[0]
    for _ in range(_COORD_SWEEPS):
        for k in range(p):
            s = 0.0
            for j in range(p):
                if j != k:
                    s += A[k, j] * (out[j] - mean[j])
            mu = mean[k] - s / A[k, k]
            sd = 1.0 / math.sqrt(A[k, k])
            out[k] = mu + sd * trunc_std_normal(rng, (beta_lo[k] - mu) / sd, (beta_hi[k] - mu) / sd)


@jit
def _beta_draw(rng, A, b, beta_lo, beta_hi, out):
    """Draw from N(A^{-1} b, A^{-1}) restricted to the box, into ``out``.

    ``out`` holds the current value on entry (used only by the fallback).
    """
    p = b.shape[0]
    L = np.linalg.cholesky(A)
    # mean = A^{-1} b by two triangular solves
    w = np.empty(p)
    for i in range(p):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * w[k]
        w[i] = s / L[i, i]
    mean = np.empty(p)
    for i in range(p - 1, -1, -1):
        s = w[i]
        for k in range(i + 1, p):
            s -= L[k, i] * mean[k]
        mean[i] = s / L[i, i]
    cur = out.copy()
    eps = np.empty(p)
    for _ in range(_MAX_BETA_TRIES):
        for i in range(p):
            eps[i] = rng.standard_normal()
        # out = mean + L^{-T} eps
        for i in range(p - 1, -1, -1):
            s = eps[i]
            for k in range(i + 1, p):
                s -= L[k, i] * (out[k] - mean[k])
            out[i] = mean[i] + s / L[i, i]
        inside = True
        for i in range(p):
            if out[i] < beta_lo[i] or out[i] > beta_hi[i]:
                inside = False
        if inside:
            return
    out[:] = cur
    _coordinate_sweeps(rng, A, mean, beta_lo, beta_hi, out)


@jit
def dg_chain_loops(
    y, X, area, m, beta, v, scal, n_iter, burn, thin,
    beta_lo, beta_hi, var_lo, var_hi, rng, out_beta, out_v, out_scal,
):
    n, p = X.shape
    sv2 = scal[0]
    se2 = scal[1]
    A = np.zeros((p, p))
    for j in range(n):
        for a in range(p):
            for c in range(p):
                A[a, c] += X[j, a] * X[j, c]
    e = np.empty(n)
    b = np.empty(p)
    sums = np.empty(m)
    cnt = np.zeros(m)
    for j in range(n):
        cnt[area[j]] += 1.0
    keep = 0
    for it in range(n_iter):
        # beta | v, sigma_e2: precision X'X / sigma_e2
        for a in range(p):
            b[a] = 0.0
        for j in range(n):
            r = y[j] - v[area[j]]
            for a in range(p):
                b[a] += X[j, a] * r
        _beta_draw(rng, A / se2, b / se2, beta_lo, beta_hi, beta)
        # v_i | beta, variances
        for i in range(m):
            sums[i] = 0.0
        for j in range(n):
            s = y[j]
            for a in range(p):
                s -= X[j, a] * beta[a]
            e[j] = s
            sums[area[j]] += s
        ssv = 0.0
        for i in range(m):
            prec = cnt[i] / se2 + 1.0 / sv2
            v[i] = sums[i] / se2 / prec + rng.standard_normal() / math.sqrt(prec)
            ssv += v[i] * v[i]
        sv2 = _var_draw(rng, 0.5 * m - 1.0, 0.5 * ssv, var_lo, var_hi)
        sse = 0.0
        for j in range(n):
            r = e[j] - v[area[j]]
            sse += r * r
        se2 = _var_draw(rng, 0.5 * n, 0.5 * sse, var_lo, var_hi)
        if it >= burn and (it - burn) % thin == 0:
            out_beta[keep, :] = beta
            out_v[keep, :] = v
            out_scal[keep, 0] = sv2
            out_scal[keep, 1] = se2
            keep += 1
    scal[0] = sv2
    scal[1] = se2


@jit
def nm_chain_loops(
    y, X, area, m, beta, v, z, scal, n_iter, burn, thin,
    beta_lo, beta_hi, var_lo, var_hi, rng, out_beta, out_v, out_scal, out_zero,
):
    n, p = X.shape
    sv2 = scal[0]
    s12 = scal[1]
    s22 = scal[2]
    pe = scal[3]
    A = np.empty((p, p))
    b = np.empty(p)
    e = np.empty(n)
    wsum = np.empty(m)
    num = np.empty(m)
    keep = 0
    for it in range(n_iter):
        # z_ij | rest
        c0 = math.log(pe) - math.log1p(-pe) + 0.5 * (math.log(s22) - math.log(s12))
        dq = 1.0 / s12 - 1.0 / s22
        n1 = 0
        for j in range(n):
            r = y[j] - v[area[j]]
            for a in range(p):
                r -= X[j, a] * beta[a]
            logit = c0 - 0.5 * r * r * dq
            prob = 1.0 / (1.0 + math.exp(-logit))
            if rng.random() < prob:
                z[j] = 1
                n1 += 1
            else:
                z[j] = 0
        pe = rng.beta(1.0 + n1, 1.0 + n - n1)
        # beta | z, v, variances (weighted least squares)
        w1 = 1.0 / s12
        w2 = 1.0 / s22
        for a in range(p):
            b[a] = 0.0
            for c in range(p):
                A[a, c] = 0.0
        for j in range(n):
            wj = w1 if z[j] == 1 else w2
            r = y[j] - v[area[j]]
            for a in range(p):
                b[a] += wj * X[j, a] * r
                for c in range(p):
                    A[a, c] += wj * X[j, a] * X[j, c]
        _beta_draw(rng, A, b, beta_lo, beta_hi, beta)
        # v_i
        for i in range(m):
            wsum[i] = 0.0
            num[i] = 0.0
        for j in range(n):
            s = y[j]
            for a in range(p):
                s -= X[j, a] * beta[a]
            e[j] = s
            wj = w1 if z[j] == 1 else w2
            wsum[area[j]] += wj
            num[area[j]] += wj * s
        ssv = 0.0
        for i in range(m):
            prec = wsum[i] + 1.0 / sv2
            v[i] = num[i] / prec + rng.standard_normal() / math.sqrt(prec)
            ssv += v[i] * v[i]
        sv2 = _var_draw(rng, 0.5 * m - 1.0, 0.5 * ssv, var_lo, var_hi)
        ss1 = 0.0
        ss2 = 0.0
        for j in range(n):
            r = e[j] - v[area[j]]
            if z[j] == 1:
                ss1 += r * r
            else:
                ss2 += r * r
        n2 = n - n1
        s12 = trunc_inv_gamma_draw(rng, 0.5 * n1 - 1.0, 0.5 * ss1, var_lo, min(s22, var_hi))
        s22 = trunc_inv_gamma_draw(rng, 0.5 * n2 + 1.0, 0.5 * ss2, max(s12, var_lo), var_hi)
        if it >= burn and (it - burn) % thin == 0:
            out_beta[keep, :] = beta
            out_v[keep, :] = v
            out_scal[keep, 0] = sv2
            out_scal[keep, 1] = s12
            out_scal[keep, 2] = s22
            out_scal[keep, 3] = pe
            out_scal[keep, 4] = n1
            for j in range(n):
                if z[j] == 0:
                    out_zero[j] += 1
            keep += 1
    scal[0] = sv2
    scal[1] = s12
    scal[2] = s22
    scal[3] = pe


# ---------------------------------------------------------------------------
# vectorised numpy fallback


def _beta_draw_numpy(rng, A, b, beta_lo, beta_hi, current):
    L = np.linalg.cholesky(A)
    mean = np.linalg.solve(L.T, np.linalg.solve(L, b))
    for _ in range(_MAX_BETA_TRIES):
        eps = rng.standard_normal(len(b))
        beta = mean + np.linalg.solve(L.T, eps)
        if np.all(beta >= beta_lo) and np.all(beta <= beta_hi):
            return beta
    out = np.array(current, float)
    _coordinate_sweeps_py(rng, A, mean, beta_lo, beta_hi, out)
    return out


_coordinate_sweeps_py = getattr(_coordinate_sweeps, "py_func", _coordinate_sweeps)


def dg_scan_numpy(y, X, area, m, beta, v, sv2, se2, XtX, cnt, bounds, rng):
    beta_lo, beta_hi, var_lo, var_hi = bounds
    n = len(y)
    beta = _beta_draw_numpy(rng, XtX / se2, X.T @ (y - v[area]) / se2, beta_lo, beta_hi, beta)
    e = y - X @ beta
    prec = cnt / se2 + 1.0 / sv2
    v = np.bincount(area, e, minlength=m) / se2 / prec + rng.standard_normal(m) / np.sqrt(prec)
    sv2 = _var_draw(rng, 0.5 * m - 1.0, 0.5 * float(v @ v), var_lo, var_hi)
    r = e - v[area]
    se2 = _var_draw(rng, 0.5 * n, 0.5 * float(r @ r), var_lo, var_hi)
    return beta, v, sv2, se2


def nm_scan_numpy(y, X, area, m, beta, v, z, sv2, s12, s22, pe, bounds, rng):
    beta_lo, beta_hi, var_lo, var_hi = bounds
    n = len(y)
    r = y - X @ beta - v[area]
    logit = (
        math.log(pe) - math.log1p(-pe) + 0.5 * (math.log(s22) - math.log(s12))
        - 0.5 * r * r * (1.0 / s12 - 1.0 / s22)
    )
    with np.errstate(over="ignore"):
        prob = 1.0 / (1.0 + np.exp(-logit))
    z = (rng.random(n) < prob).astype(np.int64)
    n1 = int(z.sum())
    pe = rng.beta(1.0 + n1, 1.0 + n - n1)
    w = np.where(z == 1, 1.0 / s12, 1.0 / s22)
    A = X.T @ (w[:, None] * X)
    beta = _beta_draw_numpy(rng, A, X.T @ (w * (y - v[area])), beta_lo, beta_hi, beta)
    e = y - X @ beta
    prec = np.bincount(area, w, minlength=m) + 1.0 / sv2
    v = np.bincount(area, w * e, minlength=m) / prec + rng.standard_normal(m) / np.sqrt(prec)
    sv2 = _var_draw(rng, 0.5 * m - 1.0, 0.5 * float(v @ v), var_lo, var_hi)
    r = e - v[area]
    ss1 = float(np.sum(r[z == 1] ** 2))
    ss2 = float(np.sum(r[z == 0] ** 2))
    s12 = trunc_inv_gamma_draw(rng, 0.5 * n1 - 1.0, 0.5 * ss1, var_lo, min(s22, var_hi))
    s22 = trunc_inv_gamma_draw(rng, 0.5 * (n - n1) + 1.0, 0.5 * ss2, max(s12, var_lo), var_hi)
    return beta, v, z, sv2, s12, s22, pe, n1


def dg_chain_numpy(
    y, X, area, m, beta, v, scal, n_iter, burn, thin,
    beta_lo, beta_hi, var_lo, var_hi, rng, out_beta, out_v, out_scal,
):
    XtX = X.T @ X
    cnt = np.bincount(area, minlength=m).astype(float)
    bounds = (beta_lo, beta_hi, var_lo, var_hi)
    b, vv, sv2, se2 = beta.copy(), v.copy(), scal[0], scal[1]
    keep = 0
    for it in range(n_iter):
        b, vv, sv2, se2 = dg_scan_numpy(y, X, area, m, b, vv, sv2, se2, XtX, cnt, bounds, rng)
        if it >= burn and (it - burn) % thin == 0:
            out_beta[keep] = b
            out_v[keep] = vv
            out_scal[keep] = (sv2, se2)
            keep += 1
    beta[:] = b
    v[:] = vv
    scal[:] = (sv2, se2)


def nm_chain_numpy(
    y, X, area, m, beta, v, z, scal, n_iter, burn, thin,
    beta_lo, beta_hi, var_lo, var_hi, rng, out_beta, out_v, out_scal, out_zero,
):
    bounds = (beta_lo, beta_hi, var_lo, var_hi)
    b, vv, zz = beta.copy(), v.copy(), z.copy()
    sv2, s12, s22, pe = scal
    keep = 0
    for it in range(n_iter):
        b, vv, zz, sv2, s12, s22, pe, n1 = nm_scan_numpy(
            y, X, area, m, b, vv, zz, sv2, s12, s22, pe, bounds, rng
        )
        if it >= burn and (it - burn) % thin == 0:
            out_beta[keep] = b
            out_v[keep] = vv
            out_scal[keep] = (sv2, s12, s22, pe, n1)
            out_zero += zz == 0
            keep += 1
    beta[:] = b
    v[:] = vv
    z[:] = zz
    scal[:] = (sv2, s12, s22, pe)


if USE_NUMBA:
    dg_chain = dg_chain_loops
    nm_chain = nm_chain_loops
else:
    dg_chain = dg_chain_numpy
    nm_chain = nm_chain_numpy
