import math

import numpy as np
import pytest
from scipy import integrate, optimize, stats

from nersae.data import SurveyDataset
from nersae.reblup import (
    ConvergenceError,
    HuberPsi,
    REBLUPFit,
    bootstrap_mse,
    fit_reblup,
    huber_psi,
    robust_effects_solve,
    robust_variance_update,
)

from conftest import make_synthetic

NO_CLIP = HuberPsi(1e6)


def ml_eblup(data):
    """Gaussian ML EBLUP by direct likelihood maximisation (dense algebra)."""
    blocks = [np.flatnonzero(data.area == i) for i in range(data.m)]

    def gls(sv2, se2):
        A = np.zeros((data.p, data.p))
        b = np.zeros(data.p)
        ld = 0.0
        Vinv = []
        for idx in blocks:
            V = se2 * np.eye(len(idx)) + sv2
            Vi = np.linalg.inv(V)
            Vinv.append(Vi)
            A += data.X[idx].T @ Vi @ data.X[idx]
            b += data.X[idx].T @ Vi @ data.y[idx]
            ld += np.linalg.slogdet(V)[1]
        beta = np.linalg.solve(A, b)
        q = sum(float((data.y[i] - data.X[i] @ beta) @ Vi @ (data.y[i] - data.X[i] @ beta))
                for i, Vi in zip(blocks, Vinv))
        return beta, Vinv, 0.5 * (ld + q)

    res = optimize.minimize(lambda t: gls(*np.exp(t))[2], np.log([1.0, 1.0]), method="Nelder-Mead",
                            options={"xatol": 1e-11, "fatol": 1e-14, "maxiter": 20000})
    sv2, se2 = np.exp(res.x)
    beta, Vinv, _ = gls(sv2, se2)
    v = np.array([sv2 * np.sum(Vi @ (data.y[i] - data.X[i] @ beta)) for i, Vi in zip(blocks, Vinv)])
    return beta, sv2, se2, v


def henderson(data, sv2, se2):
    Z = (data.area[:, None] == np.arange(data.m)).astype(float)
    C = np.block([[data.X.T @ data.X, data.X.T @ Z],
                  [Z.T @ data.X, Z.T @ Z + se2 / sv2 * np.eye(data.m)]])
    sol = np.linalg.solve(C, np.concatenate([data.X.T @ data.y, Z.T @ data.y]))
    return sol[: data.p], sol[data.p:]


# ---------------------------------------------------------------- psi

def test_huber_examples():
    assert huber_psi(0.5, 1.345) == 0.5
    assert huber_psi(3.0, 1.345) == 1.345
    assert huber_psi(-3.0, 1.345) == -1.345
    assert huber_psi(1.345, 1.345) == 1.345


def test_huber_properties():
    g = np.random.default_rng(0)
    u = g.normal(0, 5, 10_000)
    for c in (0.5, 1.345, 3.0):
        psi = huber_psi(u, c)
        np.testing.assert_array_equal(huber_psi(-u, c), -psi)
        assert np.all(np.abs(psi) <= c)
        order = np.argsort(u)
        assert np.all(np.abs(np.diff(psi[order])) <= np.diff(u[order]) + 1e-15)


@pytest.mark.parametrize("c", [0.1, 1.0, 1.345, 2.5, 6.0])
def test_K_constant(c):
    val, _ = integrate.quad(lambda u: min(abs(u), c) ** 2 * stats.norm.pdf(u), -np.inf, np.inf,
                            epsabs=0, epsrel=1e-13, limit=200, points=None)
    assert HuberPsi(c).K == pytest.approx(val, rel=1e-10)


def test_K_limits_and_validation():
    assert NO_CLIP.K == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(ValueError):
        HuberPsi(0.0)
    np.testing.assert_array_equal(HuberPsi(1.0).weight([0.0, 0.5, 2.0, -4.0]), [1, 1, 0.5, 0.25])


# ---------------------------------------------------------------- effects solve

def test_effects_no_clip_is_henderson():
    d = make_synthetic(m=10, n_i=4, seed=1)
    b_ref, v_ref = henderson(d, 0.7, 1.3)
    b, v, ok, _ = robust_effects_solve(d, np.zeros(2), (0.7, 1.3), NO_CLIP, tol=1e-12)
    assert ok
    np.testing.assert_allclose(b, b_ref, rtol=1e-8)
    np.testing.assert_allclose(v, v_ref, rtol=1e-8, atol=1e-10)


def test_effects_zero_residual_fixed_point():
    d = make_synthetic(m=5, n_i=3, seed=2)
    beta = np.array([1.0, 2.0])
    exact = d.with_y(d.X @ beta)
    b, v, ok, it = robust_effects_solve(exact, beta, (1.0, 1.0), HuberPsi())
    assert ok and it == 1
    np.testing.assert_allclose(b, beta, rtol=1e-12)
    np.testing.assert_allclose(v, 0.0, atol=1e-12)


def test_effects_bounded_drift():
    d = make_synthetic(m=10, n_i=4, seed=3)
    y = np.array(d.y)

    def solve(mag, psi):
        y2 = y.copy()
        y2[0] += mag
        return robust_effects_solve(d.with_y(y2), np.zeros(2), (1.0, 1.0), psi, tol=1e-12)[1]

    robust = abs(solve(80.0, HuberPsi())[0] - solve(40.0, HuberPsi())[0])
    classic = abs(solve(80.0, NO_CLIP)[0] - solve(40.0, NO_CLIP)[0])
    assert robust < 1e-6
    assert classic > 1.0


# ---------------------------------------------------------------- variance update

def test_variance_update_is_ml_fixed_point_without_clipping():
    d = make_synthetic(m=10, n_i=4, seed=5)
    sv2, se2 = 0.8, 1.1
    b, v = henderson(d, sv2, se2)
    got = robust_variance_update(d, b, v, (sv2, se2), NO_CLIP)
    r = d.y - d.X @ b - v[d.area]
    trT = np.sum(1.0 / (d.n_i / se2 + 1.0 / sv2))
    want_v = v @ v / (d.m - trT / sv2)
    want_e = r @ r / (d.n - d.m + trT / sv2)
    np.testing.assert_allclose(got, (want_v, want_e), rtol=1e-8)


def test_variance_update_zero_effects_decreases():
    d = make_synthetic(m=10, n_i=4, seed=6)
    sv2 = 1.0
    for _ in range(20):
        new, _ = robust_variance_update(d, np.ones(2), np.zeros(10), (sv2, 1.0), HuberPsi())
        assert new <= sv2
        sv2 = new
    assert sv2 == pytest.approx(0.5 ** 20, rel=1e-12) or sv2 == 1e-8


def test_variance_update_rejects_bad_delta():
    d = make_synthetic()
    with pytest.raises(ValueError):
        robust_variance_update(d, np.ones(2), np.zeros(5), (0.0, 1.0))


def test_variance_consistency_simulation():
    est = []
    for r in range(100):
        d = make_synthetic(m=40, n_i=4, seed=1000 + r)
        est.append(fit_reblup(d).sigma_e2)
    assert abs(np.mean(est) - 1.0) < 0.15


# ---------------------------------------------------------------- fit

@pytest.mark.parametrize("method", ["marginal", "fellner"])
def test_no_clip_matches_ml_eblup(method):
    d = make_synthetic(m=12, n_i=4, seed=7, sv2=0.8)
    beta, sv2, se2, v = ml_eblup(d)
    fit = fit_reblup(d, NO_CLIP, tol=1e-12, max_iter=5000, method=method)
    assert fit.converged
    np.testing.assert_allclose(fit.beta, beta, rtol=1e-4)
    np.testing.assert_allclose(fit.delta, (sv2, se2), rtol=1e-4)
    np.testing.assert_allclose(fit.theta, d.xbar @ beta + v, rtol=1e-4)


def test_corn_parameter_estimates(corn, corn_reduced):
    full = fit_reblup(corn)
    assert full.converged
    np.testing.assert_allclose(full.beta, [29.14, 0.36, -0.07], atol=0.005)
    assert full.sigma_v2 == pytest.approx(102.74, abs=0.005)
    assert full.sigma_e2 == pytest.approx(225.60, abs=0.005)
    red = fit_reblup(corn_reduced)
    np.testing.assert_allclose(red.beta, [48.20, 0.34, -0.13], atol=0.005)
    assert red.sigma_v2 == pytest.approx(155.15, abs=0.005)
    assert red.sigma_e2 == pytest.approx(161.50, abs=0.05)


def test_corn_area12_prediction(corn):
    assert fit_reblup(corn).theta[11] == pytest.approx(136.9, abs=0.05)


def test_bounded_influence():
    d = make_synthetic(m=10, n_i=4, seed=8)
    y = np.array(d.y)
    preds = []
    for mag in (15.0, 30.0):
        y2 = y.copy()
        y2[5] += mag
        preds.append(fit_reblup(d.with_y(y2), tol=1e-10).theta)
    assert np.max(np.abs(preds[0] - preds[1])) < 1e-3


def test_permutation_equivariance():
    d = make_synthetic(m=8, n_i=3, seed=9)
    perm = np.random.default_rng(0).permutation(8)
    inv = np.argsort(perm)
    order = np.argsort(inv[d.area], kind="stable")
    p = SurveyDataset(d.y[order], d.X[order], inv[d.area][order], d.unit_id[order], d.N[perm], d.xbar[perm])
    a, b = fit_reblup(d, tol=1e-10), fit_reblup(p, tol=1e-10)
    np.testing.assert_allclose(b.theta, a.theta[perm], rtol=1e-8)
    np.testing.assert_allclose(b.beta, a.beta, rtol=1e-8)


def test_fit_preconditions():
    with pytest.raises(ValueError):
        fit_reblup(make_synthetic(m=1, n_i=5))
    tiny = make_synthetic(m=2, n_i=1)
    with pytest.raises(ValueError, match="degrees of freedom"):
        fit_reblup(tiny)
    with pytest.raises(ValueError):
        fit_reblup(make_synthetic(), method="newton")


# ---------------------------------------------------------------- bootstrap

def test_bootstrap_degenerate_is_zero():
    d = make_synthetic(m=5, n_i=3, seed=10)
    beta = np.array([1.0, 2.0])
    fit = REBLUPFit(beta, 0.0, 0.0, np.zeros(5), d.xbar @ beta, 1, True, 0.0, HuberPsi())
    mse = bootstrap_mse(fit, d, B=1)
    np.testing.assert_allclose(mse, 0.0, atol=1e-12)


def test_bootstrap_positive_and_deterministic(corn):
    fit = fit_reblup(corn)
    a = bootstrap_mse(fit, corn, B=20, seed=3)
    b = bootstrap_mse(fit, corn, B=20, seed=3, jobs=2)
    assert np.all(a > 0)
    np.testing.assert_array_equal(a, b)


def test_bootstrap_failure_limit(corn):
    fit = fit_reblup(corn)
    with pytest.raises(ConvergenceError):
        bootstrap_mse(fit, corn, B=5, max_iter=1)
    with pytest.raises(ValueError):
        bootstrap_mse(fit, corn, B=0)
