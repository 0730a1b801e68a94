"""Scalar kernels for the truncated inverse-gamma distribution.

A variate ``t`` with density proportional to ``t**(-shape-1) * exp(-rate/t)``
on ``(lower, upper)`` is drawn through ``x = rate / t``, which has the
(possibly improper-at-zero) gamma kernel ``x**(shape-1) * exp(-x)`` on
``(rate/upper, rate/lower)``.

* ``rate == 0``: pure power law, inverted in closed form.
* ``shape > 0``: inverse CDF through the regularised incomplete gamma
  functions, working on whichever tail keeps the interval mass accurate.
* ``shape <= 0``: inverse CDF through the unnormalised upper incomplete
  gamma ``Gamma(shape, x)`` (continued fraction / downward recurrence),
  solved by bisection in ``log x``.

When the interval mass is numerically flat the draw falls back to an exact
rejection sampler: ``log x`` has the log-concave density
``shape*y - exp(y)``, so any tangent line is a global envelope.
"""
from __future__ import annotations

import math

import numpy as np

from ._accel import gammainc, gammaincc, gammainccinv, gammaincinv, gammaln, jit

_EULER = 0.5772156649015329
_FPMIN = 1e-300
_CF_EPS = 1e-15
_BISECT_RTOL = 1e-12
_FLAT = 1e-11


@jit
def _e1_series(x):
    # exponential integral E1 for 0 < x < 1
    total = 0.0
    term = 1.0
    for k in range(1, 200):
        term *= -x / k
        inc = term / k
        total += inc
        if abs(inc) < 1e-17 * abs(total):
            break
    return -_EULER - math.log(x) - total


@jit
def _upper_gamma_cf(a, x):
    """Gamma(a, x) * exp(x) * x**(-a) by modified Lentz continued fraction."""
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            break
    return h


@jit
def upper_gamma(a, x):
    """Unnormalised upper incomplete gamma ``Gamma(a, x)`` for real ``a``, ``x > 0``."""
    if math.isinf(x):
        return 0.0
    if a > 0.0:
        q = gammaincc(a, x)
        if q > 1e-280:
            return math.exp(gammaln(a)) * q
        return math.exp(-x + a * math.log(x)) * _upper_gamma_cf(a, x)
    if x >= 1.0:
        return math.exp(-x + a * math.log(x)) * _upper_gamma_cf(a, x)
    # x < 1, a <= 0: start above zero and recur downward,
    # Gamma(s, x) = (Gamma(s + 1, x) - x**s * exp(-x)) / s
    k = math.floor(a)
    if a == k:
        s = 0.0
        g = _e1_series(x)
    else:
        s = a - k
        g = math.exp(gammaln(s)) * gammaincc(s, x)
    ex = math.exp(-x)
    while s > a + 0.5:
        s -= 1.0
        g = (g - math.pow(x, s) * ex) / s
    return g


@jit
def _nudge_inside(t, lower, upper):
    if t <= lower:
        t = np.nextafter(lower, np.inf)
    if t >= upper:
        t = np.nextafter(upper, -np.inf)
    return t


@jit
def _power_law_ppf(u, shape, lower, upper):
    # density t**(-shape-1) on (lower, upper)
    if shape > 0.0:
        ratio = 0.0 if math.isinf(upper) else math.pow(lower / upper, shape)
        return lower * math.pow(1.0 - u * (1.0 - ratio), -1.0 / shape)
    if shape < 0.0:
        b = -shape
        ratio = math.pow(lower / upper, b)
        return upper * math.pow(ratio + u * (1.0 - ratio), 1.0 / b)
    return lower * math.pow(upper / lower, u)


@jit
def _trunc_exp_draw(u, slope, lo, hi):
    # density proportional to exp(slope * y) on (lo, hi); one end may be infinite
    if abs(slope) < 1e-300:
        return lo + u * (hi - lo)
    if slope < 0.0:
        if math.isinf(hi):
            return lo - math.log1p(-u) / (-slope)
        return lo + math.log1p(u * math.expm1(slope * (hi - lo))) / slope
    if math.isinf(lo):
        return hi + math.log1p(-u) / slope
    return hi + math.log1p(-u * -math.expm1(-slope * (hi - lo))) / slope


@jit
def _log_gamma_kernel(a, y):
    return a * y - math.exp(y)


@jit
def _reject_log_gamma(rng, a, xl, xh):
    """Exact draw of x on (xl, xh) with density x**(a-1) exp(-x), via log x."""
    yl = math.log(xl) if xl > 0.0 else -np.inf
    yh = math.log(xh) if not math.isinf(xh) else np.inf
    ym = math.log(a) if a > 0.0 else -np.inf
    if ym <= yl:
        y0 = yl
        if math.isinf(yh) and a - xl > -0.5:
            y0 = math.log(max(xl, a) + 1.0)
    elif ym >= yh:
        y0 = yh
        if math.isinf(yl) and a - xh < 0.5:
            y0 = math.log(0.5 * min(xh, a))
    else:
        y0 = ym
        if math.isinf(yh):
            y0 = math.log(a + 1.0)
        elif math.isinf(yl):
            y0 = math.log(0.5 * a)
    slope = a - math.exp(y0)
    h0 = _log_gamma_kernel(a, y0)
    for _ in range(10_000_000):
        y = _trunc_exp_draw(rng.random(), slope, yl, yh)
        if y <= yl or y >= yh:
            continue
        env = h0 + slope * (y - y0)
        if math.log(rng.random()) <= _log_gamma_kernel(a, y) - env:
            return math.exp(y)
    raise RuntimeError("truncated gamma rejection sampler did not terminate")


@jit
def _gamma_interval_ppf_pos(u, a, xl, xh):
    """Inverse CDF of the shape>0 gamma kernel on (xl, xh); nan if flat."""
    pl = gammainc(a, xl) if xl > 0.0 else 0.0
    ph = 1.0 if math.isinf(xh) else gammainc(a, xh)
    if pl < 0.5:
        mass = ph - pl
        if mass <= _FPMIN or mass < _FLAT * ph:
            return np.nan
        return gammaincinv(a, pl + u * mass)
    ql = gammaincc(a, xl)
    qh = 0.0 if math.isinf(xh) else gammaincc(a, xh)
    mass = ql - qh
    if mass <= _FPMIN or mass < _FLAT * ql:
        return np.nan
    return gammainccinv(a, ql - u * mass)


@jit
def _gamma_interval_ppf_nonpos(u, a, xl, xh):
    """Inverse CDF for shape <= 0 on (xl, xh), xl > 0, by bisection in log x."""
    gl = upper_gamma(a, xl)
    gh = upper_gamma(a, xh)
    mass = gl - gh
    if not (mass > _FPMIN) or mass < _FLAT * gl:
        return np.nan
    target = gl - u * mass
    lo = math.log(xl)
    if math.isinf(xh):
        hi = lo + 1.0
        while upper_gamma(a, math.exp(hi)) > target:
            hi = lo + 2.0 * (hi - lo)
    else:
        hi = math.log(xh)
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if upper_gamma(a, math.exp(mid)) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < _BISECT_RTOL:
            break
    return math.exp(0.5 * (lo + hi))


@jit
def check_trunc_params(shape, rate, lower, upper):
    """Return an error code: 0 ok, 1 bad bounds, 2 bad rate, 3 non-integrable."""
    if not (lower >= 0.0) or not (upper > lower) or math.isnan(upper):
        return 1
    if not (rate >= 0.0) or math.isinf(rate):
        return 2
    if rate == 0.0:
        if shape > 0.0 and lower == 0.0:
            return 3
        if shape < 0.0 and math.isinf(upper):
            return 3
        if shape == 0.0 and (lower == 0.0 or math.isinf(upper)):
            return 3
        return 0
    if shape <= 0.0 and math.isinf(upper):
        return 3
    return 0


@jit
def trunc_inv_gamma_draw(rng, shape, rate, lower, upper):
    """One draw from the truncated inverse gamma; parameters assumed valid."""
    if rate == 0.0:
        t = _power_law_ppf(rng.random(), shape, lower, upper)
        return _nudge_inside(t, lower, upper)
    if lower == 0.0 and math.isinf(upper):
        return rate / rng.standard_gamma(shape)
    xl = 0.0 if math.isinf(upper) else rate / upper
    xh = np.inf if lower == 0.0 else rate / lower
    u = rng.random()
    if shape > 0.0:
        x = _gamma_interval_ppf_pos(u, shape, xl, xh)
    else:
        x = _gamma_interval_ppf_nonpos(u, shape, xl, xh)
    if math.isnan(x) or x <= 0.0 or math.isinf(x):
        x = _reject_log_gamma(rng, shape, xl, xh)
    return _nudge_inside(rate / x, lower, upper)
