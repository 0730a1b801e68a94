"""Hierarchical Bayes Gibbs samplers for the nested error regression model.

Two models share the mean structure ``y_ij = x_ij'beta + v_i + e_ij`` with
``v_i ~ N(0, sigma_v2)`` and flat priors on ``beta`` and ``sigma_v2``:

``dg``
    normal errors, ``e_ij ~ N(0, sigma_e2)`` with prior ``1/sigma_e2``.
``nm``
    two-component normal mixture, ``e_ij ~ N(0, sigma1_2)`` when
    ``z_ij = 1`` (probability ``p_e``) else ``N(0, sigma2_2)``, with
    ``p_e ~ U(0, 1)`` and the ordered prior
    ``pi(sigma1_2, sigma2_2) ∝ sigma2_2**-2`` on ``0 < sigma1_2 < sigma2_2``.

The heavy lifting happens in :mod:`nersae._gibbs`; this module handles
initialisation, chains, predictands, summaries and trace files.
"""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _gibbs
from ._accel import backend_name
from .data import SurveyDataset, design_check
from .samplers import RngStream, as_generator

__all__ = [
    "DGState",
    "NMState",
    "GibbsConfig",
    "PriorBox",
    "ChainDraws",
    "PosteriorSummary",
    "initial_state",
    "dg_gibbs_step",
    "nm_gibbs_step",
    "dg_conditionals",
    "nm_conditionals",
    "z_probability",
    "run_chain",
    "summarize",
    "split_rhat",
    "effective_sample_size",
    "write_traces",
]

RHAT_GATE = 1.05
TRACE_SCHEMA = "nersae.trace/1"


@dataclass
class DGState:
    beta: np.ndarray
    v: np.ndarray
    sigma_v2: float
    sigma_e2: float

    def __post_init__(self):
        for name in ("sigma_v2", "sigma_e2"):
            val = float(getattr(self, name))
            if not (0.0 < val < math.inf):
                raise ValueError(f"{name} must be positive and finite, got {val}")


@dataclass
class NMState:
    beta: np.ndarray
    v: np.ndarray
    sigma_v2: float
    sigma1_2: float
    sigma2_2: float
    p_e: float
    z: np.ndarray

    def __post_init__(self):
        if not (0.0 < self.sigma_v2 < math.inf):
            raise ValueError(f"sigma_v2 must be positive and finite, got {self.sigma_v2}")
        if not (0.0 < self.sigma1_2 < self.sigma2_2 < math.inf):
            raise ValueError(
                f"need 0 < sigma1_2 < sigma2_2 < inf, got ({self.sigma1_2}, {self.sigma2_2})"
            )
        if not (0.0 < self.p_e < 1.0):
            raise ValueError(f"p_e must lie in (0, 1), got {self.p_e}")
        z = np.asarray(self.z)
        if z.size and not np.all((z == 0) | (z == 1)):
            raise ValueError("z must be binary")


@dataclass(frozen=True)
class GibbsConfig:
    iterations: int = 25_000
    burn_in: int = 5_000
    thin: int = 1
    chains: int = 4
    seed: int = 20_240_101
    predictand: str = "theta"
    jobs: int = 1

    def __post_init__(self):
        for name in ("iterations", "thin", "chains", "jobs"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.predictand not in ("theta", "ybar"):
            raise ValueError(f"predictand must be 'theta' or 'ybar', got {self.predictand!r}")

    @property
    def retained(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thin))


@dataclass(frozen=True)
class PriorBox:
    """Optional truncation of the flat priors to a box.

    The default (infinite) box is the model's improper prior.  Finite boxes
    make the prior proper, which simulation-based checks of the sampler need.
    """

    beta_lo: Optional[Sequence[float]] = None
    beta_hi: Optional[Sequence[float]] = None
    var_lo: float = 0.0
    var_hi: float = math.inf

    def arrays(self, p):
        lo = np.full(p, -np.inf) if self.beta_lo is None else np.asarray(self.beta_lo, float)
        hi = np.full(p, np.inf) if self.beta_hi is None else np.asarray(self.beta_hi, float)
        if lo.shape != (p,) or hi.shape != (p,) or np.any(lo >= hi):
            raise ValueError("beta box must have length p with lower < upper")
        if not (0.0 <= self.var_lo < self.var_hi):
            raise ValueError("variance box must satisfy 0 <= var_lo < var_hi")
        return lo, hi, float(self.var_lo), float(self.var_hi)


_NO_BOX = PriorBox()


# ---------------------------------------------------------------------------
# conditionals


def z_probability(r, sigma1_2, sigma2_2, p_e):
    """``P(z = 1 | .)`` for residuals ``r`` (vectorised, overflow safe)."""
    r = np.asarray(r, float)
    with np.errstate(over="ignore"):
        logit = (
            math.log(p_e) - math.log1p(-p_e)
            + 0.5 * (math.log(sigma2_2) - math.log(sigma1_2))
            - 0.5 * r * r * (1.0 / sigma1_2 - 1.0 / sigma2_2)
        )
        return 1.0 / (1.0 + np.exp(-logit))


def _gaussian_block(data, w, offset_v, beta):
    X, y, area = data.X, data.y, data.area
    A = X.T @ (w[:, None] * X)
    cov = np.linalg.inv(A)
    beta_mean = cov @ (X.T @ (w * (y - offset_v[area])))
    e = y - X @ beta
    return beta_mean, cov, e


def dg_conditionals(state: DGState, data: SurveyDataset) -> dict:
    """Parameters of every DG full conditional evaluated at ``state``.

    ``beta``/``v`` map to (mean, covariance-or-variance); variance blocks map
    to inverse-gamma ``(shape, rate)``.
    """
    w = np.full(data.n, 1.0 / state.sigma_e2)
    beta_mean, cov, e = _gaussian_block(data, w, state.v, state.beta)
    prec = data.area_sum(w) + 1.0 / state.sigma_v2
    r = e - state.v[data.area]
    return {
        "beta": (beta_mean, cov),
        "v": (data.area_sum(w * e) / prec, 1.0 / prec),
        "sigma_v2": (0.5 * data.m - 1.0, 0.5 * float(state.v @ state.v)),
        "sigma_e2": (0.5 * data.n, 0.5 * float(r @ r)),
    }


def nm_conditionals(state: NMState, data: SurveyDataset) -> dict:
    """Parameters of every NM full conditional evaluated at ``state``.

    Truncated variance blocks map to ``(shape, rate, lower, upper)``.
    """
    z = np.asarray(state.z)
    w = np.where(z == 1, 1.0 / state.sigma1_2, 1.0 / state.sigma2_2)
    beta_mean, cov, e = _gaussian_block(data, w, state.v, state.beta)
    prec = data.area_sum(w) + 1.0 / state.sigma_v2
    r = e - state.v[data.area]
    n1 = int(z.sum())
    n2 = data.n - n1
    return {
        "z": z_probability(r, state.sigma1_2, state.sigma2_2, state.p_e),
        "p_e": (1.0 + n1, 1.0 + n2),
        "beta": (beta_mean, cov),
        "v": (data.area_sum(w * e) / prec, 1.0 / prec),
        "sigma_v2": (0.5 * data.m - 1.0, 0.5 * float(state.v @ state.v)),
        "sigma1_2": (0.5 * n1 - 1.0, 0.5 * float(r[z == 1] @ r[z == 1]), 0.0, state.sigma2_2),
        "sigma2_2": (0.5 * n2 + 1.0, 0.5 * float(r[z == 0] @ r[z == 0]), state.sigma1_2, math.inf),
    }


# ---------------------------------------------------------------------------
# single scans


def dg_gibbs_step(state: DGState, data: SurveyDataset, rng, box: PriorBox = _NO_BOX) -> DGState:
    """One systematic scan ``beta -> v -> sigma_v2 -> sigma_e2``."""
    bounds = box.arrays(data.p)
    XtX = data.X.T @ data.X
    cnt = data.n_i.astype(float)
    beta, v, sv2, se2 = _gibbs.dg_scan_numpy(
        data.y, data.X, data.area, data.m, np.asarray(state.beta, float),
        np.asarray(state.v, float), state.sigma_v2, state.sigma_e2, XtX, cnt, bounds,
        as_generator(rng),
    )
    return DGState(beta, v, float(sv2), float(se2))


def nm_gibbs_step(state: NMState, data: SurveyDataset, rng, box: PriorBox = _NO_BOX) -> NMState:
    """One systematic scan ``z -> p_e -> beta -> v -> sigma_v2 -> sigma1_2 -> sigma2_2``."""
    bounds = box.arrays(data.p)
    beta, v, z, sv2, s12, s22, pe, _ = _gibbs.nm_scan_numpy(
        data.y, data.X, data.area, data.m, np.asarray(state.beta, float),
        np.asarray(state.v, float), np.asarray(state.z), state.sigma_v2, state.sigma1_2,
        state.sigma2_2, state.p_e, bounds, as_generator(rng),
    )
    return NMState(beta, v, float(sv2), float(s12), float(s22), float(pe), z)


# ---------------------------------------------------------------------------
# initialisation


def initial_state(model: str, data: SurveyDataset, rng=None):
    """OLS-based starting point; variances jittered by a factor in [0.5, 1.5] if ``rng``."""
    beta, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
    e = data.y - data.X @ beta
    v = data.area_sum(e) / np.maximum(data.n_i, 1)
    s2 = float(e @ e) / max(data.n - data.p, 1)
    sampled = data.n_i > 0
    sv2 = float(np.var(v[sampled], ddof=1)) if sampled.sum() > 1 else 0.0
    sv2 = max(sv2, 1e-6)
    if rng is not None:
        g = as_generator(rng)
        sv2 *= g.uniform(0.5, 1.5)
        s2 *= g.uniform(0.5, 1.5)
        half = g.uniform(0.25, 0.75)
    else:
        half = 0.5
    if model == "dg":
        return DGState(beta, v, sv2, s2)
    if model == "nm":
        z = (np.abs(e) / math.sqrt(s2) < 2.0).astype(np.int64)
        return NMState(beta, v, sv2, half * s2, s2, 0.5, z)
    raise ValueError(f"unknown model {model!r}; expected 'dg' or 'nm'")


# ---------------------------------------------------------------------------
# chains


@dataclass
class ChainDraws:
    """Retained draws; leading axes are (chain, iterate)."""

    model: str
    beta: np.ndarray
    v: np.ndarray
    scalars: dict
    theta: np.ndarray
    ybar: Optional[np.ndarray]
    outlier_counts: Optional[np.ndarray]
    config: GibbsConfig
    runtime_s: float = 0.0
    final_states: list = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.beta.shape[0]

    @property
    def n_retained(self) -> int:
        return self.beta.shape[1]

    def parameters(self) -> dict:
        """Scalar parameter draws keyed by name, each (chain, iterate)."""
        out = {f"beta{k}": self.beta[:, :, k] for k in range(self.beta.shape[2])}
        for name, arr in self.scalars.items():
            if name != "n1":
                out[name] = arr
        return out

    def predictand_draws(self, which: Optional[str] = None) -> np.ndarray:
        which = which or self.config.predictand
        if which == "ybar":
            if self.ybar is None:
                raise ValueError("ybar draws were not generated for this run")
            return self.ybar
        return self.theta


def _run_one(model, data, config, box_arrays, chain):
    stream = RngStream(config.seed, chain)
    gen = stream.generator()
    state = initial_state(model, data, gen)
    T = config.retained
    beta = np.array(state.beta, float)
    v = np.array(state.v, float)
    out_beta = np.empty((T, data.p))
    out_v = np.empty((T, data.m))
    lo, hi, vlo, vhi = box_arrays
    y, X, area = np.ascontiguousarray(data.y), np.ascontiguousarray(data.X), data.area
    if model == "dg":
        scal = np.array([state.sigma_v2, state.sigma_e2])
        out_scal = np.empty((T, len(_gibbs.DG_SCALARS)))
        _gibbs.dg_chain(
            y, X, area, data.m, beta, v, scal, config.iterations, config.burn_in, config.thin,
            lo, hi, vlo, vhi, gen, out_beta, out_v, out_scal,
        )
        zero = None
        final = DGState(beta, v, scal[0], scal[1])
    else:
        z = np.array(state.z, np.int64)
        scal = np.array([state.sigma_v2, state.sigma1_2, state.sigma2_2, state.p_e])
        out_scal = np.empty((T, len(_gibbs.NM_SCALARS)))
        zero = np.zeros(data.n, np.int64)
        _gibbs.nm_chain(
            y, X, area, data.m, beta, v, z, scal, config.iterations, config.burn_in, config.thin,
            lo, hi, vlo, vhi, gen, out_beta, out_v, out_scal, zero,
        )
        final = NMState(beta, v, scal[0], scal[1], scal[2], scal[3], z)
    return out_beta, out_v, out_scal, zero, final


def _ybar_draws(model, data, scalars, beta, v, unsampled_xsum, gen):
    """Composed finite-population means for one chain's retained draws.

    The unsampled covariate contribution is exact given ``beta``; the
    unsampled error total is drawn from its model distribution.
    """
    N = data.N.astype(float)
    k_un = (data.N - data.n_i).astype(np.int64)
    T = beta.shape[0]
    ysum = data.area_sum(data.y)
    fixed = beta @ unsampled_xsum.T + v * k_un
    if model == "dg":
        var = scalars[:, 1:2] * k_un
    else:
        pe = scalars[:, 3:4]
        k1 = gen.binomial(np.broadcast_to(k_un, (T, data.m)), np.broadcast_to(pe, (T, data.m)))
        var = k1 * scalars[:, 1:2] + (k_un - k1) * scalars[:, 2:3]
    err = np.sqrt(var) * gen.standard_normal((T, data.m))
    return (ysum + fixed + err) / N


def run_chain(
    model: str,
    data: SurveyDataset,
    config: GibbsConfig = GibbsConfig(),
    *,
    box: PriorBox = _NO_BOX,
    unsampled_xsum=None,
) -> ChainDraws:
    """Run ``config.chains`` independent chains and collect retained draws.

    ``unsampled_xsum`` (m x p) holds the covariate totals of the unsampled
    population units; it is required for the ``ybar`` predictand.
    """
    if model not in ("dg", "nm"):
        raise ValueError(f"unknown model {model!r}; expected 'dg' or 'nm'")
    data.require_areas(3)
    design_check(data)
    if config.predictand == "ybar":
        if unsampled_xsum is None:
            raise ValueError("the ybar predictand needs population covariates for unsampled units")
        unsampled_xsum = np.asarray(unsampled_xsum, float)
        if unsampled_xsum.shape != (data.m, data.p):
            raise ValueError(f"unsampled_xsum must have shape ({data.m}, {data.p})")
    box_arrays = box.arrays(data.p)
    t0 = time.perf_counter()
    jobs = min(config.jobs, config.chains)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(
                pool.map(lambda c: _run_one(model, data, config, box_arrays, c), range(config.chains))
            )
    else:
        results = [_run_one(model, data, config, box_arrays, c) for c in range(config.chains)]
    runtime = time.perf_counter() - t0

    beta = np.stack([r[0] for r in results])
    v = np.stack([r[1] for r in results])
    scal = np.stack([r[2] for r in results])
    names = _gibbs.DG_SCALARS if model == "dg" else _gibbs.NM_SCALARS
    scalars = {name: scal[:, :, k] for k, name in enumerate(names)}
    theta = np.einsum("ctp,mp->ctm", beta, data.xbar) + v
    ybar = None
    if config.predictand == "ybar":
        ybar = np.stack([
            _ybar_draws(model, data, scal[c], beta[c], v[c], unsampled_xsum,
                        RngStream(config.seed, c).child(1))
            for c in range(config.chains)
        ])
    zero = None if model == "dg" else np.stack([r[3] for r in results])
    return ChainDraws(model, beta, v, scalars, theta, ybar, zero, config, runtime,
                      [r[4] for r in results])


# ---------------------------------------------------------------------------
# diagnostics and summaries


def split_rhat(x) -> float:
    """Split-chain potential scale reduction for draws shaped (chain, iterate)."""
    x = np.atleast_2d(np.asarray(x, float))
    h = x.shape[1] // 2
    if h < 2:
        return math.nan
    s = np.concatenate([x[:, :h], x[:, x.shape[1] - h:]])
    W = s.var(axis=1, ddof=1).mean()
    B = h * s.mean(axis=1).var(ddof=1)
    if W <= 0.0:
        return 1.0 if B <= 0.0 else math.inf
    return math.sqrt(((h - 1) / h * W + B / h) / W)


def _autocov(x):
    T = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * T - 1).bit_length()
    f = np.fft.rfft(xc, size, axis=-1)
    return np.fft.irfft(f * np.conj(f), size, axis=-1)[..., :T] / T


def effective_sample_size(x) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence."""
    x = np.atleast_2d(np.asarray(x, float))
    C, T = x.shape
    if T < 4:
        return float(C * T)
    acov = _autocov(x)
    W = acov[:, 0].mean() * T / (T - 1)
    if W <= 0.0:
        return float(C * T)
    var_plus = (T - 1) / T * W + (x.mean(axis=1).var(ddof=1) if C > 1 else 0.0)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    tau = -1.0
    prev = math.inf
    for t in range(0, T - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair < 0.0:
            break
        pair = min(pair, prev)
        prev = pair
        tau += 2.0 * pair
    return float(C * T / max(tau, 1.0 / math.log10(C * T)))


@dataclass
class PosteriorSummary:
    predictand: str
    mean: np.ndarray
    sd: np.ndarray
    median: np.ndarray
    intervals: dict
    param_mean: dict = field(default_factory=dict)
    param_median: dict = field(default_factory=dict)
    outlier_prob: Optional[np.ndarray] = None
    rhat: dict = field(default_factory=dict)
    ess: dict = field(default_factory=dict)
    n_draws: int = 0

    @property
    def max_rhat(self) -> float:
        vals = [r for r in self.rhat.values() if not math.isnan(r)]
        return max(vals) if vals else math.nan

    @property
    def converged(self) -> bool:
        return not self.max_rhat >= RHAT_GATE

    def interval(self, level: float):
        return self.intervals[round(float(level), 6)]


def _area_summary(draws, levels):
    flat = draws.reshape(-1, draws.shape[-1])
    if flat.shape[0] == 0:
        raise ValueError("cannot summarise an empty set of draws")
    probs = sorted({0.5, *[(1 - lv) / 2 for lv in levels], *[(1 + lv) / 2 for lv in levels]})
    qs = dict(zip(probs, np.quantile(flat, probs, axis=0)))
    intervals = {
        round(float(lv), 6): (qs[(1 - lv) / 2], qs[(1 + lv) / 2]) for lv in levels
    }
    return flat.mean(axis=0), flat.std(axis=0), qs[0.5], intervals


def summarize(draws, levels: Sequence[float] = (0.90, 0.95), which: Optional[str] = None):
    """Posterior summary of a :class:`ChainDraws` (or a raw predictand array).

    Intervals are equi-tailed quantile intervals of the pooled draws.  A raw
    array may be shaped (iterate, area) or (chain, iterate, area).
    """
    for lv in levels:
        if not 0.0 < lv < 1.0:
            raise ValueError(f"interval levels must lie in (0, 1), got {lv}")
    if isinstance(draws, np.ndarray):
        arr = np.asarray(draws, float)
        if arr.ndim == 2:
            arr = arr[None]
        mean, sd, med, intervals = _area_summary(arr, levels)
        return PosteriorSummary("theta", mean, sd, med, intervals, n_draws=arr.shape[0] * arr.shape[1])
    which = which or draws.config.predictand
    if draws.n_retained == 0:
        raise ValueError("cannot summarise an empty set of draws")
    mean, sd, med, intervals = _area_summary(draws.predictand_draws(which), levels)
    params = draws.parameters()
    outlier = None
    if draws.outlier_counts is not None:
        outlier = draws.outlier_counts.sum(axis=0) / (draws.n_chains * draws.n_retained)
    return PosteriorSummary(
        which, mean, sd, med, intervals,
        param_mean={k: float(a.mean()) for k, a in params.items()},
        param_median={k: float(np.median(a)) for k, a in params.items()},
        outlier_prob=outlier,
        rhat={k: split_rhat(a) for k, a in params.items()},
        ess={k: effective_sample_size(a) for k, a in params.items()},
        n_draws=draws.n_chains * draws.n_retained,
    )


def write_traces(draws: ChainDraws, out_dir, extra: Optional[dict] = None) -> Path:
    """One CSV row per retained iterate plus a manifest with config and seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = draws.parameters()
    names = list(params)
    m = draws.theta.shape[2]
    path = out / "traces.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema: {TRACE_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "draw", *names, *[f"theta{i + 1}" for i in range(m)]])
        for c in range(draws.n_chains):
            cols = np.column_stack([params[k][c] for k in names] + [draws.theta[c]])
            for t, row in enumerate(cols):
                w.writerow([c, t, *[repr(float(x)) for x in row]])
    manifest = {
        "schema": TRACE_SCHEMA,
        "model": draws.model,
        "config": asdict(draws.config),
        "backend": backend_name(),
        "runtime_s": draws.runtime_s,
        **(extra or {}),
    }
    (out / "trace_manifest.json").write_text(json.dumps(manifest, indent=2))
    return path
