"""Design-based simulation study for the four small area predictors.

A finite population of ``m`` areas with ``N`` units each is generated from
``y = beta0 + beta1 x + v_i + e_ij``; covariates are drawn once per study
seed and kept fixed, while ``v`` and ``e`` are redrawn for every replicate.
Each replicate takes an SRS-WOR of ``n`` units per area, fits every
method, and records point estimates, uncertainty and 90/95% intervals for
``theta_i = beta0 + beta1 Xbar_i + v_i``.
"""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .data import SurveyDataset
from .hb import GibbsConfig, run_chain, summarize
from .mquantile import fit_mq_sae
from .reblup import HuberPsi, bootstrap_mse, fit_reblup
from .samplers import RngStream

__all__ = [
    "ERROR_LAWS",
    "METHODS",
    "METRICS",
    "SimScenario",
    "StudyConfig",
    "Population",
    "MethodResult",
    "SimMetrics",
    "generate_population",
    "draw_srs",
    "compute_metrics",
    "run_study",
    "write_study",
]

ERROR_LAWS = ("normal", "mixture", "t4")
METHODS = ("dg", "nm", "sr", "mq")
METRICS = ("eB", "eM", "RE", "coverage90", "coverage95", "avg_len90", "avg_len95")
LEVELS = (0.90, 0.95)
SIM_SCHEMA = "nersae.sim/1"

# stream ids below the study seed
_X_STREAM, _POP_STREAM, _SAMPLE_STREAM, _METHOD_STREAM = 0, 1, 2, 3


@dataclass(frozen=True)
class SimScenario:
    error_law: str = "normal"
    m: int = 40
    N: int = 200
    n: int = 4
    beta: tuple = (1.0, 1.0)
    sigma_v2: float = 1.0
    S: int = 50
    seed: int = 2024

    def __post_init__(self):
        if self.error_law not in ERROR_LAWS:
            raise ValueError(f"error_law must be one of {ERROR_LAWS}, got {self.error_law!r}")
        if not 1 <= self.n <= self.N:
            raise ValueError("need 1 <= n <= N")
        if self.S < 1 or self.m < 1:
            raise ValueError("S and m must be positive")


@dataclass(frozen=True)
class StudyConfig:
    """Per-method settings; HB chains use the reduced desk-scale budget."""

    hb_iterations: int = 6_000
    hb_burn_in: int = 1_000
    hb_chains: int = 2
    bootstrap_B: int = 100
    huber_c: float = 1.345
    mq_estimator: str = "bias-adjusted"
    jobs: int = 1


@dataclass
class Population:
    x: np.ndarray  # (m, N)
    y: np.ndarray  # (m, N)
    v: np.ndarray
    theta: np.ndarray
    ybar: np.ndarray
    xbar: np.ndarray


def _derive_seed(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=tuple(keys))
    return int(ss.generate_state(1, np.uint64)[0])


def _fixed_x(scenario: SimScenario) -> np.ndarray:
    gen = RngStream(scenario.seed, _X_STREAM).generator()
    return 1.0 + gen.standard_normal((scenario.m, scenario.N))


def _errors(law, size, gen):
    if law == "normal":
        return gen.standard_normal(size)
    if law == "mixture":
        outlier = gen.random(size) < 0.1
        return gen.standard_normal(size) * np.where(outlier, 5.0, 1.0)
    return gen.standard_t(4.0, size)


def generate_population(scenario: SimScenario, replicate_index: int, rng=None,
                        x: Optional[np.ndarray] = None) -> Population:
    """Population for one replicate.

    ``x`` is derived from the study seed alone, so it is identical across
    replicates; ``rng`` defaults to the replicate's own stream.
    """
    if x is None:
        x = _fixed_x(scenario)
    gen = rng if rng is not None else RngStream(scenario.seed, _POP_STREAM).child(replicate_index)
    b0, b1 = scenario.beta
    v = math.sqrt(scenario.sigma_v2) * gen.standard_normal(scenario.m)
    e = _errors(scenario.error_law, (scenario.m, scenario.N), gen)
    y = b0 + b1 * x + v[:, None] + e
    xbar = x.mean(axis=1)
    return Population(x, y, v, b0 + b1 * xbar + v, y.mean(axis=1), xbar)


def _srs_indices(m, N, n, gen):
    return np.stack([np.sort(gen.choice(N, size=n, replace=False)) for _ in range(m)])


def draw_srs(population: Population, n_i: int, rng) -> SurveyDataset:
    """SRS without replacement of ``n_i`` units in every area.

    ``unit_id`` is the 1-based position of the unit in its area.
    """
    m, N = population.x.shape
    if not 1 <= n_i <= N:
        raise ValueError("need 1 <= n_i <= N")
    idx = _srs_indices(m, N, n_i, rng)
    rows = np.arange(m)[:, None]
    xs = population.x[rows, idx].ravel()
    ys = population.y[rows, idx].ravel()
    area = np.repeat(np.arange(m), n_i)
    X = np.column_stack([np.ones(xs.size), xs])
    xbar = np.column_stack([np.ones(m), population.xbar])
    return SurveyDataset(ys, X, area, idx.ravel() + 1, np.full(m, N), xbar)


# ---------------------------------------------------------------------------
# methods


@dataclass
class MethodResult:
    estimate: np.ndarray
    uncertainty: np.ndarray  # posterior variance or estimated MSE
    intervals: dict  # level -> (lo, hi)


def _hb_method(model):
    def run(data, seed, cfg: StudyConfig):
        gc = GibbsConfig(cfg.hb_iterations, cfg.hb_burn_in, 1, cfg.hb_chains, seed)
        s = summarize(run_chain(model, data, gc), LEVELS)
        return MethodResult(s.mean, s.sd ** 2, {lv: s.interval(lv) for lv in LEVELS})
    return run


def _symmetric(est, mse):
    half = np.sqrt(mse)
    return {lv: (est - stats.norm.ppf(0.5 + lv / 2) * half, est + stats.norm.ppf(0.5 + lv / 2) * half)
            for lv in LEVELS}


def _sr_method(data, seed, cfg: StudyConfig):
    psi = HuberPsi(cfg.huber_c)
    fit = fit_reblup(data, psi)
    if not fit.converged:
        raise RuntimeError("REBLUP did not converge")
    mse = bootstrap_mse(fit, data, cfg.bootstrap_B, RngStream(seed))
    return MethodResult(fit.theta, mse, _symmetric(fit.theta, mse))


def _mq_method(data, seed, cfg: StudyConfig):
    fit = fit_mq_sae(data, cfg.huber_c, estimator=cfg.mq_estimator)
    return MethodResult(fit.estimates, fit.mse, _symmetric(fit.estimates, fit.mse))


_BUILTIN = {"dg": _hb_method("dg"), "nm": _hb_method("nm"), "sr": _sr_method, "mq": _mq_method}


# ---------------------------------------------------------------------------
# metrics


@dataclass
class SimMetrics:
    """Per-method, per-area metrics plus failure bookkeeping."""

    scenario: SimScenario
    methods: list
    values: dict  # method -> metric -> (m,) array
    failures: dict  # method -> count of failed replicates
    replicates: dict = field(default_factory=dict)  # method -> raw arrays
    runtime_s: float = 0.0
    max_ybar_theta_gap: float = math.nan

    def area_mean(self, method: str, metric: str) -> float:
        return float(np.mean(self.values[method][metric]))


def compute_metrics(truth, estimate, uncertainty, intervals) -> dict:
    """Empirical metrics from replicate arrays shaped (S, m).

    ``intervals`` maps level to a (lo, hi) pair of (S, m) arrays.
    """
    truth = np.asarray(truth, float)
    err = np.asarray(estimate, float) - truth
    eB = err.mean(axis=0)
    eM = (err ** 2).mean(axis=0)
    unc = np.asarray(uncertainty, float).mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        RE = np.where(eM > 0, (unc - eM) / eM, np.where(unc == 0, 0.0, np.inf))
    out = {"eB": eB, "eM": eM, "RE": RE}
    for lv in LEVELS:
        lo, hi = (np.asarray(a, float) for a in intervals[lv])
        tag = int(round(lv * 100))
        out[f"coverage{tag}"] = ((lo <= truth) & (truth <= hi)).mean(axis=0)
        out[f"avg_len{tag}"] = (hi - lo).mean(axis=0)
    return out


def _replicate(scenario, methods, cfg, r, custom):
    x = _fixed_x(scenario)
    pop = generate_population(scenario, r, x=x)
    data = draw_srs(pop, scenario.n, RngStream(scenario.seed, _SAMPLE_STREAM).child(r))
    out = {"theta": pop.theta, "gap": float(np.max(np.abs(pop.ybar - pop.theta)))}
    for k, name in enumerate(methods):
        fn = custom.get(name) or _BUILTIN[name]
        seed = _derive_seed(scenario.seed, _METHOD_STREAM, k, r)
        try:
            out[name] = fn(data, seed, cfg)
        except Exception as exc:  # recorded, replicate excluded for this method
            out[name] = repr(exc)
    return out


def run_study(
    scenario: SimScenario,
    methods: Sequence[str] = METHODS,
    config: StudyConfig = StudyConfig(),
    custom_methods: Optional[dict] = None,
) -> SimMetrics:
    """Run ``scenario.S`` replicates and aggregate per-area metrics.

    ``custom_methods`` maps extra method names to callables
    ``f(data, seed, config) -> MethodResult`` (used for test doubles).
    Replicate results are aggregated in replicate order, so the output does
    not depend on ``config.jobs``.
    """
    custom = dict(custom_methods or {})
    methods = list(methods)
    for name in methods:
        if name not in _BUILTIN and name not in custom:
            raise ValueError(f"unknown method {name!r}")
    t0 = time.perf_counter()
    args = [(scenario, methods, config, r, custom) for r in range(scenario.S)]
    if config.jobs > 1 and not custom:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            reps = list(pool.map(_replicate, *zip(*args)))
    else:
        reps = [_replicate(*a) for a in args]
    values, failures, raw = {}, {}, {}
    for name in methods:
        ok = [rep for rep in reps if isinstance(rep[name], MethodResult)]
        failures[name] = len(reps) - len(ok)
        if not ok:
            values[name] = {k: np.full(scenario.m, np.nan) for k in METRICS}
            continue
        truth = np.stack([rep["theta"] for rep in ok])
        est = np.stack([rep[name].estimate for rep in ok])
        unc = np.stack([rep[name].uncertainty for rep in ok])
        iv = {lv: tuple(np.stack([rep[name].intervals[lv][j] for rep in ok]) for j in (0, 1))
              for lv in LEVELS}
        values[name] = compute_metrics(truth, est, unc, iv)
        raw[name] = {"truth": truth, "estimate": est, "uncertainty": unc, "intervals": iv}
    return SimMetrics(
        scenario, methods, values, failures, raw, time.perf_counter() - t0,
        float(reps[0]["gap"]) if reps else math.nan,
    )


def write_study(metrics: SimMetrics, out_dir, extra: Optional[dict] = None) -> Path:
    """Tidy ``metrics.csv`` (area, method, metric, value) and ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema: {SIM_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area", "method", "metric", "value"])
        for name in metrics.methods:
            for metric in METRICS:
                for i, val in enumerate(metrics.values[name][metric]):
                    w.writerow([i + 1, name, metric, repr(float(val))])
    summary = {
        "schema": SIM_SCHEMA,
        "scenario": asdict(metrics.scenario),
        "failures": metrics.failures,
        "area_means": {
            name: {k: float(np.mean(metrics.values[name][k])) for k in METRICS}
            for name in metrics.methods
        },
        "max_abs_ybar_minus_theta": metrics.max_ybar_theta_gap,
        "runtime_s": metrics.runtime_s,
        **(extra or {}),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return out
