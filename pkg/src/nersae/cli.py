"""Command-line interface: ``nersae fit | simulate | report``.

Exit codes: 0 success, 2 validation failure, 3 non-convergence.  Failures
print a JSON object ``{"error": ..., "message": ..., "exit_code": ...}`` on
stdout; logs go to stderr.  ``SAE_SEED`` overrides ``--seed``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import backend_name
from .data import DatasetError, load_corn, load_dataset
from .evalsim import METHODS, SimScenario, StudyConfig, run_study, write_study
from .hb import GibbsConfig, run_chain, summarize
from .mquantile import ESTIMATORS, fit_mq_sae
from .reblup import ConvergenceError, HuberPsi, bootstrap_mse, fit_reblup

log = logging.getLogger("nersae")

FIT_SCHEMA = "nersae.fit/1"
SIM_SCHEMA = "nersae.sim/1"
EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE = 0, 2, 3
SCENARIOS = {"none": "normal", "mixture": "mixture", "t4": "t4"}
Z90, Z95 = 1.6448536269514722, 1.959963984540054


class CLIError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code, self.kind, self.message = code, kind, message


def _versions():
    import scipy

    out = {"nersae": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
           "python": platform.python_version(), "backend": backend_name()}
    try:
        import numba

        out["numba"] = numba.__version__
    except ImportError:
        pass
    return out


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _seed(args):
    env = os.environ.get("SAE_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise CLIError(EXIT_VALIDATION, "validation", f"SAE_SEED is not an integer: {env!r}")
    return int(args.seed)


def _write_manifest(out, command, args, seed, t0, inputs, extra=None):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    manifest = {
        "schema": FIT_SCHEMA if command == "fit" else SIM_SCHEMA,
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg,
        "seed": seed,
        "versions": _versions(),
        "timings": {"wall_s": time.perf_counter() - t0},
        "inputs": inputs,
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


# ---------------------------------------------------------------------------
# fit


def _load(args):
    if args.dataset:
        if args.units or args.areas:
            raise CLIError(EXIT_VALIDATION, "validation", "use either --dataset or --units/--areas")
        data = load_corn(reduced=args.dataset == "corn-reduced")
        return data, {"dataset": args.dataset}
    if not (args.units and args.areas):
        raise CLIError(EXIT_VALIDATION, "validation", "--units and --areas are both required")
    data = load_dataset(args.units, args.areas)
    return data, {"units": {"path": str(args.units), "sha256": _digest(args.units)},
                  "areas": {"path": str(args.areas), "sha256": _digest(args.areas)}}


def _estimates_rows(est, sd, lo90, hi90, lo95, hi95):
    return [
        {"area": i + 1, "estimate": est[i], "sd_or_rmse": sd[i], "ci90_lo": lo90[i],
         "ci90_hi": hi90[i], "ci95_lo": lo95[i], "ci95_hi": hi95[i]}
        for i in range(len(est))
    ]


def _write_csv(path, rows, header=None):
    header = header or list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for k, v in row.items()})


def _fit_hb(args, data, seed, out):
    model = "dg" if args.method == "dg-hb" else "nm"
    cfg = GibbsConfig(args.iterations, args.burn_in, args.thin, args.chains, seed,
                      "theta", max(1, args.jobs))
    draws = run_chain(model, data, cfg)
    s = summarize(draws, (0.90, 0.95))
    rows = _estimates_rows(s.mean, s.sd, *s.interval(0.90), *s.interval(0.95))
    params = {
        "model": model,
        "mean": s.param_mean,
        "median": s.param_median,
        "rhat": s.rhat,
        "ess": s.ess,
        "draws": s.n_draws,
        "runtime_s": draws.runtime_s,
    }
    if model == "nm":
        beta = np.array([s.param_mean[f"beta{k}"] for k in range(data.p)])
        vbar = draws.v.mean(axis=(0, 1))
        resid = data.y - data.X @ beta - vbar[data.area]
        std = resid / math.sqrt(s.param_mean["sigma1_2"])
        _write_csv(out / "outliers.csv", [
            {"area_id": int(a) + 1, "unit_id": int(u), "standardized_residual": float(r),
             "posterior_outlier_prob": float(p)}
            for a, u, r, p in zip(data.area, data.unit_id, std, s.outlier_prob)
        ])
    converged = s.converged
    return rows, params, converged, f"max split R-hat {s.max_rhat:.4f} >= 1.05"


def _fit_reblup(args, data, seed, out):
    psi = HuberPsi(args.huber_c)
    fit = fit_reblup(data, psi)
    if not fit.converged:
        return None, None, False, f"REBLUP did not converge in {fit.iterations_used} iterations"
    mse = bootstrap_mse(fit, data, args.bootstrap_b, seed=seed, jobs=max(1, args.jobs))
    rmse = np.sqrt(mse)
    rows = _estimates_rows(fit.theta, rmse, fit.theta - Z90 * rmse, fit.theta + Z90 * rmse,
                           fit.theta - Z95 * rmse, fit.theta + Z95 * rmse)
    params = {
        "model": "reblup",
        "beta": fit.beta.tolist(),
        "sigma_v2": fit.sigma_v2,
        "sigma_e2": fit.sigma_e2,
        "huber_c": psi.c,
        "K": psi.K,
        "iterations": fit.iterations_used,
        "bootstrap_B": args.bootstrap_b,
    }
    return rows, params, True, ""


def _fit_mq(args, data, seed, out):
    fit = fit_mq_sae(data, args.huber_c, estimator=args.mq_estimator)
    if not fit.converged.all():
        return None, None, False, "M-quantile IRLS did not converge at some area qbar"
    r = fit.rmse
    e = fit.estimates
    rows = _estimates_rows(e, r, e - Z90 * r, e + Z90 * r, e - Z95 * r, e + Z95 * r)
    params = {
        "model": "mq",
        "estimator": fit.estimator,
        "huber_c": args.huber_c,
        "area_qbar": fit.area_qbar.tolist(),
        "beta_area": fit.beta_area.tolist(),
    }
    return rows, params, True, ""


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    seed = _seed(args)
    data, inputs = _load(args)
    from .data import design_check

    design_check(data)
    if args.method in ("dg-hb", "nm-hb"):
        data.require_areas(3)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runner = {"dg-hb": _fit_hb, "nm-hb": _fit_hb, "reblup": _fit_reblup, "mq": _fit_mq}[args.method]
    rows, params, converged, why = runner(args, data, seed, out)
    extra = {"method": args.method, "converged": converged}
    _write_manifest(out, "fit", args, seed, t0, inputs, extra)
    if not converged:
        raise CLIError(EXIT_CONVERGENCE, "convergence", why)
    _write_csv(out / "estimates.csv", rows)
    (out / "params.json").write_text(json.dumps(params, indent=2))
    print(f"{args.method}: {data.m} areas, {data.n} units -> {out}")
    for row in rows:
        print(f"  area {row['area']:>3}  {row['estimate']:10.2f}  ({row['sd_or_rmse']:.2f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    seed = _seed(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise CLIError(EXIT_VALIDATION, "validation", f"unknown methods: {bad or methods}")
    S = 100 if args.full else args.S
    if S < 1:
        raise CLIError(EXIT_VALIDATION, "validation", "--S must be positive")
    scenario = SimScenario(SCENARIOS[args.scenario], S=S, seed=seed)
    cfg = StudyConfig(args.hb_iterations, args.hb_burn_in, args.hb_chains, args.bootstrap_b,
                      args.huber_c, args.mq_estimator, max(1, args.jobs))
    res = run_study(scenario, methods, cfg)
    out = Path(args.out)
    write_study(res, out, {"config": vars(cfg)})
    _write_manifest(out, "simulate", args, seed, t0, {}, {"failures": res.failures})
    print(f"scenario {args.scenario}, S={S}: {res.runtime_s:.1f}s")
    for name in methods:
        means = {k: res.area_mean(name, k) for k in ("eB", "eM", "RE", "coverage90", "avg_len90")}
        print("  " + name + "  " + "  ".join(f"{k}={v:.3f}" for k, v in means.items()))
    worst = {k: v for k, v in res.failures.items() if v > 0.10 * S}
    if worst:
        raise CLIError(EXIT_CONVERGENCE, "convergence", f"methods failed in >10% of replicates: {worst}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def _read_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _label(manifest, path):
    cfg = manifest.get("config", {})
    if manifest.get("command") == "fit":
        src = cfg.get("dataset") or Path(str(cfg.get("units", path))).stem
        return f"{cfg.get('method')}:{src}"
    return f"simulate:{cfg.get('scenario')}"


def cmd_report(args) -> int:
    dirs = [Path(d) for d in args.inputs]
    manifests = []
    for d in dirs:
        mpath = d / "manifest.json"
        if not mpath.exists():
            raise CLIError(EXIT_VALIDATION, "validation", f"{d}: no manifest.json")
        manifests.append(json.loads(mpath.read_text()))
    schemas = {m.get("schema") for m in manifests}
    if len(schemas) != 1 or not schemas <= {FIT_SCHEMA, SIM_SCHEMA}:
        raise CLIError(EXIT_VALIDATION, "schema", f"schema versions differ or are unknown: {sorted(map(str, schemas))}")
    kind = schemas.pop()
    fname = "estimates.csv" if kind == FIT_SCHEMA else "metrics.csv"
    tables = [_read_table(d / fname) for d in dirs]
    if len(dirs) == 1:
        rows = tables[0]
    elif kind == FIT_SCHEMA:
        labels = [_label(m, d) for m, d in zip(manifests, dirs)]
        areas = sorted({int(r["area"]) for t in tables for r in t})
        rows = []
        for a in areas:
            row = {"area": a}
            for lab, t in zip(labels, tables):
                hit = next((r for r in t if int(r["area"]) == a), None)
                row[f"{lab}.estimate"] = hit["estimate"] if hit else ""
                row[f"{lab}.sd_or_rmse"] = hit["sd_or_rmse"] if hit else ""
            rows.append(row)
    else:
        rows = []
        for m, d, t in zip(manifests, dirs, tables):
            lab = _label(m, d)
            rows.extend({"source": lab, **r} for r in t)
    stream = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        if args.format == "json":
            json.dump(rows, stream, indent=2)
            stream.write("\n")
        elif rows:
            w = csv.DictWriter(stream, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    finally:
        if args.out:
            stream.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nersae", description="Small area estimation under the nested error regression model.")
    p.add_argument("--version", action="version", version=f"nersae {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file whose keys mirror the long flags")
        sp.add_argument("--seed", type=int, default=20240101)
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
        sp.add_argument("--huber-c", type=float, default=1.345)
        sp.add_argument("--bootstrap-b", type=int, default=100)
        sp.add_argument("--mq-estimator", choices=ESTIMATORS, default="bias-adjusted")

    f = sub.add_parser("fit", help="fit one method to a dataset")
    f.add_argument("--method", required=True, choices=["dg-hb", "nm-hb", "reblup", "mq"])
    f.add_argument("--units", help="unit-level CSV")
    f.add_argument("--areas", help="area-level CSV")
    f.add_argument("--dataset", choices=["corn", "corn-reduced"], help="built-in dataset")
    f.add_argument("--out", required=True)
    f.add_argument("--chains", type=int, default=4)
    f.add_argument("--iterations", type=int, default=25_000)
    f.add_argument("--burn-in", type=int, default=5_000)
    f.add_argument("--thin", type=int, default=1)
    common(f)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run the simulation study")
    s.add_argument("--scenario", required=True, choices=list(SCENARIOS))
    s.add_argument("--S", type=int, default=50)
    s.add_argument("--full", action="store_true", help="S=100 replicates")
    s.add_argument("--methods", default=",".join(METHODS))
    s.add_argument("--out", required=True)
    s.add_argument("--hb-iterations", type=int, default=6_000)
    s.add_argument("--hb-burn-in", type=int, default=1_000)
    s.add_argument("--hb-chains", type=int, default=2)
    common(s)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="merge fit or simulation outputs")
    r.add_argument("--in", dest="inputs", nargs="+", required=True)
    r.add_argument("--format", choices=["csv", "json"], default="csv")
    r.add_argument("--out", help="output file (default stdout)")
    r.set_defaults(func=cmd_report)
    return p


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            cfg = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError(EXIT_VALIDATION, "validation", f"cannot read config {cfg_path}: {exc}")
        if not isinstance(cfg, dict):
            raise CLIError(EXIT_VALIDATION, "validation", "config JSON must be an object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(k.replace("-", "_") for k in cfg) - known)
        if unknown:
            raise CLIError(EXIT_VALIDATION, "validation", f"unknown config keys: {unknown}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = _parse(argv)
    except CLIError as exc:
        return _fail(exc)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        return _fail(exc)
    except DatasetError as exc:
        return _fail(CLIError(EXIT_VALIDATION, "validation", str(exc)), exc.errors)
    except ConvergenceError as exc:
        return _fail(CLIError(EXIT_CONVERGENCE, "convergence", str(exc)))
    except (ValueError, np.linalg.LinAlgError, OSError) as exc:
        return _fail(CLIError(EXIT_VALIDATION, "validation", str(exc)))


def _fail(exc: CLIError, details=None) -> int:
    payload = {"error": exc.kind, "message": exc.message, "exit_code": exc.code}
    if details:
        payload["details"] = list(details)
    print(json.dumps(payload))
    log.error(exc.message)
    return exc.code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
