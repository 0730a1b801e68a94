"""Time the numba Gibbs kernels against the vectorised numpy fallback.

    python benchmarks/bench_kernels.py [--iterations 5000] [--repeat 3]

Both backends run from the same generator state, so the script also
reports the largest relative difference between their draws.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from nersae import _gibbs
from nersae._accel import NUMBA_AVAILABLE
from nersae.data import load_corn
from nersae.evalsim import SimScenario, draw_srs, generate_population
from nersae.hb import initial_state
from nersae.samplers import RngStream


def _run(kernel, model, data, iterations, seed):
    gen = RngStream(seed).generator()
    st = initial_state(model, data, gen)
    T = iterations
    ob, ov = np.empty((T, data.p)), np.empty((T, data.m))
    lo, hi = np.full(data.p, -np.inf), np.full(data.p, np.inf)
    y, X = np.ascontiguousarray(data.y), np.ascontiguousarray(data.X)
    beta, v = np.array(st.beta), np.array(st.v)
    t0 = time.perf_counter()
    if model == "dg":
        sc = np.array([st.sigma_v2, st.sigma_e2])
        os_ = np.empty((T, 2))
        kernel(y, X, data.area, data.m, beta, v, sc, T, 0, 1, lo, hi, 0.0, np.inf, gen, ob, ov, os_)
    else:
        sc = np.array([st.sigma_v2, st.sigma1_2, st.sigma2_2, st.p_e])
        os_ = np.empty((T, 5))
        z = np.array(st.z, np.int64)
        zero = np.zeros(data.n, np.int64)
        kernel(y, X, data.area, data.m, beta, v, z, sc, T, 0, 1, lo, hi, 0.0, np.inf, gen,
               ob, ov, os_, zero)
    return time.perf_counter() - t0, np.column_stack([ob, ov, os_])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=5000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")

    corn = load_corn()
    sim = draw_srs(generate_population(SimScenario("mixture"), 0), 4, RngStream(7).generator())
    print(f"{'dataset':<8}{'model':<6}{'numba s':>10}{'numpy s':>10}{'speedup':>9}{'max rel diff':>14}")
    for label, data in (("corn", corn), ("sim", sim)):
        for model in ("dg", "nm"):
            loops = _gibbs.dg_chain_loops if model == "dg" else _gibbs.nm_chain_loops
            numpy_ = _gibbs.dg_chain_numpy if model == "dg" else _gibbs.nm_chain_numpy
            _run(loops, model, data, 10, 0)  # compile / load cache
            t_nb = min(_run(loops, model, data, args.iterations, 1)[0] for _ in range(args.repeat))
            t_np = min(_run(numpy_, model, data, args.iterations, 1)[0] for _ in range(args.repeat))
            short = min(args.iterations, 200)
            a = _run(loops, model, data, short, 2)[1]
            b = _run(numpy_, model, data, short, 2)[1]
            diff = np.max(np.abs(a - b) / (1.0 + np.abs(a)))
            print(f"{label:<8}{model:<6}{t_nb:>10.3f}{t_np:>10.3f}{t_np / t_nb:>9.1f}{diff:>14.1e}")


if __name__ == "__main__":
    main()
