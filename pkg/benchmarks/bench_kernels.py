"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--rows 100000] [--dims 16,68,676] [--repeat 5]

Each kernel is called on identical inputs through both paths; outputs are
compared before timing so a fast-but-wrong kernel cannot win. The first
numba call (JIT or cache load) is excluded and reported separately.
Finishes with an end-to-end Monte Carlo run under CRSFL_NUMBA=1 and =0.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from crsfl import _kernels


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench_dim(d, rows, repeat):
    if not hasattr(_kernels, "select_top_nb"):
        print("numba not installed; nothing to compare")
        return
    rng = np.random.default_rng(d)
    g = rng.standard_normal(d)
    k = max(1, d // 10)
    pri = 0.6 * rng.random((rows, d)) * g * g

    t = time.perf_counter()
    sel, tau = _kernels.select_top_nb(pri, k)
    vals, _ = _kernels.estimate_nb(g, sel, tau, 0.6, _kernels.ESTIMATOR_CRS)
    _kernels.accumulate_nb(sel, vals, d)
    warm = time.perf_counter() - t

    s_np, t_np = _kernels.select_top_np(pri, k)
    assert np.array_equal(s_np, sel) and np.array_equal(t_np, tau)
    v_np, _ = _kernels.estimate_np(g, s_np, t_np, 0.6, _kernels.ESTIMATOR_CRS)
    assert np.array_equal(v_np, vals)

    cases = [
        ("select_top", lambda: _kernels.select_top_np(pri, k), lambda: _kernels.select_top_nb(pri, k)),
        ("estimate", lambda: _kernels.estimate_np(g, sel, tau, 0.6, 0),
         lambda: _kernels.estimate_nb(g, sel, tau, 0.6, 0)),
        ("accumulate", lambda: _kernels.accumulate_np(sel, vals, d),
         lambda: _kernels.accumulate_nb(sel, vals, d)),
    ]
    print(f"d={d} K={k} rows={rows} (first numba call {warm * 1e3:.0f} ms)")
    for name, f_np, f_nb in cases:
        a, b = best_of(f_np, repeat), best_of(f_nb, repeat)
        print(f"  {name:<11} numpy {a * 1e3:9.2f} ms   numba {b * 1e3:9.2f} ms   x{a / b:6.2f}")


MC_SNIPPET = """
import time, numpy as np
from crsfl.montecarlo import sampler_moments
g = np.random.default_rng(0).standard_normal(16)
sampler_moments("crs", g, 1000, np.random.default_rng(0), K=4, p=0.6)
t = time.perf_counter()
sampler_moments("crs", g, {n}, np.random.default_rng(1), K=4, p=0.6)
print(time.perf_counter() - t)
"""


def bench_end_to_end(n):
    print(f"Monte Carlo, CRS, d=16, K=4, N={n}:")
    for flag in ("1", "0"):
        env = dict(os.environ, CRSFL_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", MC_SNIPPET.format(n=n)], env=env,
                             capture_output=True, text=True, check=True)
        print(f"  CRSFL_NUMBA={flag}: {float(out.stdout):.2f} s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=100_000)
    ap.add_argument("--dims", default="16,68,676")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--mc", type=int, default=1_000_000, help="samples for the end-to-end run (0 skips)")
    args = ap.parse_args()
    for d in (int(x) for x in args.dims.split(",")):
        rows = args.rows if d <= 100 else max(1, args.rows // 10)
        bench_dim(d, rows, args.repeat)
    if args.mc:
        bench_end_to_end(args.mc)


if __name__ == "__main__":
    main()
