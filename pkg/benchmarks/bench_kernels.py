"""Compare the numba and numpy kernel paths.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Kernel timings call both variants directly. The end-to-end PNP sweep runs in
a fresh interpreter per backend (NVSINGLET_NUMBA=1 / 0), since the backend is
picked at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from nvsinglet import kernels
from nvsinglet.model import RateSet, build_generator, dark_generator, optical_generator

SWEEP = """
import time, numpy as np
from nvsinglet import sequence
from nvsinglet.sequence import pnp_curve
grid = np.linspace(0.0, 50.0, 20)
pnp_curve("RedFilter", grid)  # compile / warm
best = 1e9
for _ in range({repeat}):
    sequence._pre_ionization.cache_clear(); sequence._readout_row.cache_clear()
    t = time.perf_counter(); pnp_curve("RedFilter", grid); best = min(best, time.perf_counter() - t)
print(best)
"""


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    rates = RateSet.defaults()
    q = build_generator(rates.intrinsic, rates, [("Green532", 0.2)])
    q0 = dark_generator(rates.intrinsic)
    q1 = optical_generator(rates.channel("RedFilter"), 1.0)
    scales = np.linspace(0.0, 50.0, 21)
    states = np.ascontiguousarray(np.eye(8)[:, :2])
    p0 = np.full(8, 1 / 8)

    cases = {
        "expm 8x8 (dt=300 ns)": (lambda: kernels.expm_nb(q * 300.0, 8), lambda: kernels.expm_np(q * 300.0, 8), 200),
        "expm_grid 21 powers": (lambda: kernels.expm_grid_nb(q0, q1, scales, 100.0, states),
                                lambda: kernels.expm_grid_np(q0, q1, scales, 100.0, states), 50),
        "rk4 1e4 steps": (lambda: kernels.rk4_nb(q, p0, 0.01, 10000), lambda: kernels.rk4_np(q, p0, 0.01, 10000), 5),
    }
    for fast, _, _ in cases.values():
        fast()  # trigger compilation outside the timing

    print(f"{'kernel':<24}{'numba':>12}{'numpy':>12}{'speedup':>10}")
    for name, (fast, slow, number) in cases.items():
        t_nb = best_of(fast, args.repeat, number)
        t_np = best_of(slow, args.repeat, number)
        print(f"{name:<24}{t_nb * 1e6:>10.1f}us{t_np * 1e6:>10.1f}us{t_np / t_nb:>9.1f}x")

    sweep = {}
    for flag in ("1", "0"):
        env = {**os.environ, "NVSINGLET_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", SWEEP.format(repeat=args.repeat)],
                             env=env, capture_output=True, text=True, check=True)
        sweep[flag] = float(out.stdout.strip())
    print(f"{'PNP sweep 20 powers':<24}{sweep['1'] * 1e3:>10.2f}ms{sweep['0'] * 1e3:>10.2f}ms"
          f"{sweep['0'] / sweep['1']:>9.1f}x")


if __name__ == "__main__":
    main()
