"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is called once before timing so numba compilation is excluded.
"""
import argparse
import time

import numpy as np

from tabsecmi import kernels
from tabsecmi._accel import use_numba


def best_of(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - start)
    return min(times)


def cases(rng):
    syn, ref = rng.normal(size=(2000, 8)), rng.normal(size=(2000, 8))
    yield "min_sq_dist 2000x2000x8", kernels._min_sq_dist_nb, kernels._min_sq_dist_np, (syn, ref)
    x = rng.normal(size=(64, 16, 8))
    w = rng.normal(size=(16, 16, 3))
    b = np.zeros(16)
    g = rng.normal(size=(64, 16, 8))
    yield "conv1d forward 64x16x8", kernels._conv1d_forward_nb, kernels._conv1d_forward_np, (x, w, b)
    yield "conv1d backward 64x16x8", kernels._conv1d_backward_nb, kernels._conv1d_backward_np, (x, w, g)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if not use_numba():
        print("numba disabled or missing; both columns time the same fallback")
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, nb, np_fn, fn_args in cases(np.random.default_rng(0)):
        t_nb = best_of(nb if use_numba() else np_fn, fn_args, args.repeat)
        t_np = best_of(np_fn, fn_args, args.repeat)
        print(f"{name:28s} {t_nb * 1e3:10.3f} {t_np * 1e3:10.3f} {t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()
