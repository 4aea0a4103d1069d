#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Also times the two M-step shape solvers (closed form vs exact-digamma
Newton) on identical sufficient statistics, and full K.. / K.R fits
under each backend.

Usage:
    python3 benchmarks/bench_kernels.py [--sites C] [--repeat N] [--threads T]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from betamix import kernels
from betamix.em import _column_params, accumulate_stats, e_step, fit, update_shapes
from betamix.initialization import initial_params, kmeans_init
from betamix.model import FitConfig, ModelSpec
from betamix.simulate import SimConfig, simulate


def best_of(fn, repeat):
    """Minimum wall time over ``repeat`` calls, plus the last result."""
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def bench_kernels(matrix, spec, repeat):
    lx, l1x = matrix.log_columns()
    assignment = kmeans_init(matrix, spec.K, 0, "numpy")
    tau, shapes = initial_params(matrix, assignment, spec)
    am1, dm1, const, log_tau = _column_params(tau, shapes)
    z = e_step(matrix, tau, shapes, "numpy")
    cols = matrix.columns
    centroids = np.ascontiguousarray(cols[:, :spec.K].T)
    labels = assignment.labels

    cases = {
        "e-step": lambda b: kernels.estep_kernel(lx, l1x, am1, dm1, const, log_tau, b),
        "column sums": lambda b: kernels.colsums_kernel(z, lx, l1x, b),
        "k-means assign": lambda b: kernels.kmeans_assign_kernel(cols, centroids, b),
        "cluster sums": lambda b: kernels.cluster_sums_kernel(cols, labels, spec.K, b),
    }
    print(f"{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for name, fn in cases.items():
        fn("numba")  # compile
        t_np, r_np = best_of(lambda: fn("numpy"), repeat)
        t_nb, r_nb = best_of(lambda: fn("numba"), repeat)
        print(f"{name:<16}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>9.1f}{max_diff(r_np, r_nb):>12.1e}")


def bench_mstep(matrix, spec, repeat):
    fitted = fit(matrix, spec, FitConfig(seed=0))
    stats = accumulate_stats(matrix, fitted.responsibilities, spec)
    prev = fitted.shapes
    t_cf, (cf, _) = best_of(lambda: update_shapes(stats, prev, exact=False), repeat)
    t_ex, (ex, _) = best_of(lambda: update_shapes(stats, prev, exact=True), repeat)
    rel = np.max(np.abs(cf.alpha_free - ex.alpha_free) / ex.alpha_free)
    print(f"\nshape solve ({spec.variant.value}, {stats.y1.size} blocks): closed form {1e6 * t_cf:.1f} us, "
          f"Newton {1e6 * t_ex:.1f} us, ratio {t_ex / t_cf:.1f}x, max rel alpha diff {rel:.3f}")


def bench_fit(matrix, spec, label):
    print(f"\nfull fit {label}:")
    for backend in ("numpy", "numba"):
        cfg = FitConfig(seed=0, backend=backend)
        fit(matrix, spec, cfg)  # warm-up and compile
        timings = {}
        t0 = time.perf_counter()
        fm = fit(matrix, spec, cfg, timings=timings)
        print(f"  {backend:<6} {time.perf_counter() - t0:7.3f} s  ({fm.n_iterations} iterations, "
              f"init {timings['init']:.3f} s, em {timings['em']:.3f} s, loglik {fm.loglik:.6f})")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sites", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()

    if not kernels.HAS_NUMBA:
        raise SystemExit("numba is not available (or BETAMIX_BACKEND=numpy); nothing to compare")
    n = kernels.set_threads(args.threads)
    data = simulate(SimConfig(C=args.sites, seed=1))
    sample_a = data.matrix.select_sample(0)
    kdd = ModelSpec("k..", 3)
    kr = ModelSpec("k.r").resolved(data.matrix.R)
    print(f"C = {args.sites}, threads = {n}, best of {args.repeat}\n")

    print("K.. on sample A (J = 4 columns, K = 3)")
    bench_kernels(sample_a, kdd, args.repeat)
    print("\nK.R on both samples (J = 8 columns, K = 9)")
    bench_kernels(data.matrix, kr, args.repeat)

    bench_mstep(sample_a, kdd, args.repeat)
    bench_mstep(data.matrix, kr, args.repeat)

    bench_fit(sample_a, kdd, "K.. sample A")
    bench_fit(data.matrix, kr, "K.R")


if __name__ == "__main__":
    main()
