#!/usr/bin/env python3
"""
Strong Convergence Benchmark
Euler-Maruyama and Milstein strong errors on BSB d = 1, with wall times
and the thread scaling of surrogate path generation.
"""

import argparse
import time
from datetime import datetime

import numpy as np

from fbsdenet.core.brownian import increments_at_level, sample_lattice
from fbsdenet.core.problems import bsb_problem
from fbsdenet.core.surrogate import MlpSurrogate
from fbsdenet.core.timegrid import level_grid
from fbsdenet.services.mlmc import StrongErrorNorm, convergence_fit, strong_error
from fbsdenet.services.simulate import PathMode, PathOptions, Track, exact_forward_path, generate_paths, milstein_paths
from fbsdenet.workers.pool import close_pool, init_pool

# -------------------------------------------------------------------
# Configuration
# -------------------------------------------------------------------

LEVELS = list(range(2, 9))
PATHS = 8192
SEED = 2024
THREAD_COUNTS = [1, 2, 4, 8]
CHUNK = 1024

# -------------------------------------------------------------------
# Strong Errors
# -------------------------------------------------------------------

def forward_errors(spec, lattice):
    rows = []
    for level in LEVELS:
        grid = level_grid(spec.horizon, level)
        increments = increments_at_level(lattice, level)
        exact = exact_forward_path(spec, grid, increments)[:, -1, 0].numpy()

        t0 = time.time()
        bundle = generate_paths(spec, grid, increments, None, PathOptions(mode=PathMode.EXACT_ONLY))
        em_time = time.time() - t0
        em = bundle.track(Track.EXACT_U).x[:, -1, 0].numpy()

        t0 = time.time()
        mil = milstein_paths(spec, grid, increments)[:, -1, 0].numpy()
        mil_time = time.time() - t0

        rows.append({
            "level": level,
            "em": strong_error(exact, em, StrongErrorNorm.L2_TERMINAL),
            "milstein": strong_error(exact, mil, StrongErrorNorm.L2_TERMINAL),
            "em_ms": em_time * 1000,
            "milstein_ms": mil_time * 1000,
        })
    return rows

# -------------------------------------------------------------------
# Thread Scaling
# -------------------------------------------------------------------

def thread_scaling(spec, lattice, level):
    grid = level_grid(spec.horizon, level)
    increments = increments_at_level(lattice, level)
    net = MlpSurrogate([2, 32, 32, 32, 32, 1], seed=SEED, time_scale=spec.horizon)
    options = PathOptions(mode=PathMode.SURROGATE_ONLY, chunk_size=CHUNK)
    reference = None
    rows = []
    for threads in THREAD_COUNTS:
        init_pool(threads)
        try:
            t0 = time.time()
            bundle = generate_paths(spec, grid, increments, net, options)
            elapsed = time.time() - t0
        finally:
            close_pool()
        y = bundle.track(Track.SURROGATE).y.numpy()
        if reference is None:
            reference = y
        rows.append({"threads": threads, "seconds": elapsed, "identical": bool(np.array_equal(y, reference))})
    return rows

# -------------------------------------------------------------------
# Runner
# -------------------------------------------------------------------

def run_benchmark(paths, scaling_level):
    print("=== Strong Convergence Benchmark ===")
    print(f"Start Time: {datetime.now()}")
    print(f"Paths: {paths}")
    print(f"Levels: {LEVELS[0]}..{LEVELS[-1]}\n")

    spec = bsb_problem(d=1)
    t0 = time.time()
    lattice = sample_lattice(SEED, LEVELS[-1], paths, 1, spec.horizon)
    print(f"Lattice sampled in {time.time() - t0:.2f} s\n")

    rows = forward_errors(spec, lattice)
    print(f"{'level':>5}  {'EM L2':>12}  {'Milstein L2':>12}  {'EM ms':>8}  {'Mil ms':>8}")
    for r in rows:
        print(f"{r['level']:>5}  {r['em']:>12.4e}  {r['milstein']:>12.4e}  {r['em_ms']:>8.1f}  {r['milstein_ms']:>8.1f}")

    em_fit = convergence_fit(LEVELS, [r["em"] for r in rows])
    mil_fit = convergence_fit(LEVELS, [r["milstein"] for r in rows])
    print("\n=== Fitted Orders ===")
    print(f"Euler-Maruyama: {em_fit.order:.3f} (r2 {em_fit.r_squared:.4f})")
    print(f"Milstein:       {mil_fit.order:.3f} (r2 {mil_fit.r_squared:.4f})")

    print(f"\n=== Surrogate Paths, level {scaling_level} ===")
    for r in thread_scaling(spec, lattice, scaling_level):
        status = "identical" if r["identical"] else "DIFFERS"
        print(f"threads={r['threads']:<2} {r['seconds']:.2f} s  {status}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("--paths", type=int, default=PATHS)
    parser.add_argument("--scaling-level", type=int, default=6)
    args = parser.parse_args()
    run_benchmark(args.paths, args.scaling_level)
