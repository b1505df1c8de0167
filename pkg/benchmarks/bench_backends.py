"""Benchmark the numba kernels against the pure-numpy fallback.

Run: python benchmarks/bench_backends.py [--shape 40,40,40] [--rank 20]
     [--observed 0.5] [--runs 5]

Times the three hot kernels (per-mode moment accumulation, expected squared
reconstruction norm, reconstruction values at observed entries) and one full
inference sweep under each backend.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from brtf import kernels
from brtf.inference import VBEngine
from brtf.state import new_state


def time_call(fn, runs, warmup=2):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def build_case(shape, rank, observed, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(shape)
    mask = rng.random(shape) < observed
    state = new_state(y, mask, rank, seed=seed)
    layout = kernels.ObservationLayout(mask)
    resid = layout.gather(np.where(mask, y, 0.0))
    return y, mask, state, layout, resid


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--shape", default="40,40,40")
    parser.add_argument("--rank", type=int, default=20)
    parser.add_argument("--observed", type=float, default=0.5)
    parser.add_argument("--runs", type=int, default=5)
    args = parser.parse_args()
    shape = tuple(int(s) for s in args.shape.split(","))

    y, mask, state, layout, resid = build_case(shape, args.rank, args.observed)
    print(f"shape {shape}, rank {args.rank}, "
          f"{layout.count} observed entries ({args.observed:.0%})")
    if not kernels.HAS_NUMBA:
        print("numba unavailable; only the numpy fallback can run")
        return

    cases = {
        "mode moments": lambda: kernels.mode_gram_proj(
            layout, mask, resid, state.factor_means(), state.quad, 0),
        "expected sq norm": lambda: kernels.expected_sq_norm_obs(
            layout, mask, state.quad),
        "cp at observed": lambda: kernels.cp_means_at_obs(
            layout, state.factor_means()),
    }

    def sweep():
        st = new_state(y, mask, args.rank, seed=1)
        engine = VBEngine(y, mask, st)
        for mode in range(len(shape)):
            engine.update_factor(mode)
        engine.update_lambda()
        engine.update_tau()
        engine.update_sparse()
        engine.update_gamma()
        engine.elbo()

    cases["full sweep"] = sweep

    results = {}
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)
        results[backend] = {name: time_call(fn, args.runs) for name, fn in cases.items()}

    print(f"{'kernel':>18} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name in cases:
        a, b = results["numpy"][name], results["numba"][name]
        print(f"{name:>18} {a * 1e3:9.2f}ms {b * 1e3:9.2f}ms {a / b:7.2f}x")


if __name__ == "__main__":
    main()
