#!/usr/bin/env python3
"""Benchmark the numba-compiled kernels against their numpy fallbacks.

Covers the two hot paths: the per-window concurrency sweep over request
intervals and the two-stage map/copy pipeline schedule. Run with
PREWARMSIM_NUMBA=0 to confirm the fallback selection, or directly:

  python benchmarks/bench_kernels.py --intervals 1000000 --chunks 100000
"""

import argparse
import time

import numpy as np

from prewarmsim import kernels


def build_window_workload(n_intervals, seed):
    rng = np.random.default_rng(seed)
    starts = rng.uniform(0, 86_400_000, n_intervals)
    ends = starts + rng.exponential(120_000, n_intervals)
    times = np.concatenate([starts, ends])
    deltas = np.concatenate(
        [np.ones(n_intervals, np.int64), -np.ones(n_intervals, np.int64)]
    )
    uniq, inverse = np.unique(times, return_inverse=True)
    net = np.zeros(len(uniq), np.int64)
    np.add.at(net, inverse, deltas)
    return uniq, net


def build_pipeline_workload(n_chunks, seed):
    rng = np.random.default_rng(seed)
    map_ms = rng.uniform(0.01, 0.08, n_chunks)
    transfer_ms = rng.uniform(0.02, 0.12, n_chunks)
    return map_ms, transfer_ms


def timeit(fn, *args, repeats=5):
    fn(*args)  # warmup (and JIT compile for the numba path)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn(*args)
        samples.append(time.perf_counter() - t0)
    return min(samples), result


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--intervals", type=int, default=1_000_000)
    parser.add_argument("--chunks", type=int, default=100_000)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    print(f"numba available: {kernels.HAS_NUMBA}; enabled: {kernels.NUMBA_ENABLED}")

    times, deltas = build_window_workload(args.intervals, args.seed)
    window_ms = 300_000.0
    n_windows = int(np.ceil(times[-1] / window_ms))
    print(
        f"\nwindow_aggregate: {args.intervals} intervals, {len(times)} events, "
        f"{n_windows} windows"
    )
    t_np, (avg_np, peak_np) = timeit(
        kernels.window_aggregate_numpy, times, deltas, window_ms, n_windows,
        repeats=args.repeats,
    )
    print(f"  numpy : {t_np * 1000:8.2f} ms")
    if kernels.HAS_NUMBA:
        t_nb, (avg_nb, peak_nb) = timeit(
            kernels.window_aggregate_numba, times, deltas, window_ms, n_windows,
            repeats=args.repeats,
        )
        assert np.allclose(avg_np, avg_nb) and np.array_equal(peak_np, peak_nb)
        print(f"  numba : {t_nb * 1000:8.2f} ms   speedup {t_np / t_nb:5.2f}x")

    map_ms, transfer_ms = build_pipeline_workload(args.chunks, args.seed)
    print(f"\npipeline_finish: {args.chunks} chunks")
    t_np, f_np = timeit(
        kernels.pipeline_finish_numpy, map_ms, transfer_ms, repeats=args.repeats
    )
    print(f"  numpy : {t_np * 1000:8.2f} ms")
    if kernels.HAS_NUMBA:
        t_nb, f_nb = timeit(
            kernels.pipeline_finish_numba, map_ms, transfer_ms, repeats=args.repeats
        )
        assert abs(f_np - f_nb) < 1e-6 * max(1.0, abs(f_np))
        print(f"  numba : {t_nb * 1000:8.2f} ms   speedup {t_np / t_nb:5.2f}x")


if __name__ == "__main__":
    main()
