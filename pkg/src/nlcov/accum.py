"""Streaming mean/covariance accumulators with exact batch merge.

All covariances use the population (divide-by-count) convention: the
pairwise merge identity used by `CovAccumulator.absorb` is exact only
under that convention.  Accumulation is float64 regardless of the input
dtype; only the lower triangle of the covariance is stored and mirrored
on read.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def _tril(m: int):
    rows, cols = np.tril_indices(m)
    diag = np.flatnonzero(rows == cols)
    return rows, cols, diag


def packed_size(m: int) -> int:
    return m * (m + 1) // 2


@dataclass
class BatchStats:
    """Count, mean and population covariance of one batch."""

    count: int
    mean: np.ndarray
    cov: np.ndarray


def batch_stats(batch) -> BatchStats:
    """Population mean/covariance of an n-by-m batch (rows = inputs)."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ValueError(f"batch must be 2-D, got shape {batch.shape}")
    n, m = batch.shape
    if n < 1 or m < 1:
        raise ValueError("empty batch")
    mean = batch.mean(axis=0)
    centered = batch - mean
    cov = centered.T @ centered / n
    cov = (cov + cov.T) / 2.0  # force exact symmetry
    return BatchStats(count=n, mean=mean, cov=cov)


def entrywise_l1(cov) -> float:
    """Sum of absolute entries of a square matrix (not the induced 1-norm)."""
    cov = np.asarray(cov)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {cov.shape}")
    return float(np.abs(cov).sum())


class CovAccumulator:
    """Running count/mean/covariance over a stream of input batches.

    The zero-count accumulator is the identity for `absorb`.
    """

    __slots__ = ("neurons", "count", "mean", "_tril")

    def __init__(self, neurons: int):
        if neurons < 1:
            raise ValueError("neurons must be >= 1")
        self.neurons = neurons
        self.count = 0
        self.mean = np.zeros(neurons, dtype=np.float64)
        self._tril = np.zeros(packed_size(neurons), dtype=np.float64)

    @property
    def cov(self) -> np.ndarray:
        """Full m-by-m covariance, mirrored from the stored lower triangle."""
        rows, cols, _ = _tril(self.neurons)
        full = np.zeros((self.neurons, self.neurons), dtype=np.float64)
        full[rows, cols] = self._tril
        full[cols, rows] = self._tril
        return full

    def l1(self) -> float:
        """Entrywise L1 of the covariance, off-diagonal entries counted twice."""
        _, _, diag = _tril(self.neurons)
        a = np.abs(self._tril)
        return float(2.0 * a.sum() - a[diag].sum())

    def absorb(self, stats: BatchStats) -> None:
        """Fold a batch summary in via the exact pooled-covariance identity."""
        if stats.mean.shape[0] != self.neurons:
            raise ValueError(
                f"dimension mismatch: accumulator has {self.neurons} neurons, "
                f"batch has {stats.mean.shape[0]}"
            )
        nb = stats.count
        if nb == 0:
            return
        rows, cols, _ = _tril(self.neurons)
        packed_b = np.ascontiguousarray(stats.cov[rows, cols], dtype=np.float64)
        if self.count == 0:
            self.count = nb
            self.mean = stats.mean.astype(np.float64).copy()
            self._tril = packed_b
            return
        na = self.count
        n = na + nb
        d = self.mean - stats.mean
        # cross-mean rank-1 term, scaled by na*nb/n^2, plus the
        # count-weighted average of the two covariances
        self._tril = (na * nb / (n * n)) * (d[rows] * d[cols]) + (
            na * self._tril + nb * packed_b
        ) / n
        self.mean = (na * self.mean + nb * stats.mean) / n
        self.count = n

    def absorb_batch(self, batch) -> None:
        self.absorb(batch_stats(batch))

    def copy(self) -> "CovAccumulator":
        """Independent deep copy; mutating one side never affects the other."""
        out = CovAccumulator(self.neurons)
        out.count = self.count
        out.mean = self.mean.copy()
        out._tril = self._tril.copy()
        return out

    def same_state(self, other: "CovAccumulator") -> bool:
        """Bit-exact state comparison (used by rollback soundness checks)."""
        return (
            self.neurons == other.neurons
            and self.count == other.count
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self._tril, other._tril)
        )

    def __repr__(self) -> str:
        return f"CovAccumulator(neurons={self.neurons}, count={self.count})"


def merge(a: CovAccumulator, b: BatchStats) -> CovAccumulator:
    """Pure-function form of `CovAccumulator.absorb`."""
    out = a.copy()
    out.absorb(b)
    return out
