"""Error propagation for disorder averages and Markov-chain time series."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


def weighted_mean(x: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Mean over the leading axis.

    Unweighted 1-d data use an exactly rounded sum, so the result does not
    depend on realization order.  Weighted (quadrature) sums use a dot product.
    """
    x = np.asarray(x, dtype=np.float64)
    if weights is None:
        if x.ndim == 1:
            return np.float64(math.fsum(x) / len(x))
        return x.mean(axis=0)
    w = np.asarray(weights, dtype=np.float64)
    return np.tensordot(w, x, axes=(0, 0))


def mean_stderr(x, weights=None) -> tuple[float, float]:
    """Sample mean and its standard error (zero for quadrature weights)."""
    x = np.asarray(x, dtype=np.float64)
    mean = float(weighted_mean(x, weights))
    if weights is not None or len(x) < 2:
        return mean, 0.0
    return mean, float(np.std(x, ddof=1) / math.sqrt(len(x)))


def jackknife(fn: Callable[..., np.ndarray], columns: Sequence[np.ndarray], weights=None, blocks: int = 256):
    """Value and jackknife error of ``fn(mean(col) for col in columns)``.

    ``fn`` receives means with a possible extra leading axis (one row per
    left-out block) and must reduce only over trailing axes.  Up to
    ``blocks`` realizations this is the delete-one jackknife; beyond that,
    contiguous blocks are left out instead.  Quadrature weights give the
    exact value with zero error.
    """
    cols = [np.asarray(c, dtype=np.float64) for c in columns]
    value = np.asarray(fn(*[weighted_mean(c, weights) for c in cols]), dtype=np.float64)
    n = len(cols[0])
    if weights is not None or n < 2:
        return value, np.zeros_like(value)
    if n <= blocks:
        loo = [(c.sum(axis=0)[None] - c) / (n - 1) for c in cols]
        g = n
    else:
        edges = np.linspace(0, n, blocks + 1).astype(np.int64)
        counts = np.diff(edges)[(slice(None),) + (None,) * (cols[0].ndim - 1)]
        loo = []
        for c in cols:
            sums = np.add.reduceat(c, edges[:-1], axis=0)
            loo.append((c.sum(axis=0)[None] - sums) / (n - counts))
        g = blocks
    reps = np.asarray(fn(*loo), dtype=np.float64)
    spread = reps - reps.mean(axis=0)
    se = np.sqrt((g - 1) / g * np.sum(spread**2, axis=0))
    return value, se


def autocovariance(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    y = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(y, size)
    return np.fft.irfft(f * np.conj(f), size)[:n] / n


def integrated_autocorr_time(x) -> float:
    """tau_int = 1 + 2 sum_t rho(t), truncated by Geyer's initial monotone sequence.

    An uncorrelated series gives about 1; a constant series gives exactly 1.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n < 4:
        return 1.0
    acov = autocovariance(x)
    if acov[0] <= 1e-300 * max(1.0, float(np.max(np.abs(x))) ** 2):
        return 1.0
    rho = acov / acov[0]
    m = n // 2
    pairs = rho[0 : 2 * m : 2] + rho[1 : 2 * m : 2]
    bad = np.nonzero(pairs <= 0)[0]
    k = bad[0] if len(bad) else m
    pairs = np.minimum.accumulate(pairs[:k])
    tau = -1.0 + 2.0 * float(np.sum(pairs))
    return max(tau, 1.0 / n)


def series_stderr(x) -> tuple[float, float, float]:
    """(mean, standard error, tau_int) of a correlated time series."""
    x = np.asarray(x, dtype=np.float64)
    tau = integrated_autocorr_time(x)
    var = float(np.var(x))
    se = math.sqrt(var * tau / len(x)) if var > 0 else 0.0
    return float(np.mean(x)), se, tau
