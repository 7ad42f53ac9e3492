"""Convergence diagnostics for multi-chain MCMC output.

Both functions take an array of shape ``(n_chains, n_draws)``.
"""

from __future__ import annotations

import numpy as np

__all__ = ["autocorrelation", "effective_sample_size", "split_rhat"]


def autocorrelation(x) -> np.ndarray:
    """Normalized autocorrelation of a 1-d series via zero-padded FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    if acov[0] <= 0:
        return np.r_[1.0, np.zeros(n - 1)]
    return acov / acov[0]


def _split(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    half = x.shape[1] // 2
    return np.vstack([x[:, :half], x[:, x.shape[1] - half :]])


def split_rhat(x) -> float:
    """Potential scale reduction factor on split chains.

    Returns ``nan`` when there are fewer than 4 draws and ``1`` when every
    chain is constant at the same value.
    """
    chains = _split(x)
    m, n = chains.shape
    if n < 2:
        return float("nan")
    means = chains.mean(axis=1)
    within = chains.var(axis=1, ddof=1).mean()
    between = n * means.var(ddof=1)
    if within == 0:
        return 1.0 if between == 0 else float("inf")
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within))


def effective_sample_size(x) -> float:
    """Multi-chain effective sample size.

    Autocorrelations are combined across chains with the between/within
    variance estimate and truncated with Geyer's initial monotone positive
    sequence.
    """
    chains = np.atleast_2d(np.asarray(x, dtype=float))
    m, n = chains.shape
    if n < 4:
        return float("nan")
    acov = np.stack([autocorrelation(c) * c.var() for c in chains])
    chain_var = chains.var(axis=1, ddof=1)
    within = chain_var.mean()
    var_plus = within * (n - 1) / n
    if m > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return float(m * n)
    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer: sum consecutive pairs while positive, enforce monotonicity
    pairs = rho[: 2 * (n // 2)].reshape(-1, 2).sum(axis=1)
    positive = np.flatnonzero(pairs <= 0)
    k = positive[0] if positive.size else pairs.size
    pairs = np.minimum.accumulate(pairs[:k]) if k else pairs[:0]
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n + 10))
    return float(m * n / tau)
