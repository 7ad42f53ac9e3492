"""Shrinkage geometry of the NMIG and peNMIG priors.

Marginal prior densities of a single coefficient, log-density contour
grids for two coefficients, and the indicator transition probabilities of
a plain NMIG block sampler.

Integrating ``tau2`` out of ``alpha ~ N(0, gamma tau2)`` gives a scaled
t-distribution with ``2 a_tau`` degrees of freedom, so for fixed ``w``

    p(alpha) = (1 - w) t(alpha; 2 a_tau, s0) + w t(alpha; 2 a_tau, s1),
    s0 = sqrt(v0 b_tau / a_tau),  s1 = sqrt(b_tau / a_tau).

The mixture is linear in ``w``; integrating over ``w ~ Beta(a_w, b_w)``
replaces ``w`` by its mean. With ``xi ~ 0.5 N(1, 1) + 0.5 N(-1, 1)`` the
peNMIG marginal of ``beta = alpha xi`` is the product-distribution integral

    p(beta) = 2 int_0^inf p_alpha(a) p_xi(beta / a) / a da
            = 2 int p_alpha(e^u) p_xi(beta e^-u) du.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate, stats
from scipy.special import expit, gammaln

from .model import Hyperparams

__all__ = [
    "CONTOUR_MODES",
    "MarginalPriorGrid",
    "QuadratureError",
    "default_contour_grid",
    "equilibrium_sum_sq",
    "log_prior_contours",
    "nmig_marginal_density",
    "nmig_scales",
    "nmig_transition_curve",
    "penmig_cdf",
    "penmig_density",
    "penmig_marginal_density",
    "sample_penmig_prior",
]

CONTOUR_MODES = ("nmig_separate", "penmig_separate", "penmig_same_block")
QUAD_EPSREL = 1e-6


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""


def nmig_scales(hyper: Hyperparams) -> tuple[float, float, float]:
    """Degrees of freedom and spike/slab scales ``(df, s0, s1)``."""
    df = 2.0 * hyper.a_tau
    s1 = math.sqrt(hyper.b_tau / hyper.a_tau)
    s0 = math.sqrt(hyper.v0) * s1
    return df, s0, s1


def _mean_w(hyper: Hyperparams) -> float:
    return hyper.a_w / (hyper.a_w + hyper.b_w)


def nmig_marginal_density(alpha, hyper: Hyperparams, w: Optional[float] = None):
    """Scaled-t mixture density of ``alpha`` with ``tau2`` integrated out.

    ``w=None`` integrates ``w`` over its Beta prior.
    """
    df, s0, s1 = nmig_scales(hyper)
    w = _mean_w(hyper) if w is None else w
    if not 0 <= w <= 1:
        raise ValueError("w must lie in [0, 1]")
    alpha = np.asarray(alpha, dtype=float)
    return (1 - w) * stats.t.pdf(alpha, df, scale=s0) + w * stats.t.pdf(alpha, df, scale=s1)


class _ScalarKernel:
    """Fast scalar evaluation of ``p_alpha`` and ``p_xi`` for quadrature."""

    def __init__(self, hyper: Hyperparams, w: Optional[float]):
        df, s0, s1 = nmig_scales(hyper)
        w = _mean_w(hyper) if w is None else w
        self.df = df
        self.h = -(df + 1) / 2
        c = gammaln((df + 1) / 2) - gammaln(df / 2) - 0.5 * math.log(df * math.pi)
        self.c0 = (1 - w) * math.exp(c) / s0
        self.c1 = w * math.exp(c) / s1
        self.inv_df_s0sq = 1.0 / (df * s0 * s0)
        self.inv_df_s1sq = 1.0 / (df * s1 * s1)
        self.log_s0 = math.log(s0)
        self.log_s1 = math.log(s1)

    def p_alpha(self, a):
        a2 = a * a
        return self.c0 * (1 + a2 * self.inv_df_s0sq) ** self.h + self.c1 * (
            1 + a2 * self.inv_df_s1sq
        ) ** self.h

    @staticmethod
    def p_xi(x):
        return 0.5 * (math.exp(-0.5 * (x - 1) ** 2) + math.exp(-0.5 * (x + 1) ** 2)) / math.sqrt(
            2 * math.pi
        )


def _u_limits(kern: _ScalarKernel, b: float):
    # below lo: p_xi(b e^-u) is a far Gaussian tail; above hi: t tail ~ e^{-(df+1) u}
    lo = min(math.log(b) - math.log(40.0), kern.log_s0 - 40.0 / kern.df)
    hi = kern.log_s1 + 60.0 / (kern.df + 1) + 5.0
    return lo, hi


def penmig_density(beta: float, hyper: Hyperparams, w: Optional[float] = None) -> float:
    """peNMIG marginal density of a scalar ``beta != 0``."""
    b = abs(float(beta))
    if b == 0:
        return math.inf
    kern = _ScalarKernel(hyper, w)
    return _penmig_density(kern, b)


def _penmig_density(kern: _ScalarKernel, b: float) -> float:
    lo, hi = _u_limits(kern, b)

    def f(u):
        eu = math.exp(u)
        return kern.p_alpha(eu) * kern.p_xi(b / eu)

    pts = sorted(p for p in (kern.log_s0, kern.log_s1, math.log(b)) if lo < p < hi)
    val, err, info = integrate.quad(
        f, lo, hi, points=pts, epsrel=QUAD_EPSREL, epsabs=0.0, limit=200, full_output=1
    )[:3]
    if not np.isfinite(val) or err > max(10 * QUAD_EPSREL * abs(val), 1e-300):
        raise QuadratureError(
            f"peNMIG density at beta={b}: value {val}, error estimate {err}, "
            f"{info.get('neval', '?')} evaluations"
        )
    return 2.0 * val


@dataclass
class MarginalPriorGrid:
    """Marginal prior density on a grid, with its numerical total mass."""

    beta_grid: np.ndarray
    log_density: np.ndarray
    normalization: float

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)


def penmig_cdf(x, hyper: Hyperparams, w: Optional[float] = None):
    """``P(beta <= x)`` by integrating :func:`penmig_density` from 0."""
    kern = _ScalarKernel(hyper, w)
    xs = np.asarray(x, dtype=float)
    absvals, inverse = np.unique(np.abs(xs.ravel()), return_inverse=True)
    mass = np.cumsum([_mass(kern, a, b) for a, b in zip(np.r_[0.0, absvals[:-1]], absvals)])
    out = 0.5 + np.sign(xs.ravel()) * mass[inverse]
    return out.reshape(xs.shape) if xs.ndim else float(out[0])


def _mass(kern: _ScalarKernel, lower: float, upper: float) -> float:
    """``int_lower^upper p(beta) d beta`` for ``0 <= lower <= upper``."""
    if upper <= lower:
        return 0.0
    s0, s1 = math.exp(kern.log_s0), math.exp(kern.log_s1)
    inner = [e for e in (1e-6, 1e-3, s0, 1.0, s1, 3 * s1, 10 * s1) if lower < e < upper]
    edges = [lower] + inner + [upper]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(
            lambda t: _penmig_density(kern, t), a, b, epsrel=1e-8, epsabs=1e-12, limit=200
        )
        total += val
    return total


def penmig_marginal_density(
    beta_grid, hyper: Hyperparams, w: Optional[float] = None, normalize_range: float = 50.0
) -> MarginalPriorGrid:
    """Evaluate the peNMIG marginal prior on ``beta_grid`` (which must exclude 0).

    ``normalization`` is the numerically integrated mass over
    ``[-normalize_range, normalize_range]``.
    """
    grid = np.asarray(beta_grid, dtype=float)
    if np.any(grid == 0):
        raise ValueError("beta_grid must exclude 0, where the density is unbounded")
    kern = _ScalarKernel(hyper, w)
    absvals, inverse = np.unique(np.abs(grid), return_inverse=True)
    dens = np.array([_penmig_density(kern, b) for b in absvals])
    log_density = np.log(dens)[inverse].reshape(grid.shape)
    normalization = 2.0 * _mass(kern, 0.0, normalize_range)
    return MarginalPriorGrid(beta_grid=grid, log_density=log_density, normalization=normalization)


def sample_penmig_prior(size: int, hyper: Hyperparams, rng=None) -> np.ndarray:
    """Draw ``beta = alpha xi`` by simulating the full prior hierarchy."""
    rng = np.random.default_rng(rng)
    w = rng.beta(hyper.a_w, hyper.b_w, size)
    gamma = np.where(rng.uniform(size=size) < w, 1.0, hyper.v0)
    tau2 = hyper.b_tau / rng.gamma(hyper.a_tau, size=size)
    alpha = rng.standard_normal(size) * np.sqrt(gamma * tau2)
    m = np.where(rng.uniform(size=size) < 0.5, 1.0, -1.0)
    xi = m + rng.standard_normal(size)
    return alpha * xi


# ---------------------------------------------------------------------------
# Two-dimensional contours
# ---------------------------------------------------------------------------


def default_contour_grid() -> np.ndarray:
    return np.linspace(-3.0, 3.0, 301)


def _p_xi_vec(x):
    return 0.5 * (np.exp(-0.5 * (x - 1) ** 2) + np.exp(-0.5 * (x + 1) ** 2)) / np.sqrt(2 * np.pi)


def _same_block_density(abs1, abs2, hyper, w, du=0.004):
    """``2 int p_alpha(e^u) p_xi(b1 e^-u) p_xi(b2 e^-u) e^-u du`` on a fixed u-grid."""
    df, s0, s1 = nmig_scales(hyper)
    positive = np.concatenate([abs1[abs1 > 0], abs2[abs2 > 0]])
    smallest = positive.min() if positive.size else 1.0
    lo = min(np.log(smallest) - np.log(40.0), np.log(s0) - 40.0 / df)
    hi = np.log(s1) + 60.0 / (df + 1) + 5.0
    u = np.arange(lo, hi + du, du)
    eu = np.exp(u)
    pa = nmig_marginal_density(eu, hyper, w) / eu  # includes the Jacobian a^-2 da = e^-u du
    weights = np.full(u.size, du)
    weights[[0, -1]] *= 0.5
    kern = 2.0 * pa * weights
    A = _p_xi_vec(abs1[:, None] / eu[None, :])  # (n1, U)
    B = _p_xi_vec(abs2[:, None] / eu[None, :])  # (n2, U)
    return (A * kern) @ B.T


def log_prior_contours(
    grid_2d=None,
    hyper: Optional[Hyperparams] = None,
    mode: str = "penmig_same_block",
    w: Optional[float] = None,
) -> np.ndarray:
    """``log p(beta_1, beta_2)`` on a rectangular grid.

    Parameters
    ----------
    grid_2d : ndarray or (ndarray, ndarray), optional
        Axis values for ``beta_1`` and ``beta_2``; a single vector is used
        for both. Defaults to 301 points on ``[-3, 3]``.
    hyper : Hyperparams
    mode : {"nmig_separate", "penmig_separate", "penmig_same_block"}
        Two independent NMIG coefficients, two independent peNMIG
        coefficients, or two coefficients of the same peNMIG block sharing
        ``alpha``.
    w : float, optional
        Fixed mixture weight; defaults to the prior mean of ``w``.

    Returns
    -------
    ndarray, shape (len(b1), len(b2))
        Entry ``[i, k]`` is ``log p(b1[i], b2[k])``. For peNMIG modes the
        density is unbounded where a coordinate (separate) or both
        coordinates (same block) are zero; those entries are ``+inf``.
    """
    hyper = Hyperparams() if hyper is None else hyper
    if mode not in CONTOUR_MODES:
        raise ValueError(f"mode must be one of {CONTOUR_MODES}")
    if grid_2d is None:
        grid_2d = default_contour_grid()
    if isinstance(grid_2d, (tuple, list)) and len(grid_2d) == 2 and np.ndim(grid_2d[0]) == 1:
        b1, b2 = (np.asarray(g, dtype=float) for g in grid_2d)
    else:
        b1 = b2 = np.asarray(grid_2d, dtype=float)
    if not (np.all(np.isfinite(b1)) and np.all(np.isfinite(b2))):
        raise ValueError("grid must be finite")
    # work on |beta|: every mode is symmetric under sign flips
    u1, inv1 = np.unique(np.abs(b1), return_inverse=True)
    u2, inv2 = np.unique(np.abs(b2), return_inverse=True)
    if mode == "nmig_separate":
        l1 = np.log(nmig_marginal_density(u1, hyper, w))
        l2 = np.log(nmig_marginal_density(u2, hyper, w))
        out = l1[:, None] + l2[None, :]
    elif mode == "penmig_separate":
        kern = _ScalarKernel(hyper, w)
        cache = {}

        def logp(v):
            if v not in cache:
                cache[v] = math.inf if v == 0 else math.log(_penmig_density(kern, v))
            return cache[v]

        l1 = np.array([logp(v) for v in u1])
        l2 = np.array([logp(v) for v in u2])
        out = l1[:, None] + l2[None, :]
    else:
        with np.errstate(divide="ignore"):
            out = np.log(_same_block_density(u1, u2, hyper, w))
        zero = (u1[:, None] == 0) & (u2[None, :] == 0)
        out[zero] = np.inf
    return out[np.ix_(inv1, inv2)]


# ---------------------------------------------------------------------------
# Indicator transitions of the plain NMIG block sampler
# ---------------------------------------------------------------------------


def equilibrium_sum_sq(d: int, tau2: float, v0: float) -> float:
    """``sum beta^2`` at which ``P(gamma = 1 | .) = 0.5`` for ``w = 0.5``."""
    return -d * v0 / (1 - v0) * math.log(v0) * tau2


def nmig_transition_curve(
    d: int,
    gamma0: float,
    tau2_quantile: float,
    ratio_grid=None,
    hyper: Optional[Hyperparams] = None,
    tau2_0: Optional[float] = None,
    w: float = 0.5,
) -> np.ndarray:
    """``P(gamma_(1) = 1)`` after one NMIG update from the equilibrium state.

    Iteration (0) has ``P(gamma = 1 | .) = 0.5`` with ``tau2_(0) = tau2_0``
    (default: prior mean ``b_tau / (a_tau - 1)``) and ``sum beta_(0)^2`` from
    :func:`equilibrium_sum_sq`. ``tau2_(1)`` is set to the given quantile of
    its full conditional ``IG(a_tau + d/2, b_tau + sum beta_(0)^2 / (2 gamma0))``
    and the inclusion probability is evaluated at
    ``sum beta_(1)^2 = ratio * sum beta_(0)^2`` for every ratio.
    """
    hyper = Hyperparams(a_tau=5.0, b_tau=50.0) if hyper is None else hyper
    if d < 1:
        raise ValueError("d must be a positive integer")
    if not (np.isclose(gamma0, 1.0) or np.isclose(gamma0, hyper.v0)):
        raise ValueError("gamma0 must be 1 or v0")
    if not 0 < tau2_quantile < 1:
        raise ValueError("tau2_quantile must lie in (0, 1)")
    if ratio_grid is None:
        ratio_grid = np.linspace(0.0, 3.0, 301)
    ratio = np.asarray(ratio_grid, dtype=float)
    if tau2_0 is None:
        if hyper.a_tau <= 1:
            raise ValueError("prior mean of tau2 undefined for a_tau <= 1; pass tau2_0")
        tau2_0 = hyper.b_tau / (hyper.a_tau - 1)
    v0 = hyper.v0
    ss0 = equilibrium_sum_sq(d, tau2_0, v0)
    shape = hyper.a_tau + d / 2.0
    scale = hyper.b_tau + ss0 / (2.0 * gamma0)
    tau2_1 = stats.invgamma.ppf(tau2_quantile, shape, scale=scale)
    log_odds = (
        math.log(w) - math.log1p(-w)
        + 0.5 * d * math.log(v0)
        + (1 - v0) / (2 * v0) * ratio * ss0 / tau2_1
    )
    return expit(log_odds)
