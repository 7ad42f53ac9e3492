"""Blockwise MCMC for the peNMIG model.

One iteration of the cyclic scan updates, in order,

1. the unselected coefficients ``theta`` (flat Gaussian prior),
2. ``alpha`` in blocks of at most ``block_size_alpha`` entries, with design
   ``X_alpha = X blockdiag(xi_1, ..., xi_p)``,
3. the mixture signs ``m``,
4. ``xi`` in blocks of at most ``block_size_xi`` coefficients, with design
   ``X_xi = X diag(alpha)`` expanded over coefficients,
5. the rescaling ``xi_j -> xi_j d_j / sum|xi_j|`` (``alpha_j`` inversely),
6. ``tau2``, ``gamma``, ``w`` and, for Gaussian responses, ``sigma2``.

Coefficient groups are drawn exactly from their Gaussian full conditional
for Gaussian responses. Otherwise a single penalized IWLS step builds a
Gaussian proposal that is accepted or rejected by Metropolis-Hastings.
Blocks flagged ``expand=False`` use plain NMIG: ``alpha_j`` is pinned to 1
and the variance ``gamma_j tau2_j`` attaches to the coefficients directly.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from .diagnostics import effective_sample_size, split_rhat
from .model import FIXED_PRIOR_VAR, ModelSpec, assemble_predictor

__all__ = [
    "ChainOutput",
    "PeNMIGState",
    "SamplerConfig",
    "SamplerError",
    "UpdateGroup",
    "gamma_inclusion_prob",
    "inclusion_probabilities",
    "init_state",
    "make_groups",
    "m_inclusion_prob",
    "rescale",
    "run_chain",
    "run_chains",
    "update_alpha_gaussian",
    "update_coef_piwls",
    "update_gamma",
    "update_m",
    "update_sigma2",
    "update_tau2",
    "update_w",
    "update_xi_gaussian",
]

logger = logging.getLogger(__name__)

INIT_PRIOR_VAR = 1e3
ACCEPT_BOUNDS = (0.1, 0.95)


class SamplerError(RuntimeError):
    """Raised when a linear system cannot be solved even after jitter."""


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass
class PeNMIGState:
    """Current values of all sampled quantities.

    ``exp_*`` hold the P-IWLS expansion points (the previous proposal means)
    and are only used for non-Gaussian responses.
    """

    alpha: np.ndarray
    xi: np.ndarray
    m: np.ndarray
    gamma: np.ndarray
    tau2: np.ndarray
    w: float
    sigma2: float
    theta_fixed: np.ndarray
    eta_cache: np.ndarray
    exp_alpha: Optional[np.ndarray] = None
    exp_xi: Optional[np.ndarray] = None
    exp_theta: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("alpha", "xi", "m", "gamma", "tau2", "theta_fixed", "eta_cache"):
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        if self.exp_alpha is None:
            self.exp_alpha = self.alpha.copy()
        if self.exp_xi is None:
            self.exp_xi = self.xi.copy()
        if self.exp_theta is None:
            self.exp_theta = self.theta_fixed.copy()

    def copy(self) -> "PeNMIGState":
        return PeNMIGState(
            **{
                k: (v.copy() if isinstance(v, np.ndarray) else v)
                for k, v in self.__dict__.items()
            }
        )


@dataclass(frozen=True)
class SamplerConfig:
    """Run-length, blocking and seeding options.

    ``iterations`` counts the sampling phase after ``burn_in``; every
    ``thin``-th post-burn-in iteration is saved.
    """

    n_chains: int = 8
    burn_in: int = 500
    iterations: int = 5000
    thin: int = 5
    block_size_alpha: int = 30
    block_size_xi: int = 30
    seed: int = 0
    rescale_every: int = 1
    ci_level: float = 0.8
    expansion: str = "previous_mean"
    linalg: str = "qr"
    sample_gamma: bool = True
    sample_w: bool = True
    sample_tau2: bool = True
    sample_sigma2: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        for name in (
            "n_chains",
            "iterations",
            "thin",
            "block_size_alpha",
            "block_size_xi",
            "rescale_every",
            "n_jobs",
        ):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if int(self.burn_in) != self.burn_in or self.burn_in < 0:
            raise ValueError("burn_in must be a non-negative integer")
        if self.thin > self.iterations:
            raise ValueError("thin exceeds the number of sampling iterations")
        if not 0 < self.ci_level < 1:
            raise ValueError("ci_level must lie in (0, 1)")
        if self.expansion not in ("previous_mean", "current"):
            raise ValueError("expansion must be 'previous_mean' or 'current'")
        if self.linalg not in ("qr", "cholesky"):
            raise ValueError("linalg must be 'qr' or 'cholesky'")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ChainOutput:
    """Saved draws and bookkeeping of one chain.

    ``samples`` maps parameter names to arrays with one row per saved
    iteration: ``alpha``, ``xi``, ``m``, ``gamma``, ``tau2``, ``w``,
    ``sigma2``, ``theta``, ``beta`` and ``pgamma`` (the full-conditional
    inclusion probabilities that feed the Rao-Blackwell estimate).
    """

    chain_id: int
    samples: dict
    pincl: np.ndarray
    acceptance: dict
    runtime: float = 0.0
    failed: bool = False
    error: str = ""
    warnings: list = field(default_factory=list)

    @property
    def n_saved(self) -> int:
        return len(self.samples.get("w", ()))


@dataclass(frozen=True)
class UpdateGroup:
    """A set of coefficients updated jointly.

    ``index`` holds block indices for ``kind="alpha"`` and coefficient
    (or fixed-effect) indices for ``"xi"`` and ``"theta"``.
    """

    kind: str
    index: tuple
    label: str


# ---------------------------------------------------------------------------
# Blocking
# ---------------------------------------------------------------------------


def _chunks(seq, size):
    return [seq[i : i + size] for i in range(0, len(seq), size)]


def make_groups(spec: ModelSpec, config: SamplerConfig) -> list:
    """Partition theta, alpha and xi into update groups.

    ``alpha`` is cut into consecutive chunks of expanded blocks. ``xi`` keeps
    whole blocks together, greedily filling groups up to ``block_size_xi``
    coefficients; larger blocks are split.
    """
    groups = [UpdateGroup("theta", tuple(range(spec.fixed_design.shape[1])), "theta")]
    expanded = [j for j in range(spec.p) if spec.expand[j]]
    for k, chunk in enumerate(_chunks(expanded, config.block_size_alpha)):
        groups.append(UpdateGroup("alpha", tuple(chunk), f"alpha[{k}]"))
    xi_groups, current = [], []
    for j in range(spec.p):
        idx = list(range(spec.starts[j], spec.starts[j + 1]))
        if len(idx) > config.block_size_xi:
            if current:
                xi_groups.append(current)
                current = []
            xi_groups.extend(_chunks(idx, config.block_size_xi))
            continue
        if len(current) + len(idx) > config.block_size_xi:
            xi_groups.append(current)
            current = []
        current = current + idx
    if current:
        xi_groups.append(current)
    for k, chunk in enumerate(xi_groups):
        groups.append(UpdateGroup("xi", tuple(chunk), f"xi[{k}]"))
    return groups


# ---------------------------------------------------------------------------
# Gaussian systems
# ---------------------------------------------------------------------------


@dataclass
class GaussianSystem:
    """``N(mean, Q^{-1})`` with ``Q = R'R`` (``R`` upper triangular)."""

    mean: np.ndarray
    R: np.ndarray

    def draw(self, rng) -> np.ndarray:
        eps = rng.standard_normal(self.mean.size)
        return self.mean + solve_triangular(self.R, eps, lower=False)

    def logpdf(self, x) -> float:
        r = self.R @ (np.asarray(x) - self.mean)
        k = self.mean.size
        return float(
            -0.5 * k * np.log(2 * np.pi)
            + np.sum(np.log(np.abs(np.diag(self.R))))
            - 0.5 * r @ r
        )

    @property
    def cov(self) -> np.ndarray:
        Rinv = solve_triangular(self.R, np.eye(self.mean.size), lower=False)
        return Rinv @ Rinv.T


def gaussian_system(C, weights, z, prior_mean, prior_prec, method="qr") -> GaussianSystem:
    """Posterior of ``c`` for ``z ~ N(C c, diag(1/weights))``, ``c ~ N(mu0, diag(1/prec))``.

    The ``"qr"`` path factors the augmented least-squares system
    ``[sqrt(W) C; diag(sqrt(prec))]``; ``"cholesky"`` factors
    ``Q = C'WC + diag(prec)``. A failing factorization is retried once
    with ``1e-10 trace(Q)`` added to the diagonal.
    """
    C = np.asarray(C, dtype=float)
    sw = np.sqrt(weights)
    sp = np.sqrt(prior_prec)
    k = C.shape[1]
    rhs_data = C.T @ (weights * z) + prior_prec * prior_mean
    jitter = 0.0
    for attempt in range(2):
        try:
            if method == "qr":
                A = np.vstack([C * sw[:, None], np.diag(np.sqrt(prior_prec + jitter))])
                R = np.linalg.qr(A, mode="r")
            else:
                Q = (C * weights[:, None]).T @ C + np.diag(prior_prec + jitter)
                R = np.linalg.cholesky(Q).T
            diag = np.abs(np.diag(R))
            if not np.all(np.isfinite(R)) or diag.min() <= 1e-14 * max(diag.max(), 1e-300):
                raise np.linalg.LinAlgError("singular system")
            # normalise signs so that diag(R) > 0 on both paths
            R = R * np.sign(np.diag(R))[:, None]
            y = solve_triangular(R, rhs_data, trans="T", lower=False)
            mean = solve_triangular(R, y, lower=False)
            return GaussianSystem(mean=mean, R=R)
        except np.linalg.LinAlgError:
            trace = float(np.sum(weights[:, None] * C**2) + np.sum(prior_prec))
            jitter = 1e-10 * trace
    raise SamplerError(f"precision matrix of a {k}-dim update is not positive definite")


# ---------------------------------------------------------------------------
# Group designs and priors
# ---------------------------------------------------------------------------


def _alpha_design(spec: ModelSpec, xi) -> np.ndarray:
    """``X blockdiag(xi_1, ..., xi_p)``: one column per block."""
    if spec.p == 0:
        return np.zeros((spec.n, 0))
    return np.add.reduceat(spec.X * xi, spec.starts[:-1], axis=1)


def _group_design(spec, state, group, Xa=None):
    idx = np.asarray(group.index, dtype=int)
    if group.kind == "theta":
        return spec.fixed_design[:, idx]
    if group.kind == "alpha":
        if Xa is None:
            Xa = _alpha_design(spec, state.xi)
        return Xa[:, idx]
    alpha_exp = np.repeat(state.alpha, spec.d)
    return spec.X[:, idx] * alpha_exp[idx]


def _group_prior(spec, state, group):
    """Prior mean and precision of a coefficient group."""
    idx = np.asarray(group.index, dtype=int)
    if group.kind == "theta":
        return np.zeros(idx.size), np.full(idx.size, 1.0 / FIXED_PRIOR_VAR)
    if group.kind == "alpha":
        return np.zeros(idx.size), 1.0 / (state.gamma[idx] * state.tau2[idx])
    blk = spec.block_of[idx]
    expanded = spec.expand[blk]
    mean = np.where(expanded, state.m[idx], 0.0)
    prec = np.where(expanded, 1.0, 1.0 / (state.gamma[blk] * state.tau2[blk]))
    return mean, prec


def _get(state, group):
    idx = np.asarray(group.index, dtype=int)
    if group.kind == "theta":
        return state.theta_fixed[idx], state.exp_theta[idx]
    if group.kind == "alpha":
        return state.alpha[idx], state.exp_alpha[idx]
    return state.xi[idx], state.exp_xi[idx]


def _set(state, group, values, expansion=None):
    idx = np.asarray(group.index, dtype=int)
    if group.kind == "theta":
        state.theta_fixed[idx] = values
        target = state.exp_theta
    elif group.kind == "alpha":
        state.alpha[idx] = values
        target = state.exp_alpha
    else:
        state.xi[idx] = values
        target = state.exp_xi
    if expansion is not None:
        target[idx] = expansion


def coef_conditional(spec, state, group, method="qr") -> GaussianSystem:
    """Exact Gaussian full conditional of a group (Gaussian responses)."""
    C = _group_design(spec, state, group)
    c, _ = _get(state, group)
    z = spec.y - (state.eta_cache - C @ c)
    mu0, prec = _group_prior(spec, state, group)
    return gaussian_system(C, np.full(spec.n, 1.0 / state.sigma2), z, mu0, prec, method)


def _gibbs_group(spec, state, group, rng, method="qr"):
    C = _group_design(spec, state, group)
    c, _ = _get(state, group)
    eta_rest = state.eta_cache - C @ c
    mu0, prec = _group_prior(spec, state, group)
    system = gaussian_system(
        C, np.full(spec.n, 1.0 / state.sigma2), spec.y - eta_rest, mu0, prec, method
    )
    new = system.draw(rng)
    _set(state, group, new, expansion=system.mean)
    state.eta_cache = eta_rest + C @ new
    return new


def update_alpha_gaussian(state, spec, rng, groups=None, method="qr") -> np.ndarray:
    """Gibbs update of all expanded ``alpha_j`` (Gaussian responses)."""
    if groups is None:
        groups = [g for g in make_groups(spec, SamplerConfig()) if g.kind == "alpha"]
    for g in groups:
        _gibbs_group(spec, state, g, rng, method)
    return state.alpha


def update_xi_gaussian(state, spec, rng, groups=None, method="qr") -> np.ndarray:
    """Gibbs update of ``xi`` (Gaussian responses)."""
    if groups is None:
        groups = [g for g in make_groups(spec, SamplerConfig()) if g.kind == "xi"]
    for g in groups:
        _gibbs_group(spec, state, g, rng, method)
    return state.xi


def _piwls_proposal(spec, C, eta_rest, point, mu0, prec, sigma2, method):
    eta_point = eta_rest + C @ point
    weights, resid = spec.family.working(spec.y, eta_point, sigma2)
    if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(resid))):
        return None
    weights = np.maximum(weights, 1e-12)
    z = C @ point + resid
    return gaussian_system(C, weights, z, mu0, prec, method)


def update_coef_piwls(
    state,
    spec,
    group,
    rng,
    expansion: str = "previous_mean",
    method: str = "qr",
    return_log_ratio: bool = False,
):
    """Metropolis-Hastings update of one group with a P-IWLS proposal.

    The proposal is ``N(m*, Q*^{-1})`` from one penalized IWLS step with
    working weights and working response evaluated at the expansion point:
    the previous proposal mean (``expansion="previous_mean"``) or the
    current value (``"current"``, in which case the reverse proposal is
    rebuilt at the candidate).

    Returns
    -------
    values : ndarray
    accepted : bool
    log_ratio : float, only if ``return_log_ratio``
    """
    C = _group_design(spec, state, group)
    c, point = _get(state, group)
    if expansion == "current":
        point = c
    eta_rest = state.eta_cache - C @ c
    mu0, prec = _group_prior(spec, state, group)
    sigma2 = state.sigma2 if spec.family.has_dispersion else 1.0
    fwd = _piwls_proposal(spec, C, eta_rest, point, mu0, prec, sigma2, method)
    if fwd is None and expansion != "current":
        # the stored point is unusable; this choice depends on the stored
        # point only, so falling back to the current value keeps the kernel
        # reversible
        logger.debug("expansion point of %s unusable, expanding at current value", group.label)
        expansion = "current"
        fwd = _piwls_proposal(spec, C, eta_rest, c, mu0, prec, sigma2, method)
    if fwd is None:
        logger.warning("W_PIWLS_WEIGHTS: non-finite working weights in %s", group.label)
        return (c, False, -np.inf) if return_log_ratio else (c, False)
    cand = fwd.draw(rng)
    eta_cand = eta_rest + C @ cand
    log_post_cur = _log_lik(spec, state.eta_cache, sigma2) - 0.5 * np.sum(prec * (c - mu0) ** 2)
    try:
        log_post_cand = _log_lik(spec, eta_cand, sigma2) - 0.5 * np.sum(
            prec * (cand - mu0) ** 2
        )
    except FloatingPointError:
        log_post_cand = -np.inf
    if expansion == "current":
        rev = _piwls_proposal(spec, C, eta_rest, cand, mu0, prec, sigma2, method)
        log_q_rev = rev.logpdf(c) if rev is not None else -np.inf
    else:
        log_q_rev = fwd.logpdf(c)
    log_ratio = log_post_cand - log_post_cur + log_q_rev - fwd.logpdf(cand)
    if not np.isfinite(log_ratio):
        log_ratio = -np.inf
    accepted = bool(np.log(rng.uniform()) < log_ratio)
    if accepted:
        _set(state, group, cand, expansion=fwd.mean)
        state.eta_cache = eta_cand
    else:
        _set(state, group, c, expansion=fwd.mean)
    values = cand if accepted else c
    if return_log_ratio:
        return values, accepted, float(log_ratio)
    return values, accepted


def _log_lik(spec, eta, sigma2):
    if not np.all(np.isfinite(eta)):
        return -np.inf
    with np.errstate(over="ignore"):
        ll = spec.family.pointwise_loglik(spec.y, eta, sigma2).sum()
    return float(ll) if np.isfinite(ll) else -np.inf


# ---------------------------------------------------------------------------
# Closed-form conditionals
# ---------------------------------------------------------------------------


def m_inclusion_prob(xi) -> np.ndarray:
    """``P(m_l = 1 | xi_l) = 1 / (1 + exp(-2 xi_l))``."""
    return expit(2.0 * np.asarray(xi, dtype=float))


def update_m(state, rng) -> np.ndarray:
    """Draw the signs ``m`` of the ``xi`` prior means."""
    prob = m_inclusion_prob(state.xi)
    state.m = np.where(rng.uniform(size=prob.size) < prob, 1.0, -1.0)
    return state.m


def _block_square(spec, state) -> tuple[np.ndarray, np.ndarray]:
    """Per-block sufficient statistic (alpha^2 or sum beta^2) and its dimension."""
    sq = state.alpha**2
    dim = np.ones(spec.p)
    if not np.all(spec.expand):
        nm = ~spec.expand
        sums = np.add.reduceat(state.xi**2, spec.starts[:-1]) if spec.p else np.zeros(0)
        sq = np.where(nm, sums, sq)
        dim = np.where(nm, spec.d, 1.0)
    return sq, dim


def tau2_conditional(spec, state, hyper=None) -> tuple[np.ndarray, np.ndarray]:
    """Shape and scale of the inverse-gamma full conditional of each ``tau2_j``."""
    hyper = spec.hyper if hyper is None else hyper
    sq, dim = _block_square(spec, state)
    return hyper.a_tau + dim / 2.0, hyper.b_tau + sq / (2.0 * state.gamma)


def update_tau2(state, spec, rng, hyper=None) -> np.ndarray:
    shape, scale = tau2_conditional(spec, state, hyper)
    state.tau2 = scale / rng.gamma(shape)
    return state.tau2


def gamma_log_odds(sq, tau2, w, v0, dim=1.0) -> np.ndarray:
    """``log P(gamma=1|.) - log P(gamma=v0|.)``.

    ``sq`` is ``alpha_j^2`` (peNMIG) or ``sum beta_j^2`` (plain NMIG, with
    ``dim = d_j``).
    """
    sq = np.asarray(sq, dtype=float)
    return (
        np.log(w) - np.log1p(-w)
        + 0.5 * np.asarray(dim) * np.log(v0)
        + (1.0 - v0) / (2.0 * v0) * sq / np.asarray(tau2)
    )


def gamma_inclusion_prob(sq, tau2, w, v0, dim=1.0) -> np.ndarray:
    """Full-conditional ``P(gamma_j = 1 | .)`` computed in log space."""
    return expit(gamma_log_odds(sq, tau2, w, v0, dim))


def update_gamma(state, spec, rng, hyper=None) -> np.ndarray:
    hyper = spec.hyper if hyper is None else hyper
    sq, dim = _block_square(spec, state)
    prob = gamma_inclusion_prob(sq, state.tau2, state.w, hyper.v0, dim)
    state.gamma = np.where(rng.uniform(size=prob.size) < prob, 1.0, hyper.v0)
    return state.gamma


def w_conditional(spec, state, hyper=None) -> tuple[float, float]:
    hyper = spec.hyper if hyper is None else hyper
    n_slab = int(np.sum(state.gamma == 1.0))
    return hyper.a_w + n_slab, hyper.b_w + state.gamma.size - n_slab


def update_w(state, spec, rng, hyper=None) -> float:
    a, b = w_conditional(spec, state, hyper)
    state.w = float(rng.beta(a, b))
    # keep the logit finite
    state.w = float(np.clip(state.w, 1e-300, 1 - 1e-16))
    return state.w


def sigma2_conditional(spec, state, hyper=None) -> tuple[float, float]:
    hyper = spec.hyper if hyper is None else hyper
    rss = float(np.sum((spec.y - state.eta_cache) ** 2))
    return hyper.a_sigma + spec.n / 2.0, hyper.b_sigma + rss / 2.0


def update_sigma2(state, spec, rng, hyper=None) -> float:
    shape, scale = sigma2_conditional(spec, state, hyper)
    state.sigma2 = float(scale / rng.gamma(shape))
    return state.sigma2


def rescale(alpha_j: float, xi_j):
    """Renormalize so that ``mean|xi_j| = 1`` while keeping ``alpha_j xi_j``.

    Returns the inputs unchanged (with a warning) if ``xi_j`` is all zero.
    """
    xi_j = np.asarray(xi_j, dtype=float)
    s = np.abs(xi_j).sum()
    if s == 0 or not np.isfinite(s):
        logger.warning("W_RESCALE_ZERO: all-zero xi block, rescaling skipped")
        return alpha_j, xi_j
    factor = xi_j.size / s
    return alpha_j / factor, xi_j * factor


def _rescale_state(spec, state):
    if spec.p == 0:
        return
    sums = np.add.reduceat(np.abs(state.xi), spec.starts[:-1])
    ok = spec.expand & (sums > 0) & np.isfinite(sums)
    factor = np.where(ok, spec.d / np.where(ok, sums, 1.0), 1.0)
    f_exp = np.repeat(factor, spec.d)
    state.xi = state.xi * f_exp
    state.alpha = state.alpha / factor
    state.exp_xi = state.exp_xi * f_exp
    state.exp_alpha = state.exp_alpha / factor


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _fisher_scoring(spec: ModelSpec, n_steps: int = 5):
    """Ridge-penalized Fisher scoring for all coefficients jointly."""
    D = np.hstack([spec.fixed_design, spec.X])
    k0 = spec.fixed_design.shape[1]
    prec = np.concatenate(
        [np.full(k0, 1.0 / FIXED_PRIOR_VAR), np.full(spec.q, 1.0 / INIT_PRIOR_VAR)]
    )
    coef = np.zeros(D.shape[1])
    ybar = np.mean(spec.y)
    intercept = np.flatnonzero(np.all(spec.fixed_design == spec.fixed_design[0], axis=0))[0]
    if spec.family.kind == "gaussian":
        start = ybar - np.mean(spec.offsets)
    else:
        start = float(spec.family.link(ybar)) - (
            np.mean(spec.offsets) if spec.family.kind == "poisson" else 0.0
        )
    coef[intercept] = start / spec.fixed_design[0, intercept]
    sigma2 = max(np.var(spec.y), 1e-8) if spec.family.has_dispersion else 1.0
    system = None
    for _ in range(n_steps):
        eta = spec.offsets + D @ coef
        weights, resid = spec.family.working(spec.y, eta, sigma2)
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(resid))):
            raise FloatingPointError("non-finite IWLS weights")
        weights = np.maximum(weights, 1e-10)
        z = D @ coef + resid
        system = gaussian_system(D, weights, z, np.zeros(D.shape[1]), prec)
        coef = system.mean
        if spec.family.has_dispersion:
            sigma2 = max(np.mean((spec.y - spec.offsets - D @ coef) ** 2), 1e-8)
    if not np.all(np.isfinite(coef)):
        raise FloatingPointError("Fisher scoring diverged")
    # recompute the curvature at the final estimate
    eta = spec.offsets + D @ coef
    weights, _ = spec.family.working(spec.y, eta, sigma2)
    weights = np.maximum(weights, 1e-10)
    system = gaussian_system(D, weights, np.zeros(spec.n), np.zeros(D.shape[1]), prec)
    return coef, system, sigma2


def init_state(
    spec: ModelSpec,
    config: SamplerConfig,
    chain_id: int,
    rng=None,
    init: Optional[dict] = None,
    fisher=None,
) -> tuple[PeNMIGState, list]:
    """Starting state for one chain.

    ``beta`` starts at 5 ridge-penalized Fisher-scoring steps plus
    Gaussian noise with the inverse curvature as covariance. Per block,
    ``gamma_j`` and ``tau2_j`` are drawn from their priors and ``beta_j`` is
    shrunk by ``sqrt(gamma_j)``. Then ``alpha_j = mean|beta_j|``,
    ``xi_j = beta_j / alpha_j``; an all-zero block gets ``alpha_j = 0`` and
    ``xi_j ~ N(m_j, I)``.

    ``init`` may override the drawn values of ``gamma``, ``tau2``, ``w``
    and ``sigma2`` (scalars are broadcast over blocks). The random stream
    is consumed identically with and without overrides.

    Returns
    -------
    state : PeNMIGState
    warnings : list of (code, message)
    """
    if rng is None:
        rng = _chain_rngs(config)[chain_id]
    init = {} if init is None else dict(init)
    unknown = set(init) - {"gamma", "tau2", "w", "sigma2"}
    if unknown:
        raise ValueError(f"cannot override {sorted(unknown)} at initialization")
    hyper = spec.hyper
    notes = []
    k0 = spec.fixed_design.shape[1]
    if fisher is None:
        try:
            fisher = _fisher_scoring(spec)
        except (FloatingPointError, SamplerError, np.linalg.LinAlgError) as exc:
            fisher = None
            notes.append(("W_INIT_FALLBACK", f"Fisher scoring failed ({exc}); starting at zero"))
    if fisher is not None:
        coef0, system, sigma2_0 = fisher
        coef = coef0 + solve_triangular(system.R, rng.standard_normal(coef0.size), lower=False)
    else:
        coef = 0.1 * rng.standard_normal(k0 + spec.q)
        sigma2_0 = float(np.var(spec.y)) if spec.family.has_dispersion else 1.0
    theta = coef[:k0]
    beta = coef[k0:]

    w = float(rng.beta(hyper.a_w, hyper.b_w))
    w = float(np.clip(init.get("w", w), 1e-12, 1 - 1e-12))
    gamma = np.where(rng.uniform(size=spec.p) < w, 1.0, hyper.v0)
    if "gamma" in init:
        gamma = np.broadcast_to(np.asarray(init["gamma"], dtype=float), (spec.p,))
        gamma = np.where(np.isclose(gamma, 1.0), 1.0, hyper.v0)
    tau2 = hyper.b_tau / rng.gamma(hyper.a_tau, size=spec.p)
    if "tau2" in init:
        tau2 = np.broadcast_to(np.asarray(init["tau2"], dtype=float), (spec.p,)).copy()
        if np.any(tau2 <= 0):
            raise ValueError("tau2 must be positive")
    beta = beta * np.repeat(np.sqrt(gamma), spec.d)

    m = np.where(rng.uniform(size=spec.q) < 0.5, 1.0, -1.0)
    alpha = np.ones(spec.p)
    xi = beta.copy()
    for j in range(spec.p):
        if not spec.expand[j]:
            continue
        sl = spec.block_slice(j)
        a = np.mean(np.abs(beta[sl]))
        if a > 0 and np.isfinite(a):
            alpha[j] = a
            xi[sl] = beta[sl] / a
        else:
            alpha[j] = 0.0
            xi[sl] = m[sl] + rng.standard_normal(spec.d[j])
    if spec.family.has_dispersion:
        sigma2 = float(init.get("sigma2", sigma2_0))
    else:
        sigma2 = 1.0
    state = PeNMIGState(
        alpha=alpha,
        xi=xi,
        m=m,
        gamma=gamma,
        tau2=tau2,
        w=w,
        sigma2=sigma2,
        theta_fixed=theta,
        eta_cache=np.zeros(spec.n),
    )
    state.eta_cache = assemble_predictor(spec, state)
    return state, notes


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def _chain_rngs(config: SamplerConfig) -> list:
    seqs = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    return [np.random.default_rng(s) for s in seqs]


def _iterate(spec, state, groups, config, rng, counts, it):
    gaussian = spec.family.kind == "gaussian"
    # theta and alpha groups
    for g in groups:
        if g.kind == "xi":
            continue
        if gaussian:
            _gibbs_group(spec, state, g, rng, config.linalg)
        else:
            _, acc = update_coef_piwls(state, spec, g, rng, config.expansion, config.linalg)
            counts[g.label][0] += acc
            counts[g.label][1] += 1
    if spec.q:
        update_m(state, rng)
    for g in groups:
        if g.kind != "xi":
            continue
        if gaussian:
            _gibbs_group(spec, state, g, rng, config.linalg)
        else:
            _, acc = update_coef_piwls(state, spec, g, rng, config.expansion, config.linalg)
            counts[g.label][0] += acc
            counts[g.label][1] += 1
    if spec.p and (it + 1) % config.rescale_every == 0:
        _rescale_state(spec, state)
    if spec.p:
        if config.sample_tau2:
            update_tau2(state, spec, rng)
        if config.sample_gamma:
            update_gamma(state, spec, rng)
        if config.sample_w:
            update_w(state, spec, rng)
    # refresh the cached predictor to stop round-off from accumulating
    state.eta_cache = assemble_predictor(spec, state)
    if spec.family.has_dispersion and config.sample_sigma2:
        update_sigma2(state, spec, rng)


def _pgamma(spec, state) -> np.ndarray:
    sq, dim = _block_square(spec, state)
    return gamma_inclusion_prob(sq, state.tau2, state.w, spec.hyper.v0, dim)


def run_chain(
    spec: ModelSpec,
    config: SamplerConfig,
    chain_id: int,
    init: Optional[dict] = None,
    fisher=None,
) -> ChainOutput:
    """Run one chain; failures are captured in the returned output."""
    rng = _chain_rngs(config)[chain_id]
    groups = make_groups(spec, config)
    counts = {g.label: [0, 0] for g in groups}
    n_save = config.iterations // config.thin
    k0 = spec.fixed_design.shape[1]
    store = {
        "alpha": np.empty((n_save, spec.p)),
        "xi": np.empty((n_save, spec.q)),
        "m": np.empty((n_save, spec.q)),
        "gamma": np.empty((n_save, spec.p)),
        "tau2": np.empty((n_save, spec.p)),
        "w": np.empty(n_save),
        "sigma2": np.empty(n_save),
        "theta": np.empty((n_save, k0)),
        "beta": np.empty((n_save, spec.q)),
        "pgamma": np.empty((n_save, spec.p)),
    }
    t0 = time.perf_counter()
    saved = 0
    failed, error = False, ""
    notes = []
    try:
        with np.errstate(over="ignore", under="ignore"):
            state, notes = init_state(spec, config, chain_id, rng, init, fisher)
            total = config.burn_in + config.iterations
            for it in range(total):
                _iterate(spec, state, groups, config, rng, counts, it)
                post = it - config.burn_in
                if post >= 0 and (post + 1) % config.thin == 0 and saved < n_save:
                    store["alpha"][saved] = state.alpha
                    store["xi"][saved] = state.xi
                    store["m"][saved] = state.m
                    store["gamma"][saved] = state.gamma
                    store["tau2"][saved] = state.tau2
                    store["w"][saved] = state.w
                    store["sigma2"][saved] = state.sigma2
                    store["theta"][saved] = state.theta_fixed
                    store["beta"][saved] = np.repeat(state.alpha, spec.d) * state.xi
                    store["pgamma"][saved] = _pgamma(spec, state)
                    saved += 1
    except (SamplerError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        failed, error = True, f"{type(exc).__name__}: {exc}"
        notes.append(("E_CHAIN_FAILED", f"chain {chain_id}: {error}"))
    samples = {k: v[:saved] for k, v in store.items()}
    if spec.family.kind == "gaussian":
        acceptance = {g.label: 1.0 for g in groups}
    else:
        acceptance = {
            label: (a / t if t else float("nan")) for label, (a, t) in counts.items()
        }
        for label, rate in acceptance.items():
            if np.isfinite(rate) and not ACCEPT_BOUNDS[0] <= rate <= ACCEPT_BOUNDS[1]:
                notes.append(
                    (
                        "W_ACCEPT_RATE",
                        f"chain {chain_id}: acceptance rate {rate:.3f} for {label} "
                        f"outside [{ACCEPT_BOUNDS[0]}, {ACCEPT_BOUNDS[1]}]",
                    )
                )
    out = ChainOutput(
        chain_id=chain_id,
        samples=samples,
        pincl=np.full(spec.p, np.nan),
        acceptance=acceptance,
        runtime=time.perf_counter() - t0,
        failed=failed,
        error=error,
        warnings=notes,
    )
    if saved:
        out.pincl = inclusion_probabilities(out)
    return out


def inclusion_probabilities(chain: ChainOutput) -> np.ndarray:
    """Rao-Blackwellized ``P(gamma_j = 1 | y)``: mean of saved full-conditional probabilities."""
    pg = np.asarray(chain.samples["pgamma"])
    if pg.shape[0] == 0:
        raise ValueError("chain has no saved draws")
    return pg.mean(axis=0)


def _run_one(args):
    spec, config, chain_id, init, fisher = args
    return run_chain(spec, config, chain_id, init, fisher)


def run_chains(
    spec: ModelSpec,
    config: SamplerConfig,
    init: Optional[Sequence] = None,
) -> tuple[list, dict]:
    """Run ``config.n_chains`` independent chains and pool them.

    Parameters
    ----------
    spec : ModelSpec
    config : SamplerConfig
    init : sequence of dict, optional
        Per-chain starting-value overrides passed to :func:`init_state`,
        e.g. ``[{"gamma": 1.0}, {"gamma": v0}]``.

    Returns
    -------
    chains : list of ChainOutput
    summary : dict
        Pooled inclusion probabilities, posterior means, credible
        intervals and convergence diagnostics (see :func:`summarize`).
    """
    if init is None or isinstance(init, dict):
        init = [init] * config.n_chains
    if len(init) != config.n_chains:
        raise ValueError("init needs one entry per chain")
    try:
        fisher = _fisher_scoring(spec)
    except (FloatingPointError, SamplerError, np.linalg.LinAlgError):
        fisher = None
    jobs = [(spec, config, c, init[c], fisher) for c in range(config.n_chains)]
    if config.n_jobs > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
            chains = list(pool.map(_run_one, jobs))
    else:
        chains = [_run_one(j) for j in jobs]
    return chains, summarize(spec, config, chains)


def summarize(spec: ModelSpec, config: SamplerConfig, chains: Sequence[ChainOutput]) -> dict:
    """Pool the successful chains into a JSON-friendly summary."""
    ok = [c for c in chains if not c.failed and c.n_saved > 0]
    summary = {
        "labels": spec.labels,
        "fixed_labels": list(spec.fixed_labels),
        "dims": [int(d) for d in spec.d],
        "n_chains": len(chains),
        "n_chains_ok": len(ok),
        "failed_chains": [c.chain_id for c in chains if c.failed],
        "warnings": [list(wn) for c in chains for wn in c.warnings],
    }
    if not ok:
        return summary
    lo_q = (1 - config.ci_level) / 2
    pool = {k: np.concatenate([c.samples[k] for c in ok]) for k in ok[0].samples}
    summary["pincl"] = np.mean([c.pincl for c in ok], axis=0).tolist()
    summary["pincl_per_chain"] = [c.pincl.tolist() for c in ok]
    summary["gamma_fraction"] = np.mean(pool["gamma"] == 1.0, axis=0).tolist()
    summary["beta_mean"] = pool["beta"].mean(axis=0).tolist()
    summary["beta_ci"] = np.quantile(pool["beta"], [lo_q, 1 - lo_q], axis=0).T.tolist()
    summary["theta_mean"] = pool["theta"].mean(axis=0).tolist()
    summary["theta_ci"] = np.quantile(pool["theta"], [lo_q, 1 - lo_q], axis=0).T.tolist()
    summary["tau2_mean"] = pool["tau2"].mean(axis=0).tolist()
    summary["w_mean"] = float(pool["w"].mean())
    if spec.family.has_dispersion:
        summary["sigma2_mean"] = float(pool["sigma2"].mean())
    summary["acceptance"] = {
        label: float(np.mean([c.acceptance[label] for c in ok])) for label in ok[0].acceptance
    }
    summary["diagnostics"] = chain_diagnostics(spec, ok)
    summary["ci_level"] = config.ci_level
    return summary


def block_effect_norms(spec: ModelSpec, beta_draws) -> np.ndarray:
    """Root-mean-square fitted contribution ``||X_j beta_j|| / sqrt(n)`` per draw and block."""
    beta_draws = np.atleast_2d(beta_draws)
    out = np.empty((beta_draws.shape[0], spec.p))
    for j in range(spec.p):
        sl = spec.block_slice(j)
        f = beta_draws[:, sl] @ spec.X[:, sl].T
        out[:, j] = np.sqrt(np.mean(f**2, axis=1))
    return out


def chain_diagnostics(spec: ModelSpec, chains: Sequence[ChainOutput]) -> dict:
    """ESS and split-R-hat for scalar summaries shared by all chains."""
    n = min(c.n_saved for c in chains)
    if n < 4:
        return {}
    series = {}
    for k, lab in enumerate(spec.fixed_labels):
        series[f"theta[{lab}]"] = np.stack([c.samples["theta"][:n, k] for c in chains])
    series["w"] = np.stack([c.samples["w"][:n] for c in chains])
    if spec.family.has_dispersion:
        series["sigma2"] = np.stack([c.samples["sigma2"][:n] for c in chains])
    norms = [block_effect_norms(spec, c.samples["beta"][:n]) for c in chains]
    for j, lab in enumerate(spec.labels):
        series[f"effect[{lab}]"] = np.stack([nm[:, j] for nm in norms])
        series[f"pgamma[{lab}]"] = np.stack([c.samples["pgamma"][:n, j] for c in chains])
    out = {}
    for name, x in series.items():
        out[name] = {
            "ess": float(effective_sample_size(x)),
            "rhat": float(split_rhat(x)),
        }
    return out
