"""Simulation laboratory: data-generating processes, metrics and the
piecewise-exponential (PEM) expansion of survival data.

Covariates are indexed from 1 (``x1, x2, ...``). The four test functions

    f1(x) = x
    f2(x) = x + (2x - 2)^2 / 5.5
    f3(x) = -x + pi sin(pi x)
    f4(x) = 0.5 x + 15 phi(2 (x - 0.2)) - phi(x + 0.4)

all have a linear component; ``f2``-``f4`` also have a non-linear one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .model import Family, Hyperparams, ModelError, build_model
from .sampler import SamplerConfig, run_chains
from .terms import TermSpec

__all__ = [
    "PemDataset",
    "ScenarioSpec",
    "ar1_covariates",
    "complexity_metrics",
    "concurvity_g",
    "dgp_f",
    "fit_scenario",
    "generate_scenario",
    "pem_expand",
    "pem_loglik_direct",
    "pem_offsets",
    "predictive_deviance",
    "term_truth",
]

N_TEST = 5000


def dgp_f(k: int, x):
    """Test function ``f_k`` for ``k`` in 1..4."""
    x = np.asarray(x, dtype=float)
    phi = stats.norm.pdf
    if k == 1:
        return x
    if k == 2:
        return x + (2 * x - 2) ** 2 / 5.5
    if k == 3:
        return -x + np.pi * np.sin(np.pi * x)
    if k == 4:
        return 0.5 * x + 15 * phi(2 * (x - 0.2)) - phi(x + 0.4)
    raise ValueError(f"no test function f{k}")


def concurvity_g(x):
    """``2 Phi(x; -1, 0.4^2) + 2 Phi(x; 1, 0.3^2) - 4 phi(x) - 2``."""
    x = np.asarray(x, dtype=float)
    return (
        2 * stats.norm.cdf(x, -1, 0.4)
        + 2 * stats.norm.cdf(x, 1, 0.3)
        - 4 * stats.norm.pdf(x)
        - 2
    )


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation setting.

    Parameters
    ----------
    family : str or Family
        ``"gaussian"`` or ``"poisson"``.
    sparsity : {"low", "high"}
        ``"low"``: 16 covariates, 12 active with weights 1, 1.5, 2;
        ``"high"``: 20 covariates, 4 active. Ignored with ``concurvity``.
    correlation : {"iid_uniform", "ar1"}
    rho : float
        AR(1) correlation between neighbouring covariates.
    n : int
        Training sample size; the test set has 5000 rows.
    snr : float
        Gaussian signal-to-noise ratio ``Var(eta) / sigma2``.
    overdispersion : bool
        Poisson only: multiply the mean by ``s_i ~ U[0.66, 1.5]``.
    concurvity : (scenario, c), optional
        Scenario 1: ``x4 = c g(x3) + (1-c) u``; 2: ``x5 = c g(x4) + (1-c) u``;
        3: ``x4 = c g(x5) + (1-c) u``. Uses 10 covariates, 4 active.
    replicate_seed : int
    """

    family: str = "gaussian"
    sparsity: str = "high"
    correlation: str = "iid_uniform"
    rho: float = 0.7
    n: int = 200
    snr: float = 5.0
    overdispersion: bool = True
    concurvity: Optional[tuple] = None
    replicate_seed: int = 0
    n_test: int = N_TEST

    def __post_init__(self):
        fam = Family(self.family) if isinstance(self.family, str) else self.family
        if fam.kind == "binomial_logit":
            raise ValueError("scenarios are defined for gaussian and poisson responses")
        object.__setattr__(self, "family", fam.kind)
        if self.sparsity not in ("low", "high"):
            raise ValueError("sparsity must be 'low' or 'high'")
        if self.correlation not in ("iid_uniform", "ar1"):
            raise ValueError("correlation must be 'iid_uniform' or 'ar1'")
        if not -1 < self.rho < 1:
            raise ValueError("rho must lie in (-1, 1)")
        if self.n < 2 or self.n_test < 1:
            raise ValueError("n must be at least 2")
        if not self.snr > 0:
            raise ValueError("snr must be positive")
        if self.concurvity is not None:
            scen, c = self.concurvity
            if scen not in (1, 2, 3) or not 0 <= c <= 1:
                raise ValueError("concurvity must be (1|2|3, c in [0, 1])")
            object.__setattr__(self, "concurvity", (int(scen), float(c)))

    @property
    def n_covariates(self) -> int:
        if self.concurvity is not None:
            return 10
        return 16 if self.sparsity == "low" else 20

    def weights(self) -> dict:
        """Active covariate index -> (function index, weight)."""
        if self.concurvity is None and self.sparsity == "low":
            out = {}
            for block, wt in enumerate((1.0, 1.5, 2.0)):
                for k in range(1, 5):
                    out[4 * block + k] = (k, wt)
            return out
        return {k: (k, 1.0) for k in range(1, 5)}

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def ar1_covariates(n: int, p: int, rho: float, rng) -> np.ndarray:
    """Covariates that follow a stationary Gaussian AR(1) across columns,
    mapped through ``4 (Phi(z) - 0.5)`` to ``U[-2, 2]`` marginals."""
    z = np.empty((n, p))
    z[:, 0] = rng.standard_normal(n)
    scale = math.sqrt(1 - rho**2)
    for j in range(1, p):
        z[:, j] = rho * z[:, j - 1] + scale * rng.standard_normal(n)
    return 4.0 * (stats.norm.cdf(z) - 0.5)


def _covariates(spec: ScenarioSpec, n: int, rng) -> np.ndarray:
    p = spec.n_covariates
    if spec.concurvity is None and spec.correlation == "ar1":
        return ar1_covariates(n, p, spec.rho, rng)
    X = rng.uniform(-2.0, 2.0, size=(n, p))
    if spec.concurvity is not None:
        scen, c = spec.concurvity
        u = rng.standard_normal(n)
        target, source = {1: (4, 3), 2: (5, 4), 3: (4, 5)}[scen]
        X[:, target - 1] = c * concurvity_g(X[:, source - 1]) + (1 - c) * u
    return X


def _eta(spec: ScenarioSpec, X: np.ndarray) -> np.ndarray:
    eta = np.zeros(X.shape[0])
    for j, (k, wt) in spec.weights().items():
        eta += wt * dgp_f(k, X[:, j - 1])
    return eta


def term_truth(spec: ScenarioSpec) -> dict:
    """True inclusion status of the ``x<j>.lin`` and ``x<j>.sm`` terms."""
    truth = {}
    active = spec.weights()
    for j in range(1, spec.n_covariates + 1):
        k = active.get(j, (0, 0.0))[0]
        truth[f"x{j}.lin"] = k > 0
        truth[f"x{j}.sm"] = k > 1
    return truth


def generate_scenario(spec: ScenarioSpec) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Training and test data for one replicate.

    Both frames hold ``x1 ... xp``, the true predictor ``eta`` and the
    response ``y``; ``train.attrs`` records ``sigma2`` (Gaussian noise
    variance, ``Var(eta_train) / snr``) and the term truth.
    """
    rng = np.random.default_rng(spec.replicate_seed)
    X_train = _covariates(spec, spec.n, rng)
    X_test = _covariates(spec, spec.n_test, rng)
    eta_train, eta_test = _eta(spec, X_train), _eta(spec, X_test)
    frames = []
    sigma2 = float(np.var(eta_train) / spec.snr) if spec.family == "gaussian" else None
    for X, eta in ((X_train, eta_train), (X_test, eta_test)):
        if spec.family == "gaussian":
            y = eta + math.sqrt(sigma2) * rng.standard_normal(eta.size)
        else:
            s = rng.uniform(0.66, 1.5, eta.size) if spec.overdispersion else np.ones(eta.size)
            y = rng.poisson(s * np.exp(eta)).astype(float)
        df = pd.DataFrame(X, columns=[f"x{j}" for j in range(1, X.shape[1] + 1)])
        df["eta"] = eta
        df["y"] = y
        frames.append(df)
    train, test = frames
    train.attrs["sigma2"] = sigma2
    train.attrs["truth"] = term_truth(spec)
    train.attrs["scenario"] = spec.as_dict()
    return train, test


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def complexity_metrics(selected, truth) -> dict:
    """Accuracy, sensitivity and specificity of a term selection."""
    sel = np.asarray(selected, dtype=bool).ravel()
    tru = np.asarray(truth, dtype=bool).ravel()
    if sel.shape != tru.shape:
        raise ValueError("selected and truth differ in length")
    tp = int(np.sum(sel & tru))
    tn = int(np.sum(~sel & ~tru))
    pos, neg = int(tru.sum()), int((~tru).sum())
    return {
        "accuracy": (tp + tn) / sel.size if sel.size else float("nan"),
        "sensitivity": tp / pos if pos else float("nan"),
        "specificity": tn / neg if neg else float("nan"),
    }


def predictive_deviance(
    family,
    y_test,
    eta_hat,
    sigma2: float = 1.0,
    offsets=None,
    log_baseline=None,
) -> float:
    """Predictive deviance on test data.

    For ``"gaussian"``, ``"binomial"`` and ``"poisson"`` this is twice the
    average negative log-likelihood, ``-2/n sum log L(y_i, eta_i)``. For
    ``"pem"`` it is the summed piecewise-exponential deviance
    ``-2 sum [delta (log lambda_j + eta) - o lambda_j exp(eta)]`` over the
    pseudo-observations, with ``y_test = delta``, ``offsets = o`` and
    ``log_baseline`` the per-row ``log lambda_j``.
    """
    y = np.asarray(y_test, dtype=float).ravel()
    eta = np.asarray(eta_hat, dtype=float).ravel()
    if y.shape != eta.shape:
        raise ValueError("y_test and eta_hat differ in length")
    if family == "pem":
        if offsets is None or log_baseline is None:
            raise ValueError("pem deviance needs offsets and log_baseline")
        o = np.asarray(offsets, dtype=float).ravel()
        lb = np.asarray(log_baseline, dtype=float).ravel()
        with np.errstate(over="ignore"):
            hazard = np.where(o > 0, o * np.exp(lb + eta), 0.0)
        return float(-2.0 * np.sum(np.where(y > 0, y * (lb + eta), 0.0) - hazard))
    fam = family if isinstance(family, Family) else Family(family)
    return float(-2.0 * np.mean(fam.pointwise_loglik(y, eta, sigma2)))


# ---------------------------------------------------------------------------
# Piecewise exponential model
# ---------------------------------------------------------------------------


@dataclass
class PemDataset:
    """Interval-expanded survival data for Poisson fitting.

    One row per subject and interval under risk: ``delta`` is the event
    indicator, ``offset`` the time spent at risk in the interval (the
    Poisson offset is ``log(offset)``), ``interval`` the 0-based interval
    index and ``subject`` the row of the original data.
    """

    delta: np.ndarray
    offset: np.ndarray
    interval: np.ndarray
    subject: np.ndarray
    cutpoints: np.ndarray
    covariates: pd.DataFrame = field(default_factory=pd.DataFrame)

    @property
    def n_rows(self) -> int:
        return self.delta.size

    @property
    def log_offset(self) -> np.ndarray:
        return np.log(self.offset)

    def to_frame(self) -> pd.DataFrame:
        df = self.covariates.reset_index(drop=True).copy()
        df["subject"] = self.subject
        df["interval"] = self.interval
        df["delta"] = self.delta
        df["offset"] = self.offset
        df["log_offset"] = self.log_offset
        return df


def _check_cutpoints(cutpoints) -> np.ndarray:
    kappa = np.asarray(cutpoints, dtype=float).ravel()
    if kappa.size < 2 or kappa[0] != 0 or np.any(np.diff(kappa) <= 0):
        raise ValueError("cutpoints must increase strictly from 0")
    return kappa


def pem_offsets(t: float, cutpoints) -> np.ndarray:
    """``o_j = max(0, min(kappa_j - kappa_{j-1}, t - kappa_{j-1}))`` for every interval."""
    kappa = _check_cutpoints(cutpoints)
    return np.maximum(0.0, np.minimum(np.diff(kappa), t - kappa[:-1]))


def pem_expand(
    times,
    events,
    cutpoints,
    covariates: Optional[pd.DataFrame] = None,
    time_varying: Optional[Mapping[str, Callable]] = None,
) -> PemDataset:
    """Expand survival times into interval pseudo-observations.

    Parameters
    ----------
    times : array, shape (n,)
        Observed times, in ``(0, kappa_max]``.
    events : array of bool, shape (n,)
    cutpoints : array
        ``kappa_0 = 0 < kappa_1 < ... < kappa_I``.
    covariates : DataFrame, optional
        Subject-level covariates, replicated over each subject's intervals.
    time_varying : mapping, optional
        ``name -> f(frame) -> array``; evaluated on the expanded frame
        (which contains ``interval`` and the subject covariates).
    """
    kappa = _check_cutpoints(cutpoints)
    t = np.asarray(times, dtype=float).ravel()
    ev = np.asarray(events).astype(bool).ravel()
    if t.shape != ev.shape:
        raise ValueError("times and events differ in length")
    if np.any(~np.isfinite(t)) or np.any(t <= 0):
        raise ValueError("times must be positive")
    if np.any(t > kappa[-1]):
        raise ValueError(f"time exceeds the last cutpoint {kappa[-1]}")
    # interval containing t: kappa_{j-1} < t <= kappa_j
    event_interval = np.searchsorted(kappa, t, side="left") - 1
    O = np.maximum(0.0, np.minimum(np.diff(kappa)[None, :], t[:, None] - kappa[None, :-1]))
    J = np.arange(kappa.size - 1)
    keep = (O > 0) | (J[None, :] == event_interval[:, None])
    subj, interval = np.nonzero(keep)
    delta = (ev[subj] & (interval == event_interval[subj])).astype(float)
    if covariates is None:
        cov = pd.DataFrame(index=range(subj.size))
    else:
        if len(covariates) != t.size:
            raise ValueError("covariates must have one row per subject")
        cov = covariates.reset_index(drop=True).iloc[subj].reset_index(drop=True)
    ds = PemDataset(
        delta=delta,
        offset=O[subj, interval],
        interval=interval,
        subject=subj,
        cutpoints=kappa,
        covariates=cov,
    )
    if time_varying:
        frame = ds.to_frame()
        for name, fn in time_varying.items():
            ds.covariates[name] = np.asarray(fn(frame), dtype=float)
    return ds


def pem_loglik_direct(times, events, cutpoints, log_hazard) -> float:
    """Piecewise-exponential log-likelihood ``sum_i delta_i log h_i(t_i) - H_i(t_i)``.

    ``log_hazard`` has shape ``(n, I)``: the log hazard of subject ``i`` in
    interval ``j``.
    """
    kappa = _check_cutpoints(cutpoints)
    t = np.asarray(times, dtype=float).ravel()
    ev = np.asarray(events).astype(bool).ravel()
    lh = np.asarray(log_hazard, dtype=float)
    O = np.maximum(0.0, np.minimum(np.diff(kappa)[None, :], t[:, None] - kappa[None, :-1]))
    j = np.searchsorted(kappa, t, side="left") - 1
    cumhaz = np.sum(O * np.exp(lh), axis=1)
    return float(np.sum(np.where(ev, lh[np.arange(t.size), j], 0.0) - cumhaz))


# ---------------------------------------------------------------------------
# One simulation replicate
# ---------------------------------------------------------------------------


def fit_scenario(
    spec: ScenarioSpec,
    config: SamplerConfig,
    hyper: Optional[Hyperparams] = None,
    threshold: float = 0.5,
    num_basis: int = 20,
) -> dict:
    """Generate one replicate, fit a P-spline per covariate and score it.

    A term counts as selected when its pooled inclusion probability
    exceeds ``threshold``.
    """
    train, test = generate_scenario(spec)
    p = spec.n_covariates
    terms = [TermSpec(f"x{j}", "pspline", f"x{j}", num_basis=num_basis) for j in range(1, p + 1)]
    model = build_model(train, terms, "y", family=spec.family, hyper=hyper)
    chains, summary = run_chains(model, config)
    if "pincl" not in summary:
        raise ModelError("all chains failed")
    truth_map = train.attrs["truth"]
    labels = model.labels
    truth = np.array([truth_map.get(lab, False) for lab in labels])
    pincl = np.asarray(summary["pincl"])
    metrics = complexity_metrics(pincl > threshold, truth)
    F_test, X_test = model.design_for(test)
    eta_hat = F_test @ np.asarray(summary["theta_mean"]) + X_test @ np.asarray(
        summary["beta_mean"]
    )
    mse = float(np.mean((eta_hat - test["eta"].to_numpy()) ** 2))
    return {
        "labels": labels,
        "truth": truth.tolist(),
        "pincl": pincl.tolist(),
        "gamma_fraction": summary["gamma_fraction"],
        "pincl_per_chain": summary["pincl_per_chain"],
        "metrics": metrics,
        "mse_eta": mse,
        "summary": summary,
    }
