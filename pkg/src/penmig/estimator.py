"""scikit-learn style front-end for peNMIG function selection."""

from __future__ import annotations

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .model import Family, Hyperparams, ModelError, build_model
from .sampler import SamplerConfig, run_chains
from .terms import TermSpec

__all__ = ["SpikeSlabGAM", "default_terms"]

_RESPONSE = "__y__"


def default_terms(X: pd.DataFrame, num_basis: int = 20) -> list:
    """One term per column: factors for categorical columns, P-splines for
    numeric columns with enough distinct values, linear effects otherwise."""
    terms = []
    for col in X.columns:
        x = X[col]
        if isinstance(x.dtype, pd.CategoricalDtype) or x.dtype == object or x.dtype == bool:
            terms.append(TermSpec(str(col), "factor", [col]))
        elif np.unique(x.to_numpy()).size > num_basis:
            terms.append(TermSpec(str(col), "pspline", [col], num_basis=num_basis))
        else:
            terms.append(TermSpec(str(col), "linear", [col]))
    return terms


class SpikeSlabGAM(RegressorMixin, BaseEstimator):
    """Generalized additive model with peNMIG spike-and-slab term selection.

    Each term is split into an unpenalized (polynomial) block and a
    penalized block, and each block gets its own inclusion indicator.

    Parameters
    ----------
    terms : list of TermSpec, optional
        Model terms; by default one per column of ``X`` (see
        :func:`default_terms`).
    family : {"gaussian", "binomial", "poisson"}
    offset : str, optional
        Column of ``X`` added unchanged to the linear predictor.
    v0, a_tau, b_tau, a_w, b_w : float
        Prior hyperparameters.
    n_chains, burn_in, iterations, thin, seed, n_jobs
        MCMC settings (see :class:`penmig.sampler.SamplerConfig`).
    threshold : float
        A block counts as selected when its inclusion probability exceeds
        this value.
    coverage : float
        Eigenvalue mass kept by the reparameterization.
    ci_level : float
        Level of the pointwise credible intervals.

    Attributes
    ----------
    spec_ : ModelSpec
    chains_ : list of ChainOutput
    summary_ : dict
    pincl_ : pandas.Series
        Inclusion probabilities by block label.
    selected_ : list of str
    coef_ : ndarray
        Posterior mean of the concatenated block coefficients.
    intercept_ : ndarray
        Posterior mean of the fixed coefficients (intercept first).
    """

    def __init__(
        self,
        terms=None,
        family="gaussian",
        offset=None,
        v0=0.00025,
        a_tau=5.0,
        b_tau=25.0,
        a_w=1.0,
        b_w=1.0,
        n_chains=8,
        burn_in=500,
        iterations=5000,
        thin=5,
        seed=0,
        n_jobs=1,
        threshold=0.5,
        coverage=0.995,
        ci_level=0.8,
    ):
        self.terms = terms
        self.family = family
        self.offset = offset
        self.v0 = v0
        self.a_tau = a_tau
        self.b_tau = b_tau
        self.a_w = a_w
        self.b_w = b_w
        self.n_chains = n_chains
        self.burn_in = burn_in
        self.iterations = iterations
        self.thin = thin
        self.seed = seed
        self.n_jobs = n_jobs
        self.threshold = threshold
        self.coverage = coverage
        self.ci_level = ci_level

    # ------------------------------------------------------------------
    def _frame(self, X, reset: bool) -> pd.DataFrame:
        if isinstance(X, pd.DataFrame):
            frame = X.reset_index(drop=True)
        else:
            arr = np.asarray(X)
            if arr.ndim == 1:
                raise ValueError(
                    "Expected 2D array, got 1D array instead; reshape with "
                    "X.reshape(-1, 1) for a single feature"
                )
            if arr.ndim != 2:
                raise ValueError(f"Expected 2D array, got {arr.ndim}D array")
            frame = pd.DataFrame(arr, columns=[f"x{i}" for i in range(arr.shape[1])])
        if frame.shape[0] == 0:
            raise ValueError("Found array with 0 sample(s)")
        if reset:
            self.feature_names_in_ = np.asarray(frame.columns, dtype=object)
            self.n_features_in_ = frame.shape[1]
        else:
            missing = [c for c in self.feature_names_in_ if c not in frame.columns]
            if missing:
                raise ValueError(f"X is missing columns seen during fit: {missing}")
        for col in frame.columns:
            x = frame[col]
            if pd.api.types.is_numeric_dtype(x) and not np.all(np.isfinite(x.to_numpy(float))):
                raise ValueError(f"Input contains NaN or infinity in column {col!r}")
        return frame

    def fit(self, X, y):
        """Run the sampler.

        Parameters
        ----------
        X : DataFrame or array-like of shape (n_samples, n_features)
        y : array-like of shape (n_samples,)

        Returns
        -------
        self
        """
        frame = self._frame(X, reset=True)
        y = np.asarray(y, dtype=float).ravel()
        if y.shape[0] != frame.shape[0]:
            raise ValueError(
                f"X has {frame.shape[0]} rows but y has {y.shape[0]} entries"
            )
        family = Family(self.family)
        family.check_response(y)
        features = frame.drop(columns=[self.offset]) if self.offset else frame
        terms = self.terms if self.terms is not None else default_terms(features)
        if not terms:
            raise ValueError("no model terms")
        if _RESPONSE in frame.columns:
            raise ValueError(f"column name {_RESPONSE!r} is reserved")
        data = frame.assign(**{_RESPONSE: y})
        hyper = Hyperparams(
            v0=self.v0, a_tau=self.a_tau, b_tau=self.b_tau, a_w=self.a_w, b_w=self.b_w
        )
        self.spec_ = build_model(
            data,
            terms,
            _RESPONSE,
            family=family,
            hyper=hyper,
            offset=self.offset,
            coverage=self.coverage,
        )
        config = SamplerConfig(
            n_chains=self.n_chains,
            burn_in=self.burn_in,
            iterations=self.iterations,
            thin=self.thin,
            seed=self.seed,
            ci_level=self.ci_level,
            n_jobs=self.n_jobs,
        )
        self.chains_, self.summary_ = run_chains(self.spec_, config)
        if "pincl" not in self.summary_:
            errors = "; ".join(c.error for c in self.chains_ if c.failed)
            raise ModelError(f"all chains failed: {errors}")
        self.pincl_ = pd.Series(self.summary_["pincl"], index=self.spec_.labels, name="pincl")
        self.selected_ = [lab for lab, p in self.pincl_.items() if p > self.threshold]
        self.coef_ = np.asarray(self.summary_["beta_mean"])
        self.intercept_ = np.asarray(self.summary_["theta_mean"])
        return self

    def predict_linear(self, X) -> np.ndarray:
        """Posterior mean of the linear predictor on new data."""
        check_is_fitted(self, "spec_")
        frame = self._frame(X, reset=False)
        F, Xb = self.spec_.design_for(frame)
        eta = F @ self.intercept_ + Xb @ self.coef_
        if self.offset:
            eta = eta + frame[self.offset].to_numpy(float)
        return eta

    def predict(self, X) -> np.ndarray:
        """Posterior mean of ``E(y | x)`` on new data."""
        check_is_fitted(self, "spec_")
        frame = self._frame(X, reset=False)
        F, Xb = self.spec_.design_for(frame)
        ok = [c for c in self.chains_ if not c.failed and c.n_saved > 0]
        beta = np.concatenate([c.samples["beta"] for c in ok])
        theta = np.concatenate([c.samples["theta"] for c in ok])
        eta = theta @ F.T + beta @ Xb.T
        if self.offset:
            eta = eta + frame[self.offset].to_numpy(float)
        return self.spec_.family.mean(eta).mean(axis=0)
