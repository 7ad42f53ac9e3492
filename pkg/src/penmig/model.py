"""Model specification: family, hyperparameters, blocks and the predictor.

A fitted structured additive model has linear predictor

    eta = F theta + offset + sum_j X_j beta_j,   beta_j = alpha_j xi_j,

where ``F`` (the fixed design, always containing an intercept) collects
unselected effects and each ``X_j`` is a selectable :class:`DesignBlock`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit, gammaln

from .reparam import (
    DEFAULT_COVERAGE,
    DesignBlock,
    NullSpaceMap,
    PlainMap,
    _split_precision,
    decompose,
)
from .terms import (
    RawTerm,
    SplineBasis,
    TermError,
    TermSpec,
    difference_penalty,
    mrf_precision,
    null_dim,
    path_adjacency,
    row_kron,
    tensor_penalty,
)

__all__ = [
    "FAMILIES",
    "Family",
    "Hyperparams",
    "ModelSpec",
    "ModelError",
    "assemble_predictor",
    "build_model",
    "log_likelihood",
]

FAMILIES = ("gaussian", "binomial_logit", "poisson")
_ALIASES = {"binomial": "binomial_logit", "logit": "binomial_logit", "binary": "binomial_logit"}

# prior variance of fixed (unselected) coefficients
FIXED_PRIOR_VAR = 1e6


class ModelError(ValueError):
    """Raised for inconsistent model specifications or invalid data."""


@dataclass(frozen=True)
class Family:
    """Response distribution with its canonical link.

    Only the Gaussian family carries a dispersion parameter ``sigma2``.
    """

    kind: str = "gaussian"

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in FAMILIES:
            raise ModelError(f"unknown family {self.kind!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "kind", kind)

    @property
    def has_dispersion(self) -> bool:
        return self.kind == "gaussian"

    def check_response(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float).ravel()
        if not np.all(np.isfinite(y)):
            raise ModelError("response contains non-finite values")
        if self.kind == "binomial_logit" and not np.all((y == 0) | (y == 1)):
            raise ModelError("binomial responses must be 0/1")
        if self.kind == "poisson" and (np.any(y < 0) or np.any(y != np.round(y))):
            raise ModelError("poisson responses must be non-negative integers")
        return y

    def mean(self, eta) -> np.ndarray:
        """Inverse link ``h(eta)``."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "binomial_logit":
            return expit(eta)
        if self.kind == "poisson":
            return np.exp(eta)
        return eta

    def link(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if self.kind == "binomial_logit":
            mu = np.clip(mu, 1e-3, 1 - 1e-3)
            return np.log(mu / (1 - mu))
        if self.kind == "poisson":
            return np.log(np.maximum(mu, 1e-3))
        return mu

    def pointwise_loglik(self, y, eta, sigma2: float = 1.0) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if not np.all(np.isfinite(eta)):
            raise ModelError("non-finite linear predictor")
        if self.kind == "gaussian":
            if not sigma2 > 0:
                raise ModelError("sigma2 must be positive")
            return -0.5 * np.log(2 * np.pi * sigma2) - (y - eta) ** 2 / (2 * sigma2)
        if self.kind == "binomial_logit":
            return y * eta - np.logaddexp(0.0, eta)
        return y * eta - np.exp(eta) - gammaln(y + 1)

    def working(self, y, eta, sigma2: float = 1.0):
        """IWLS working weights and working residuals ``(y - mu) / w``."""
        if self.kind == "gaussian":
            w = np.full_like(eta, 1.0 / sigma2)
            return w, y - eta
        mu = self.mean(eta)
        if self.kind == "binomial_logit":
            w = mu * (1 - mu)
        else:
            w = mu
        with np.errstate(divide="ignore", invalid="ignore"):
            r = (y - mu) / w
        return w, r


@dataclass(frozen=True)
class Hyperparams:
    """peNMIG hyperparameters.

    ``tau2 ~ IG(a_tau, b_tau)``, ``gamma ~ w delta_1 + (1 - w) delta_v0``,
    ``w ~ Beta(a_w, b_w)``, ``sigma2 ~ IG(a_sigma, b_sigma)``.
    """

    a_tau: float = 5.0
    b_tau: float = 25.0
    v0: float = 0.00025
    a_w: float = 1.0
    b_w: float = 1.0
    a_sigma: float = 1e-4
    b_sigma: float = 1e-4

    def __post_init__(self):
        for name in ("a_tau", "b_tau", "a_w", "b_w", "a_sigma", "b_sigma"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ModelError(f"{name} must be a positive finite number, got {value!r}")
        if not 0 < self.v0 < 1:
            raise ModelError(f"v0 must lie in (0, 1), got {self.v0!r}")
        if self.b_tau / self.a_tau <= 1:
            warnings.warn(
                "b_tau / a_tau <= 1: the slab of tau2 is not clearly separated "
                "from the spike",
                UserWarning,
                stacklevel=3,
            )

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in self.__dataclass_fields__}


@dataclass
class ModelSpec:
    """Immutable-by-convention description of one regression problem.

    Parameters
    ----------
    family : Family
    blocks : list of DesignBlock
        Selectable blocks, in order; their coefficients are concatenated.
    fixed_design : ndarray, shape (n, k0)
        Design of unselected effects; must contain a constant column.
    offsets : ndarray, shape (n,)
    hyper : Hyperparams
    y : ndarray, shape (n,)
    fixed_labels : list of str, optional
    encoders : list, optional
        Per-term encoders that rebuild the block columns for new data.
    """

    family: Family
    blocks: list
    fixed_design: np.ndarray
    offsets: np.ndarray
    hyper: Hyperparams
    y: np.ndarray
    fixed_labels: Optional[list] = None
    encoders: Optional[list] = None
    fixed_encoder: Optional[object] = None

    def __post_init__(self):
        if isinstance(self.family, str):
            self.family = Family(self.family)
        self.y = self.family.check_response(self.y)
        n = self.y.size
        F = np.asarray(self.fixed_design, dtype=float)
        if F.ndim == 1:
            F = F[:, None]
        if F.shape[0] != n:
            raise ModelError(f"fixed_design has {F.shape[0]} rows, expected {n}")
        if not np.any(np.all(np.isclose(F, F[:1]), axis=0) & (np.abs(F[0]) > 0)):
            raise ModelError("fixed_design must contain an intercept column")
        self.fixed_design = F
        self.offsets = (
            np.zeros(n) if self.offsets is None else np.asarray(self.offsets, float).ravel()
        )
        if self.offsets.size != n or not np.all(np.isfinite(self.offsets)):
            raise ModelError("offsets must be a finite vector of length n")
        labels = [b.label for b in self.blocks]
        if len(set(labels)) != len(labels):
            raise ModelError("block labels must be unique")
        for b in self.blocks:
            if b.X.shape[0] != n:
                raise ModelError(f"block {b.label!r} has {b.X.shape[0]} rows, expected {n}")
            if not b.selectable:
                raise ModelError(
                    f"block {b.label!r} is not selectable; put it in fixed_design"
                )
        if self.fixed_labels is None:
            self.fixed_labels = ["(Intercept)"] + [f"fixed{i}" for i in range(1, F.shape[1])]
        d = np.array([b.d for b in self.blocks], dtype=int)
        self.d = d
        self.starts = np.concatenate([[0], np.cumsum(d)]).astype(int)
        self.X = (
            np.hstack([b.X for b in self.blocks]) if self.blocks else np.zeros((n, 0))
        )
        self.expand = np.array([b.expand for b in self.blocks], dtype=bool)
        self.block_of = np.repeat(np.arange(len(self.blocks)), d)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        """Number of selectable blocks."""
        return len(self.blocks)

    @property
    def q(self) -> int:
        """Total number of selectable coefficients."""
        return int(self.d.sum())

    @property
    def labels(self) -> list:
        return [b.label for b in self.blocks]

    def block_slice(self, j: int) -> slice:
        return slice(self.starts[j], self.starts[j + 1])

    def design_for(self, data: Mapping):
        """Fixed design and block columns evaluated on new data."""
        if self.encoders is None or self.fixed_encoder is None:
            raise ModelError("this model was not built from data; cannot predict")
        F = self.fixed_encoder.transform(data)
        cols = []
        for enc in self.encoders:
            cols.extend(enc.transform(data))
        n_new = F.shape[0]
        X = np.hstack(cols) if cols else np.zeros((n_new, 0))
        return F, X


def expand_alpha(spec: ModelSpec, alpha) -> np.ndarray:
    """Repeat each block's ``alpha_j`` over its ``d_j`` coefficients."""
    return np.repeat(np.asarray(alpha, dtype=float), spec.d)


def coefficients(spec: ModelSpec, state) -> np.ndarray:
    """``beta = blockdiag(xi_1, ..., xi_p) alpha``."""
    return expand_alpha(spec, state.alpha) * state.xi


def assemble_predictor(spec: ModelSpec, state) -> np.ndarray:
    """``eta = F theta + offsets + sum_j X_j (alpha_j xi_j)``."""
    alpha = np.asarray(state.alpha, dtype=float)
    xi = np.asarray(state.xi, dtype=float)
    theta = np.asarray(state.theta_fixed, dtype=float)
    if alpha.shape != (spec.p,) or xi.shape != (spec.q,):
        raise ModelError(
            f"state has alpha{alpha.shape}, xi{xi.shape}; "
            f"model has p={spec.p}, q={spec.q}"
        )
    if theta.shape != (spec.fixed_design.shape[1],):
        raise ModelError("theta_fixed does not match fixed_design")
    return spec.fixed_design @ theta + spec.offsets + spec.X @ (np.repeat(alpha, spec.d) * xi)


def log_likelihood(spec: ModelSpec, eta, y=None, sigma2: float = 1.0) -> float:
    """Log-likelihood of ``y`` (default: the model response) at ``eta``.

    Offsets are assumed to be inside ``eta`` already.
    """
    y = spec.y if y is None else spec.family.check_response(y)
    eta = np.asarray(eta, dtype=float).ravel()
    if eta.shape != y.shape:
        raise ModelError("eta and y differ in length")
    return float(np.sum(spec.family.pointwise_loglik(y, eta, sigma2)))


# ---------------------------------------------------------------------------
# Building a model from data
# ---------------------------------------------------------------------------


def _column(data: Mapping, name: str) -> np.ndarray:
    try:
        col = data[name]
    except (KeyError, IndexError):
        raise ModelError(f"missing column {name!r}") from None
    return np.asarray(col)


def _numeric(data: Mapping, name: str) -> np.ndarray:
    col = _column(data, name)
    try:
        col = col.astype(float)
    except (TypeError, ValueError):
        raise ModelError(f"column {name!r} is not numeric") from None
    if not np.all(np.isfinite(col)):
        raise ModelError(f"column {name!r} contains non-finite values")
    return col


def _indicator(values, levels) -> np.ndarray:
    """Indicator design; values outside ``levels`` get an all-zero row."""
    values = np.asarray(values)
    return (values[:, None] == np.asarray(levels)[None, :]).astype(float)


class _TermEncoder:
    """Fits a :class:`TermSpec` on training data and replays it on new data."""

    def __init__(self, term: TermSpec, coverage: float, orthogonalize: bool):
        self.term = term
        self.coverage = coverage
        self.orthogonalize = orthogonalize
        self.blocks: list = []

    # raw design on arbitrary data, after fitting
    def raw(self, data) -> np.ndarray:
        t = self.term
        if t.kind == "pspline":
            return self.basis(_numeric(data, t.covariates[0]))
        if t.kind == "tensor_spline":
            xa = _numeric(data, t.covariates[0])
            xb = _numeric(data, t.covariates[1])
            return row_kron(self.basis(xa), self.basis_b(xb))
        if t.kind in ("mrf", "random_intercept"):
            return _indicator(_column(data, t.covariates[0]), self.levels)
        if t.kind == "varying_coefficient":
            u = _numeric(data, t.covariates[1])
            if t.base == "mrf":
                Z = _indicator(_column(data, t.covariates[0]), self.levels)
            else:
                Z = self.basis(_numeric(data, t.covariates[0]))
            return u[:, None] * Z
        if t.kind == "linear":
            return _numeric(data, t.covariates[0])[:, None]
        if t.kind == "factor":
            return _indicator(_column(data, t.covariates[0]), self.levels[1:])
        raise TermError(f"unsupported kind {t.kind!r}")  # pragma: no cover

    def _region_precision(self, values) -> np.ndarray:
        t = self.term
        if t.adjacency is not None:
            R = t.adjacency.shape[0]
            self.levels = np.arange(R)
            codes = np.asarray(values)
            if not np.all(np.isin(codes, self.levels)):
                raise ModelError(
                    f"term {t.label!r}: region codes must be integers in [0, {R})"
                )
            return mrf_precision(t.adjacency)
        self.levels = np.unique(np.asarray(values))
        R = self.levels.size
        if R < 2:
            raise TermError(f"term {t.label!r} needs at least two regions")
        if t.penalty_order == 1:
            return mrf_precision(path_adjacency(R))
        return difference_penalty(t.penalty_order, R)

    def fit(self, data) -> list:
        t = self.term
        label = t.label
        if t.kind in ("linear", "factor"):
            if t.kind == "factor":
                self.levels = np.unique(_column(data, t.covariates[0]))
                if self.levels.size < 2:
                    raise TermError(f"factor {label!r} needs at least two levels")
            Z = self.raw(data)
            center = Z.mean(axis=0)
            Xc = Z - center
            if np.any(Xc.std(axis=0) <= 1e-12 * np.maximum(1.0, np.abs(center))):
                raise ModelError(f"term {label!r} is constant on the data")
            block = DesignBlock(
                label=label,
                X=Xc,
                kind="unpenalized_plain",
                parent_term=label,
                map=PlainMap(center),
            )
            self.blocks = [block]
            return self.blocks

        if t.kind == "pspline":
            self.basis = SplineBasis.from_data(
                _numeric(data, t.covariates[0]), t.num_basis, t.spline_degree
            )
            P = difference_penalty(t.penalty_order, t.num_basis)
        elif t.kind == "tensor_spline":
            self.basis = SplineBasis.from_data(
                _numeric(data, t.covariates[0]), t.num_basis, t.spline_degree
            )
            self.basis_b = SplineBasis.from_data(
                _numeric(data, t.covariates[1]), t.num_basis, t.spline_degree
            )
            P = tensor_penalty(t.num_basis, t.num_basis, t.penalty_order)
        elif t.kind == "mrf":
            P = self._region_precision(_column(data, t.covariates[0]))
        elif t.kind == "random_intercept":
            self.levels = np.unique(_column(data, t.covariates[0]))
            if self.levels.size < 2:
                raise TermError("random intercept needs at least two groups")
            P = np.eye(self.levels.size)
        elif t.kind == "varying_coefficient":
            if t.base == "mrf":
                P = self._region_precision(_column(data, t.covariates[0]))
            else:
                self.basis = SplineBasis.from_data(
                    _numeric(data, t.covariates[0]), t.num_basis, t.spline_degree
                )
                P = difference_penalty(t.penalty_order, t.num_basis)
        else:  # pragma: no cover
            raise TermError(f"unsupported kind {t.kind!r}")

        raw = RawTerm(Z=self.raw(data), P=P, null_dim=null_dim(P), label=label)
        if t.kind == "varying_coefficient":
            # u f(x): the null space image u * Z N no longer contains the
            # constant, so no column must be removed from it
            self.blocks = _decompose_vc(raw, self.coverage, self.orthogonalize)
        else:
            self.blocks = [
                b for b in decompose(raw, self.coverage, self.orthogonalize) if b is not None
            ]
        return self.blocks

    def transform(self, data) -> list:
        Z = self.raw(data)
        return [b.map(Z) for b in self.blocks]


def _decompose_vc(raw: RawTerm, coverage: float, orthogonalize: bool) -> list:
    N, _ = _split_precision(raw.P)
    blocks = []
    _, Xpen = decompose(raw, coverage, orthogonalize)
    if N.shape[1]:
        # keep the full null space image (u * const is a real effect)
        ZN = raw.Z @ N
        U0, s0, V0t = np.linalg.svd(ZN, full_matrices=False)
        keep = s0 > 1e-10 * max(s0.max(), 1e-300)
        if keep.any():
            blocks.append(
                DesignBlock(
                    label=f"{raw.label}.lin" if Xpen is not None else raw.label,
                    X=U0[:, keep],
                    kind="null_space",
                    parent_term=raw.label,
                    map=NullSpaceMap(N, np.zeros(N.shape[1]), V0t[keep].T / s0[keep]),
                    meta={"constant_absorbed": 0},
                )
            )
    if Xpen is not None:
        blocks.append(Xpen)
    return blocks


class _FixedEncoder:
    """Intercept plus forced-in numeric (centred) or factor (dummy) columns."""

    def __init__(self, names: Sequence[str]):
        self.names = list(names)

    def fit(self, data) -> tuple[np.ndarray, list]:
        self.parts = []
        labels = ["(Intercept)"]
        for name in self.names:
            col = _column(data, name)
            if col.dtype.kind in "fiub":
                x = _numeric(data, name)
                self.parts.append(("num", name, x.mean()))
                labels.append(name)
            else:
                levels = np.unique(col)
                if levels.size < 2:
                    raise ModelError(f"fixed factor {name!r} has a single level")
                self.parts.append(("fac", name, levels))
                labels.extend(f"{name}[{lv}]" for lv in levels[1:])
        return self.transform(data), labels

    def transform(self, data) -> np.ndarray:
        cols = []
        n = None
        for kind, name, info in self.parts:
            if kind == "num":
                c = (_numeric(data, name) - info)[:, None]
            else:
                c = _indicator(_column(data, name), info[1:])
            n = c.shape[0]
            cols.append(c)
        if n is None:
            n = _n_rows(data)
        return np.hstack([np.ones((n, 1))] + cols)


def _n_rows(data) -> int:
    if hasattr(data, "shape"):
        return int(data.shape[0])
    return len(next(iter(data.values())))


def build_model(
    data: Mapping,
    terms: Sequence[TermSpec],
    response: str,
    family="gaussian",
    hyper: Optional[Hyperparams] = None,
    offset: Optional[str] = None,
    fixed: Sequence[str] = (),
    coverage: float = DEFAULT_COVERAGE,
    orthogonalize: bool = True,
    scale_blocks: bool = True,
    nmig_single: bool = False,
) -> ModelSpec:
    """Turn term specifications and a data table into a :class:`ModelSpec`.

    Parameters
    ----------
    data : mapping of column name to array (e.g. a DataFrame)
    terms : sequence of TermSpec
    response : str
        Column holding ``y``.
    family : str or Family
    hyper : Hyperparams, optional
    offset : str, optional
        Column added to the predictor unchanged (log-exposure).
    fixed : sequence of str
        Covariates forced into the unselected part with flat priors.
    coverage, orthogonalize
        Passed to :func:`penmig.reparam.decompose`.
    scale_blocks : bool
        Rescale every block to ``||X_j||_F^2 = n`` so that ``alpha_j`` is on
        the scale of the root-mean-square effect, independent of basis and
        penalty scaling.
    nmig_single : bool
        Use plain NMIG (no parameter expansion) for all one-column blocks.
    """
    family = family if isinstance(family, Family) else Family(family)
    hyper = Hyperparams() if hyper is None else hyper
    labels = [t.label for t in terms]
    if len(set(labels)) != len(labels):
        raise ModelError("duplicate term labels")
    y = _column(data, response)
    n = y.shape[0]
    off = None if offset is None else _numeric(data, offset)
    fixed_enc = _FixedEncoder(fixed)
    F, fixed_labels = fixed_enc.fit(data)
    encoders, blocks = [], []
    for t in terms:
        enc = _TermEncoder(t, coverage, orthogonalize)
        for b in enc.fit(data):
            if scale_blocks:
                b.rescale(np.sqrt(n) / np.linalg.norm(b.X))
            b.expand = not (t.nmig or (nmig_single and b.d == 1))
            blocks.append(b)
        encoders.append(enc)
    return ModelSpec(
        family=family,
        blocks=blocks,
        fixed_design=F,
        offsets=off,
        hyper=hyper,
        y=y,
        fixed_labels=fixed_labels,
        encoders=encoders,
        fixed_encoder=fixed_enc,
    )
