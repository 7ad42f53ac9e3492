"""Raw design matrices and scaled precision matrices for model terms.

Every term type is reduced to a pair ``(Z, P)``: an ``n x D`` design and a
``D x D`` positive semi-definite precision matrix such that the term's
coefficients have the (possibly improper) prior ``N(0, s^2 P^-)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import BSpline

__all__ = [
    "TERM_KINDS",
    "TermError",
    "TermSpec",
    "RawTerm",
    "SplineBasis",
    "bspline_design",
    "difference_penalty",
    "mrf_precision",
    "random_intercept_design",
    "varying_coefficient",
    "tensor_spline",
    "null_dim",
]

TERM_KINDS = (
    "linear",
    "pspline",
    "mrf",
    "random_intercept",
    "factor",
    "varying_coefficient",
    "tensor_spline",
)

# eigenvalues of P below this fraction of the largest one count as zero
PSD_RTOL = 1e-10


class TermError(ValueError):
    """Raised for malformed term specifications or degenerate inputs."""


@dataclass
class TermSpec:
    """Declarative description of a single model term.

    Parameters
    ----------
    label : str
        Unique term label; block labels are derived from it.
    kind : str
        One of :data:`TERM_KINDS`.
    covariates : list of str
        Column names. ``tensor_spline`` takes two; ``varying_coefficient``
        takes the smooth covariate followed by the modifying covariate ``u``.
    num_basis : int or None
        B-spline basis dimension (spline terms only). Defaults to 20, or to
        8 per margin for ``tensor_spline``.
    spline_degree : int
        B-spline degree.
    penalty_order : int or None
        Difference order ``k``; defaults to 2 for splines.
    adjacency : ndarray or None
        Symmetric 0/1 neighbourhood matrix for ``mrf`` terms. When omitted
        the regions are taken to lie on a line (random walk of order 1).
    nmig : bool
        Use the plain NMIG prior (no parameter expansion) for this term.
    base : {"pspline", "mrf"}
        Smooth underlying a ``varying_coefficient`` term. ``"mrf"`` treats
        the first covariate as region/interval codes (a random walk on the
        line unless ``adjacency`` is given).
    """

    label: str
    kind: str
    covariates: list = field(default_factory=list)
    num_basis: Optional[int] = None
    spline_degree: int = 3
    penalty_order: Optional[int] = None
    adjacency: Optional[np.ndarray] = None
    nmig: bool = False
    base: str = "pspline"

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise TermError(f"unknown term kind {self.kind!r}")
        if isinstance(self.covariates, str):
            self.covariates = [self.covariates]
        self.covariates = list(self.covariates)
        if not self.label or not isinstance(self.label, str):
            raise TermError("term label must be a non-empty string")
        if not self.covariates:
            raise TermError(f"term {self.label!r} has no covariates")
        if self.base not in ("pspline", "mrf"):
            raise TermError(f"unknown varying-coefficient base {self.base!r}")
        if self.num_basis is None:
            self.num_basis = 8 if self.kind == "tensor_spline" else 20
        if self.kind == "varying_coefficient" and self.base == "mrf":
            if self.penalty_order is None:
                self.penalty_order = 1
        elif self.kind in ("pspline", "tensor_spline", "varying_coefficient"):
            if self.penalty_order is None:
                self.penalty_order = 2
            if self.spline_degree < 0:
                raise TermError("spline_degree must be non-negative")
            if self.num_basis <= self.spline_degree + 1:
                raise TermError(
                    f"num_basis={self.num_basis} must exceed spline_degree + 1"
                )
            if not 1 <= self.penalty_order < self.num_basis:
                raise TermError("penalty_order must lie in [1, num_basis)")
        elif self.kind == "mrf" and self.penalty_order is None:
            self.penalty_order = 1
        if self.kind == "tensor_spline" and len(self.covariates) != 2:
            raise TermError("tensor_spline needs exactly two covariates")
        if self.kind == "varying_coefficient" and len(self.covariates) != 2:
            raise TermError("varying_coefficient needs covariates [x, u]")
        if self.adjacency is not None:
            self.adjacency = _check_adjacency(self.adjacency)

    def __eq__(self, other):
        if not isinstance(other, TermSpec):
            return NotImplemented
        same_adj = (self.adjacency is None and other.adjacency is None) or (
            self.adjacency is not None
            and other.adjacency is not None
            and np.array_equal(self.adjacency, other.adjacency)
        )
        return same_adj and all(
            getattr(self, f) == getattr(other, f)
            for f in (
                "label",
                "kind",
                "covariates",
                "num_basis",
                "spline_degree",
                "penalty_order",
                "nmig",
                "base",
            )
        )


@dataclass
class RawTerm:
    """Design ``Z`` (n x D) and scaled precision ``P`` (D x D) of one term."""

    Z: np.ndarray
    P: np.ndarray
    null_dim: int
    label: str = ""

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        D = self.Z.shape[1]
        if self.P.shape != (D, D):
            raise TermError(f"P has shape {self.P.shape}, expected {(D, D)}")
        if not np.allclose(self.P, self.P.T, atol=1e-12 * max(1.0, np.abs(self.P).max())):
            raise TermError("precision matrix must be symmetric")


def null_dim(P: np.ndarray) -> int:
    """Number of numerically zero eigenvalues of the PSD matrix ``P``."""
    ev = np.linalg.eigvalsh(np.atleast_2d(P))
    top = max(ev.max(), 0.0)
    if top == 0.0:
        return len(ev)
    return int(np.sum(ev < PSD_RTOL * top))


# ---------------------------------------------------------------------------
# B-splines
# ---------------------------------------------------------------------------


@dataclass
class SplineBasis:
    """Equidistant B-spline basis fixed on a training range."""

    knots: np.ndarray
    degree: int

    @classmethod
    def from_data(cls, x, num_basis: int, degree: int = 3) -> "SplineBasis":
        x = np.asarray(x, dtype=float).ravel()
        if not np.all(np.isfinite(x)):
            raise TermError("spline covariate contains non-finite values")
        n_unique = np.unique(x).size
        if n_unique < num_basis:
            raise TermError(
                f"degenerate basis: {n_unique} distinct values for "
                f"{num_basis} basis functions"
            )
        lo, hi = x.min(), x.max()
        step = (hi - lo) / (num_basis - degree)
        knots = lo + step * np.arange(-degree, num_basis + 1)
        # pin the boundary knots so that min/max land exactly on them
        knots[degree] = lo
        knots[num_basis] = hi
        return cls(knots=knots, degree=degree)

    @property
    def num_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        return BSpline.design_matrix(x, self.knots, self.degree, extrapolate=True).toarray()


def bspline_design(x, num_basis: int = 20, degree: int = 3) -> np.ndarray:
    """B-spline design matrix on equidistant knots over ``[min(x), max(x)]``.

    ``degree`` exterior knots are added on each side so every row sums to
    one. Raises :class:`TermError` if ``x`` has fewer distinct values than
    ``num_basis``.
    """
    return SplineBasis.from_data(x, num_basis, degree)(x)


def difference_penalty(order: int, dim: int) -> np.ndarray:
    """``D_k' D_k`` for the ``k``-th order difference operator on ``dim`` coefficients."""
    if not 1 <= order < dim:
        raise TermError(f"difference order {order} invalid for dimension {dim}")
    Dk = np.diff(np.eye(dim), n=order, axis=0)
    return Dk.T @ Dk


# ---------------------------------------------------------------------------
# Markov random fields, random effects, modifiers
# ---------------------------------------------------------------------------


def _check_adjacency(adjacency) -> np.ndarray:
    A = np.asarray(adjacency, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise TermError("adjacency must be a square matrix")
    if not np.array_equal(A, A.T):
        raise TermError("adjacency must be symmetric")
    if np.any(np.diag(A) != 0):
        raise TermError("adjacency must have a zero diagonal")
    if not np.all((A == 0) | (A == 1)):
        raise TermError("adjacency must be a 0/1 matrix")
    return A


def path_adjacency(n_regions: int) -> np.ndarray:
    """Adjacency of ``n_regions`` consecutive intervals on a line."""
    A = np.zeros((n_regions, n_regions))
    idx = np.arange(n_regions - 1)
    A[idx, idx + 1] = A[idx + 1, idx] = 1.0
    return A


def mrf_precision(adjacency) -> np.ndarray:
    """Intrinsic GMRF precision ``diag(degree) - adjacency``."""
    A = _check_adjacency(adjacency)
    if A.sum() == 0:
        raise TermError("neighbourhood graph has no edges")
    return np.diag(A.sum(axis=1)) - A


def _indicator(groups) -> tuple[np.ndarray, np.ndarray]:
    levels, codes = np.unique(np.asarray(groups), return_inverse=True)
    Z = np.zeros((codes.size, levels.size))
    Z[np.arange(codes.size), codes] = 1.0
    return Z, levels


def random_intercept_design(groups) -> RawTerm:
    """Group indicator design with an i.i.d. (identity precision) prior."""
    Z, levels = _indicator(groups)
    if levels.size < 2:
        raise TermError("random intercept needs at least two groups")
    return RawTerm(Z=Z, P=np.eye(levels.size), null_dim=0)


def varying_coefficient(u, base: RawTerm) -> RawTerm:
    """Modulate each row of ``base.Z`` by ``u`` (``diag(u) Z``)."""
    u = np.asarray(u, dtype=float).ravel()
    if u.size != base.Z.shape[0]:
        raise TermError("modifier length does not match the base design")
    if not np.all(np.isfinite(u)):
        raise TermError("modifier contains non-finite values")
    return RawTerm(Z=u[:, None] * base.Z, P=base.P.copy(), null_dim=base.null_dim)


def tensor_spline(
    xa,
    xb,
    num_basis_a: int = 8,
    num_basis_b: int = 8,
    degree: int = 3,
    order: int = 2,
) -> RawTerm:
    """Tensor-product P-spline with a Kronecker-sum penalty."""
    Ba = bspline_design(xa, num_basis_a, degree)
    Bb = bspline_design(xb, num_basis_b, degree)
    Z = row_kron(Ba, Bb)
    P = tensor_penalty(num_basis_a, num_basis_b, order)
    return RawTerm(Z=Z, P=P, null_dim=null_dim(P))


def row_kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product of two designs with equal row counts."""
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)


def tensor_penalty(num_basis_a: int, num_basis_b: int, order: int = 2) -> np.ndarray:
    Pa = difference_penalty(order, num_basis_a)
    Pb = difference_penalty(order, num_basis_b)
    return np.kron(Pa, np.eye(num_basis_b)) + np.kron(np.eye(num_basis_a), Pb)


def pspline_term(x, num_basis: int = 20, degree: int = 3, order: int = 2) -> RawTerm:
    Z = bspline_design(x, num_basis, degree)
    return RawTerm(Z=Z, P=difference_penalty(order, num_basis), null_dim=order)


def factor_design(values, levels: Optional[Sequence] = None) -> np.ndarray:
    """Treatment-coded dummies (first level dropped)."""
    values = np.asarray(values)
    if levels is None:
        levels = np.unique(values)
    levels = np.asarray(levels)
    if levels.size < 2:
        raise TermError("factor needs at least two levels")
    return (values[:, None] == levels[None, 1:]).astype(float)
