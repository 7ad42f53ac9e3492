"""Orthogonal reparameterization of penalized terms into selectable blocks.

For a term with design ``Z`` and precision ``P`` the implied prior covariance
of the fitted function is proportional to ``Z P^- Z'``. Its leading
eigenvectors, scaled by the square roots of their eigenvalues, give a design
``X_pen`` whose coefficients are i.i.d. standard normal. The image of the
null space of ``P`` (polynomials for P-splines, constants for intrinsic
GMRFs) becomes a separate unpenalized block ``X_0`` with the constant
removed, because the global intercept already carries it.

The eigenproblem is solved in coefficient space: with ``P^- = L L'`` the
non-zero spectrum of ``Z P^- Z'`` is the squared singular spectrum of
``Z L``, which is ``n x rank(P)`` instead of ``n x n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .terms import PSD_RTOL, RawTerm, TermError

__all__ = [
    "BLOCK_KINDS",
    "DesignBlock",
    "NullSpaceMap",
    "PenalizedMap",
    "PlainMap",
    "decompose",
    "truncation_rank",
]

BLOCK_KINDS = ("null_space", "penalized", "unpenalized_plain")

DEFAULT_COVERAGE = 0.995


@dataclass
class NullSpaceMap:
    """``X0 = (Z N - center) R``, times ``scale``."""

    null_basis: np.ndarray
    center: np.ndarray
    rotation: np.ndarray
    scale: float = 1.0

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        return ((Z @ self.null_basis - self.center) @ self.rotation) * self.scale


@dataclass
class PenalizedMap:
    """``X_pen = (Z L - Z N C) W``, times ``scale``."""

    range_factor: np.ndarray
    null_basis: np.ndarray
    null_coef: np.ndarray
    rotation: np.ndarray
    scale: float = 1.0

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        A = Z @ self.range_factor
        if self.null_basis.shape[1]:
            A = A - (Z @ self.null_basis) @ self.null_coef
        return (A @ self.rotation) * self.scale


@dataclass
class PlainMap:
    """Centred (and scaled) raw columns, for linear and factor terms."""

    center: np.ndarray
    scale: float = 1.0

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(Z) - self.center) * self.scale


@dataclass
class DesignBlock:
    """One selectable coefficient block.

    ``map`` turns the parent term's raw design evaluated on new data into
    this block's columns, so fitted models can predict.
    """

    label: str
    X: np.ndarray
    kind: str
    parent_term: str = ""
    selectable: bool = True
    expand: bool = True
    map: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def rescale(self, factor: float) -> None:
        """Multiply the columns (and the new-data map) by ``factor``."""
        self.X = self.X * factor
        if self.map is not None:
            self.map.scale *= factor
        self.meta["scale"] = self.meta.get("scale", 1.0) * factor


def truncation_rank(eigenvalues, coverage: float = DEFAULT_COVERAGE) -> int:
    """Smallest ``d`` whose leading eigenvalues cover ``coverage`` of the total."""
    ev = np.asarray(eigenvalues, dtype=float).ravel()
    if not 0 < coverage <= 1:
        raise ValueError("coverage must lie in (0, 1]")
    if ev.size == 0 or np.any(ev < 0):
        raise ValueError("eigenvalues must be non-negative")
    if np.any(np.diff(ev) > 0):
        raise ValueError("eigenvalues must be sorted in descending order")
    total = ev.sum()
    if total <= 0:
        raise ValueError("all eigenvalues are zero")
    share = np.cumsum(ev) / total
    return int(np.searchsorted(share, coverage - 1e-12, side="left") + 1)


def _split_precision(P: np.ndarray):
    ev, E = np.linalg.eigh(P)
    top = max(ev.max(), 0.0)
    pos = ev > PSD_RTOL * top if top > 0 else np.zeros(ev.size, bool)
    null_basis = E[:, ~pos]
    range_factor = E[:, pos] / np.sqrt(ev[pos])
    return null_basis, range_factor


def decompose(
    term: RawTerm,
    coverage: float = DEFAULT_COVERAGE,
    orthogonalize: bool = True,
    label: Optional[str] = None,
):
    """Split a raw term into a null-space block and a penalized block.

    Parameters
    ----------
    term : RawTerm
    coverage : float
        Fraction of the eigenvalue mass of ``Z P^- Z'`` retained in ``X_pen``.
    orthogonalize : bool
        Project the penalized part onto the orthogonal complement of the
        null-space image ``Z N`` before the eigendecomposition, so that
        ``X_pen`` is orthogonal to ``X_0`` and to the intercept whenever the
        constant lies in ``Z N``. With ``False`` the spectrum of the plain
        ``Z P^- Z'`` is used.
    label : str, optional
        Defaults to ``term.label``.

    Returns
    -------
    X0 : DesignBlock or None
        Orthonormal basis of the centred null-space image; ``None`` if empty.
    Xpen : DesignBlock or None
        ``U_+ V_+^{1/2}`` for the leading ``d`` eigenpairs; ``None`` if
        ``P`` is zero.
    """
    label = term.label if label is None else label
    Z, P = term.Z, term.P
    n, D = Z.shape
    if D == 0:
        raise TermError("empty term")
    N, L = _split_precision(P)
    K, r = N.shape[1], L.shape[1]
    if r == 0 and K == 0:
        raise TermError("term has neither a penalized nor a null-space part")
    if n < r:
        raise TermError(f"n={n} is smaller than rank(P)={r}")

    X0 = None
    ZN = Z @ N
    if K:
        center = ZN.mean(axis=0)
        U0, s0, V0t = np.linalg.svd(ZN - center, full_matrices=False)
        ref = max(np.linalg.norm(ZN, 2), 1e-300)
        keep = s0 > 1e-10 * ref
        n_dropped = int(K - keep.sum())
        if keep.any():
            rot = V0t[keep].T / s0[keep]
            X0 = DesignBlock(
                label=f"{label}.lin" if r else label,
                X=U0[:, keep],
                kind="null_space",
                parent_term=label,
                map=NullSpaceMap(N, center, rot),
                meta={"constant_absorbed": n_dropped},
            )

    Xpen = None
    if r:
        A = Z @ L
        C = np.zeros((K, r))
        if orthogonalize and K:
            C = np.linalg.lstsq(ZN, A, rcond=None)[0]
            A = A - ZN @ C
        U, s, Wt = np.linalg.svd(A, full_matrices=False)
        lam = s**2
        if lam.max() <= 0:
            raise TermError("penalized part vanishes on the observed data")
        rank_full = int(np.sum(lam > PSD_RTOL * lam.max()))
        d = truncation_rank(lam[:rank_full], coverage)
        Xpen = DesignBlock(
            label=f"{label}.sm" if K else label,
            X=U[:, :d] * s[:d],
            kind="penalized",
            parent_term=label,
            map=PenalizedMap(L, N, C, Wt[:d].T),
            meta={
                "eigenvalues": lam[:rank_full],
                "rank_before_truncation": rank_full,
                "coverage": float(lam[:d].sum() / lam[:rank_full].sum()),
            },
        )
    if X0 is None and Xpen is None:
        raise TermError(f"term {label!r} is constant on the data and absorbed by the intercept")
    return X0, Xpen
