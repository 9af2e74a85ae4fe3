"""Working correlation structures and their basis-matrix representation.

The inverse of each supported working correlation can be written as a
linear combination of a few symmetric 0/1 basis matrices; the quadratic
inference machinery is built on those bases and never needs the nuisance
correlation parameter itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, SingularMatrixError

INDEPENDENCE = "independence"
EXCHANGEABLE = "exchangeable"
AR1 = "ar1"

_KINDS = (INDEPENDENCE, EXCHANGEABLE, AR1)


@dataclass(frozen=True)
class CorrelationStructure:
    kind: str
    m: int

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ContractError(f"unsupported correlation kind: {self.kind!r}")
        if self.m < 1:
            raise ContractError("cluster size m must be >= 1")


@dataclass(frozen=True)
class BasisSet:
    """Ordered basis matrices M_1..M_L; M_1 is always the identity."""

    kind: str
    bases: np.ndarray  # (L, m, m), symmetric 0/1 matrices

    @property
    def L(self) -> int:
        return self.bases.shape[0]

    @property
    def m(self) -> int:
        return self.bases.shape[1]


def basis_matrices(structure: CorrelationStructure) -> BasisSet:
    """Basis matrices for the inverse working correlation.

    independence -> {I}; exchangeable -> {I, off-diagonal ones}; ar1 ->
    {I, symmetric first off-diagonal ones, corner indicator}.  The AR(1)
    second basis is symmetrized (ones on both first off-diagonals) so that
    every quadratic-form middle matrix is symmetric.
    """
    m = structure.m
    eye = np.eye(m)
    if structure.kind == INDEPENDENCE:
        bases = eye[None, :, :]
    elif structure.kind == EXCHANGEABLE:
        m2 = np.ones((m, m)) - eye
        bases = np.stack([eye, m2])
    elif structure.kind == AR1:
        m2 = np.zeros((m, m))
        idx = np.arange(m - 1)
        m2[idx, idx + 1] = 1.0
        m2[idx + 1, idx] = 1.0
        m3 = np.zeros((m, m))
        m3[0, 0] = 1.0
        m3[m - 1, m - 1] = 1.0
        bases = np.stack([eye, m2, m3])
    else:  # pragma: no cover - guarded by CorrelationStructure
        raise ContractError(f"unsupported correlation kind: {structure.kind!r}")
    return BasisSet(kind=structure.kind, bases=bases)


def working_correlation(structure: CorrelationStructure, alpha: float = 0.0) -> np.ndarray:
    """The m x m working correlation matrix R(alpha)."""
    m = structure.m
    if structure.kind == INDEPENDENCE:
        return np.eye(m)
    if not (0.0 <= alpha < 1.0):
        raise ContractError(f"alpha must lie in [0, 1), got {alpha}")
    if structure.kind == EXCHANGEABLE:
        return (1.0 - alpha) * np.eye(m) + alpha * np.ones((m, m))
    lags = np.abs(np.arange(m)[:, None] - np.arange(m)[None, :])
    return alpha ** lags


def span_check(structure: CorrelationStructure, alpha: float = 0.0) -> float:
    """Frobenius residual of projecting R(alpha)^{-1} onto span{M_l}.

    Defined for independence and exchangeable, where the representation is
    exact; AR(1) is excluded because its inverse only approximately spans
    the three-matrix family at the boundary rows.
    """
    if structure.kind == AR1:
        raise ContractError("span_check is not defined for the ar1 structure")
    R = working_correlation(structure, alpha)
    try:
        Rinv = np.linalg.inv(R)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"working correlation is singular: {exc}") from exc
    basis = basis_matrices(structure).bases
    A = basis.reshape(basis.shape[0], -1).T  # (m*m, L)
    b = Rinv.reshape(-1)
    coef, *_ = np.linalg.lstsq(A, b, rcond=None)
    return float(np.linalg.norm(b - A @ coef))
