"""Marginal mean/variance model for clustered binary responses.

The shipped family is the canonical Bernoulli-logit model: for cluster i
and occasion j, E(y_ij) = mu(x_ij' beta) with mu the logistic function,
Var(y_ij) = phi * mu * (1 - mu), and the dispersion phi fixed at 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ContractError

# Linear predictors are clamped here before exponentiation.  In the
# simulation's covariate range the clamp is never active; it only guards
# against overflow on adversarial inputs.
ETA_CLAMP = 30.0

BERNOULLI_LOGIT = "bernoulli-logit"


@dataclass
class ClusterRecord:
    """One longitudinal unit: responses, covariates and a design weight.

    y may be real-valued (synthetic residual tests rely on this); binary
    0/1 responses are enforced at the data-ingestion boundary, not here.
    """

    id: Any
    y: np.ndarray
    X: np.ndarray
    w: float

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        if self.y.ndim != 1 or self.y.size < 1:
            raise ContractError(f"cluster {self.id!r}: y must be a nonempty vector")
        if self.X.ndim != 2 or self.X.shape[0] != self.y.size:
            raise ContractError(
                f"cluster {self.id!r}: X must be ({self.y.size}, d), got {self.X.shape}"
            )
        if not np.all(np.isfinite(self.X)) or not np.all(np.isfinite(self.y)):
            raise ContractError(f"cluster {self.id!r}: nonfinite entries")
        if not (np.isfinite(self.w) and self.w > 0):
            raise ContractError(f"cluster {self.id!r}: weight must be positive, got {self.w}")

    @property
    def m(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class MarginalModel:
    """Marginal model family tag plus dispersion.

    Only the Bernoulli-logit family ships; phi is fixed to 1 for it (the
    dispersion is carried symbolically but never estimated).
    """

    family: str = BERNOULLI_LOGIT
    dispersion: float = 1.0

    def __post_init__(self):
        if self.family != BERNOULLI_LOGIT:
            raise ContractError(f"unsupported model family: {self.family!r}")
        if not self.dispersion > 0:
            raise ContractError("dispersion must be positive")


@dataclass
class ClusterEvaluation:
    """Mean vector, variance diagonal and mean Jacobian at one beta."""

    mu: np.ndarray      # (m,)
    a_diag: np.ndarray  # (m,) entries phi * sigma^2_ij > 0
    jac: np.ndarray     # (m, d) row j = sigma^2_ij * x_ij for the logit link


def link_inverse(eta):
    """Logistic inverse link; accepts scalars or arrays, result in (0, 1)."""
    eta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    return 1.0 / (1.0 + np.exp(-eta))


def evaluate_cluster(rec: ClusterRecord, beta: np.ndarray, model: MarginalModel) -> ClusterEvaluation:
    """Evaluate mu_i, A_i and the Jacobian d mu_i / d beta' for one cluster."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (rec.d,):
        raise ContractError(f"beta has shape {beta.shape}, expected ({rec.d},)")
    mu = link_inverse(rec.X @ beta)
    var = mu * (1.0 - mu)
    a_diag = model.dispersion * var
    jac = var[:, None] * rec.X
    return ClusterEvaluation(mu=mu, a_diag=a_diag, jac=jac)
