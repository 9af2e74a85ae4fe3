"""Smoothly clipped absolute deviation penalty and its LQA machinery.

The penalty is a quadratic spline with knots at lambda and a*lambda:
linear near zero (inducing sparsity), quadratic in between, and constant
beyond a*lambda (leaving large coefficients nearly unbiased).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .qif import ZERO_THRESHOLD


@dataclass(frozen=True)
class PenaltySpec:
    """SCAD parameters: regularization lambda, knot factor a, zero threshold."""

    lam: float
    a: float = 3.7
    zero_threshold: float = ZERO_THRESHOLD

    def __post_init__(self):
        if not self.a > 2.0:
            raise ContractError(f"SCAD requires a > 2, got {self.a}")
        if self.lam < 0.0:
            raise ContractError(f"lambda must be nonnegative, got {self.lam}")
        if not self.zero_threshold > 0.0:
            raise ContractError("zero threshold must be positive")


def scad_value(theta, spec: PenaltySpec):
    """Penalty value p_lambda(theta) for theta >= 0 (scalar or array)."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0.0):
        raise ContractError("scad_value requires theta >= 0")
    lam, a = spec.lam, spec.a
    linear = lam * theta
    middle = -(theta ** 2 - 2.0 * a * lam * theta + lam ** 2) / (2.0 * (a - 1.0))
    cap = (a + 1.0) * lam ** 2 / 2.0
    out = np.where(theta <= lam, linear, np.where(theta <= a * lam, middle, cap))
    return float(out) if out.ndim == 0 else out


def scad_derivative(theta, spec: PenaltySpec):
    """p'_lambda(theta) = lam on [0, lam], (a lam - theta)+/(a-1) after, 0 beyond."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0.0):
        raise ContractError("scad_derivative requires theta >= 0")
    lam, a = spec.lam, spec.a
    tail = np.maximum(a * lam - theta, 0.0) / (a - 1.0)
    out = np.where(theta <= lam, lam, tail)
    return float(out) if out.ndim == 0 else out


def scad_second_derivative(theta, spec: PenaltySpec):
    """p''_lambda: -1/(a-1) strictly between the knots, 0 elsewhere and at knots."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0.0):
        raise ContractError("scad_second_derivative requires theta >= 0")
    lam, a = spec.lam, spec.a
    inside = (theta > lam) & (theta < a * lam)
    out = np.where(inside, -1.0 / (a - 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def lqa_weights(beta_active, spec: PenaltySpec) -> np.ndarray:
    """Diagonal of the local quadratic approximation, p'(|b_k|)/|b_k|.

    Zeros must be pruned before this call; entries below the zero
    threshold are a contract violation.
    """
    beta_active = np.asarray(beta_active, dtype=float)
    mag = np.abs(beta_active)
    if np.any(mag < spec.zero_threshold):
        raise ContractError("lqa_weights received a coefficient below the zero threshold")
    return scad_derivative(mag, spec) / mag
