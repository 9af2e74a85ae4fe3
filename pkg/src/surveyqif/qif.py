"""Survey-weighted quadratic inference function engine.

Builds the weighted extended quasi-score q_n, its empirical covariance
C_n, the objective Q_n = n q_n' C_n^{-1} q_n with analytic first
derivatives (including the C_n-derivative correction) and the leading
Hessian term, plus a damped-Newton minimizer.

All score algebra is specialized to the Bernoulli-logit family shipped in
model.py; per-cluster quantities are computed in one vectorized pass over
the stacked sample arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import _kernels
from .correlation import BasisSet
from .errors import ContractError, NumericDomainError, SingularMatrixError
from .model import BERNOULLI_LOGIT, ClusterRecord, MarginalModel, link_inverse
from .model import ETA_CLAMP

# Relative ridge added to C_n before factorization: eps = RIDGE_REL * tr(C)/(Ld).
# Scale-invariant in the weights and negligible against the score covariance.
RIDGE_REL = 1e-8

# |beta_k| below this threshold counts as zero for active-set bookkeeping.
ZERO_THRESHOLD = 1e-3


@dataclass
class SurveySample:
    """A sample of clusters plus the design information needed by q_n.

    All clusters must share the covariate dimension and (because the basis
    matrices are m x m) the cluster size.  N is the known finite-population
    size entering the 1/N factor of the weighted score.
    """

    clusters: Sequence[ClusterRecord]
    N: int
    model: MarginalModel
    basis: BasisSet

    def __post_init__(self):
        if len(self.clusters) < 1:
            raise ContractError("sample must contain at least one cluster")
        if self.N < len(self.clusters):
            raise ContractError(f"population size N={self.N} smaller than sample n={len(self.clusters)}")
        m = self.clusters[0].m
        d = self.clusters[0].d
        for rec in self.clusters:
            if rec.m != m:
                raise ContractError("all clusters must share the same size m")
            if rec.d != d:
                raise ContractError("all clusters must share the covariate dimension d")
        if self.basis.m != m:
            raise ContractError(f"basis dimension {self.basis.m} != cluster size {m}")
        self._Y = np.stack([rec.y for rec in self.clusters])          # (n, m)
        self._X = np.stack([rec.X for rec in self.clusters])          # (n, m, d)
        self._w = np.array([rec.w for rec in self.clusters], float)   # (n,)

    @property
    def n(self) -> int:
        return len(self.clusters)

    @property
    def m(self) -> int:
        return self._Y.shape[1]

    @property
    def d(self) -> int:
        return self._X.shape[2]

    @property
    def L(self) -> int:
        return self.basis.L

    @property
    def weights(self) -> np.ndarray:
        return self._w

    def arrays(self):
        """Stacked (Y, X, w) views; callers must not mutate them."""
        return self._Y, self._X, self._w


def with_basis(sample: SurveySample, basis: BasisSet) -> SurveySample:
    """The same drawn sample viewed under a different working-correlation basis."""
    return SurveySample(clusters=sample.clusters, N=sample.N,
                        model=sample.model, basis=basis)


@dataclass
class QifState:
    """Cached q_n, C_n, D_n and per-cluster score terms at one point."""

    beta: np.ndarray
    q: np.ndarray            # (Ld,)
    C: np.ndarray            # (Ld, Ld) before ridge
    ridge: float             # eps actually added
    D: Optional[np.ndarray]  # (Ld, d) = d q_n / d beta'
    scores: np.ndarray       # (n, Ld) per-cluster q_i
    dscores: Optional[np.ndarray]  # (n, Ld, d) per-cluster d q_i / d beta'
    w: np.ndarray            # weights used in the aggregation
    n: int
    N: int
    _cho: tuple = field(repr=False, default=None)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """(C + ridge I)^{-1} rhs via the cached Cholesky factor."""
        return cho_solve(self._cho, rhs, check_finite=False)

    @property
    def Cinv(self) -> np.ndarray:
        return self.solve(np.eye(self.C.shape[0]))

    @property
    def G(self) -> np.ndarray:
        """Materialized d C_n / d beta_k, shape (d, Ld, Ld)."""
        if self.dscores is None:
            raise ContractError("state was evaluated without derivatives")
        wdq = self.w[:, None, None] * self.dscores
        half = np.tensordot(wdq, self.scores, axes=([0], [0])).transpose(1, 0, 2)
        return (half + half.transpose(0, 2, 1)) / float(self.N)

    @property
    def value(self) -> float:
        """Q_n at this state's beta."""
        val = float(self.n * (self.q @ self.solve(self.q)))
        if val < -1e-8:
            raise NumericDomainError(f"Q_n evaluated negative: {val}")
        return max(val, 0.0)

    def gradient(self) -> np.ndarray:
        """Analytic gradient of Q_n, including the C_n-derivative term.

        The quadratic forms in G_n^(k) are contracted against the
        per-cluster scores without materializing G; the ridge's own
        beta-dependence (through tr(C_n)) is included so the result is
        exactly the gradient of the computed value.
        """
        if self.dscores is None:
            raise ContractError("state was evaluated without derivatives")
        Ld = self.q.size
        z = self.solve(self.q)
        lead = 2.0 * (self.D.T @ z)
        # z' G_k z = (2/N) sum_i w_i (q_i . z)(dq_i[:,k] . z)
        ds_z = np.matmul(z, self.dscores)                          # (n, d)
        a = self.w * (self.scores @ z)
        zGz = (2.0 / self.N) * (a @ ds_z)
        # tr(G_k) = (2/N) sum_i w_i (dq_i[:,k] . q_i)
        rowdot = np.matmul(self.scores[:, None, :], self.dscores)[:, 0, :]
        trG = (2.0 / self.N) * (self.w @ rowdot)
        ridge_term = (RIDGE_REL / Ld) * trG * (z @ z)
        return self.n * (lead - zGz - ridge_term)

    def hessian_lead(self) -> np.ndarray:
        """Leading Hessian term 2 n D' C^{-1} D (symmetric PSD)."""
        CD = self.solve(self.D)
        H = 2.0 * self.n * (self.D.T @ CD)
        return 0.5 * (H + H.T)


def _cluster_terms(sample: SurveySample, beta: np.ndarray, derivatives: bool):
    """Per-cluster extended scores q_i and, optionally, d q_i / d beta'.

    Returns (scores (n, Ld), dscores (n, Ld, d) or None).
    """
    if sample.model.family != BERNOULLI_LOGIT:
        raise ContractError(f"unsupported family {sample.model.family!r}")
    beta = np.asarray(beta, dtype=float)
    Y, X, _ = sample.arrays()
    n, m, d = X.shape
    if beta.shape != (d,):
        raise ContractError(f"beta has shape {beta.shape}, expected ({d},)")

    if _kernels.HAVE_NUMBA:
        scores, dscores = _kernels.cluster_terms(
            Y, X, sample.basis.bases, beta, sample.model.dispersion, ETA_CLAMP,
            derivatives)
        return scores, (dscores if derivatives else None)

    mu = link_inverse(X @ beta)                       # (n, m)
    var = mu * (1.0 - mu)
    if np.any(var <= 0.0):
        raise NumericDomainError("variance diagonal hit zero; eta clamp exceeded")
    s = np.sqrt(sample.model.dispersion * var)        # sqrt of A_i diagonal
    u = (Y - mu) / s                                  # standardized residuals
    ps = var / s
    # column j of J' A^{-1/2} is (var_j / s_j) x_j
    P = ps[:, :, None] * X                            # (n, m, d)

    L = sample.L
    bases = sample.basis.bases                        # (L, m, m), symmetric
    uM = np.matmul(u[None, :, :], bases)              # (L, n, m)
    scores = np.matmul(uM.transpose(1, 0, 2), P).reshape(n, L * d)

    if not derivatives:
        return scores, None

    # For the logit link: d var/d eta = var (1 - 2 mu), hence
    #   d (var_j/s_j) / d beta_k = 0.5 (var_j/s_j) (1 - 2 mu_j) x_jk
    #   d u_j / d beta_k = (-(var_j/s_j) - 0.5 u_j (1 - 2 mu_j)) x_jk
    one_m2 = 1.0 - 2.0 * mu
    g = (-ps - 0.5 * u * one_m2)                      # (n, m)
    gX = g[:, :, None] * X                            # (n, m, d)
    Xt = X.transpose(0, 2, 1)                         # (n, d, m)
    Pt = P.transpose(0, 2, 1)
    c = (0.5 * ps * one_m2)[None, :, :] * uM          # (L, n, m)
    term1 = np.matmul(Xt[None], c[:, :, :, None] * X[None])   # (L, n, d, d)
    W = np.matmul(bases[:, None, :, :], gX[None])             # (L, n, m, d)
    term2 = np.matmul(Pt[None], W)
    dscores = (term1 + term2).transpose(1, 0, 2, 3).reshape(n, L * d, d)
    return scores, dscores


def _aggregate(sample: SurveySample, scores, dscores, weights=None):
    """Weighted (1/N) aggregation of per-cluster terms into q, C, D."""
    w = sample.weights if weights is None else np.asarray(weights, float)
    if w.shape != (sample.n,):
        raise ContractError(f"weights have shape {w.shape}, expected ({sample.n},)")
    invN = 1.0 / float(sample.N)
    ws = w[:, None] * scores
    q = invN * ws.sum(axis=0)
    C = invN * (ws.T @ scores)
    C = 0.5 * (C + C.T)
    if dscores is None:
        return q, C, None, w
    Ld_d = dscores.shape[1] * dscores.shape[2]
    D = invN * (w @ dscores.reshape(len(w), Ld_d)).reshape(dscores.shape[1:])
    return q, C, D, w


def evaluate_state(sample: SurveySample, beta, weights=None, derivatives: bool = True) -> QifState:
    """Evaluate q_n, C_n (ridge-regularized) and optional derivatives at beta.

    `weights` overrides the sample's design weights without copying the
    clusters; the bootstrap uses this.
    """
    beta = np.asarray(beta, dtype=float)
    scores, dscores = _cluster_terms(sample, beta, derivatives)
    q, C, D, w = _aggregate(sample, scores, dscores, weights)
    Ld = q.size
    eps = RIDGE_REL * np.trace(C) / Ld
    if not eps > 0.0:
        # all-zero scores (exact fit); keep the system solvable
        eps = RIDGE_REL
    try:
        cho = cho_factor(C + eps * np.eye(Ld), lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - C + eps I is PD
        raise SingularMatrixError(f"C_n factorization failed: {exc}") from exc
    return QifState(beta=beta.copy(), q=q, C=C, ridge=eps, D=D,
                    scores=scores, dscores=dscores, w=w, n=sample.n,
                    N=sample.N, _cho=cho)


# ---------------------------------------------------------------------------
# Operation-level API
# ---------------------------------------------------------------------------


def cluster_score(rec: ClusterRecord, beta, model: MarginalModel, basis: BasisSet) -> np.ndarray:
    """Extended quasi-score q_i(beta) of a single cluster, stacked over bases."""
    sample = SurveySample(clusters=[rec], N=1, model=model, basis=basis)
    scores, _ = _cluster_terms(sample, beta, derivatives=False)
    return scores[0]


def weighted_score(sample: SurveySample, beta) -> np.ndarray:
    """q_n(beta) = N^{-1} sum_{i in s} w_i q_i(beta)."""
    scores, _ = _cluster_terms(sample, beta, derivatives=False)
    q, _, _, _ = _aggregate(sample, scores, None)
    return q


def score_covariance(sample: SurveySample, beta) -> np.ndarray:
    """C_n(beta) = N^{-1} sum_{i in s} w_i q_i q_i' (no ridge applied)."""
    scores, _ = _cluster_terms(sample, beta, derivatives=False)
    _, C, _, _ = _aggregate(sample, scores, None)
    return C


def qif_value(sample: SurveySample, beta, weights=None) -> float:
    """Q_n(beta) = n q_n' C_n^{-1} q_n >= 0 (C_n ridge-regularized)."""
    return evaluate_state(sample, beta, weights=weights, derivatives=False).value


def qif_gradient(sample: SurveySample, beta, weights=None) -> np.ndarray:
    """Analytic gradient of Q_n at beta."""
    return evaluate_state(sample, beta, weights=weights, derivatives=True).gradient()


def qif_hessian_lead(sample: SurveySample, beta, weights=None) -> np.ndarray:
    """Leading Hessian term 2 n D_n' C_n^{-1} D_n at beta."""
    return evaluate_state(sample, beta, weights=weights, derivatives=True).hessian_lead()


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    """Outcome of a (possibly penalized) fit."""

    beta_hat: np.ndarray
    objective: float
    iterations: int
    converged: bool
    grad_norm: float
    active_set: np.ndarray                  # indices with |beta_k| >= threshold
    variance: Optional[np.ndarray] = None
    trace: list = field(default_factory=list)  # (objective, step_norm) per accepted step
    diagnostics: dict = field(default_factory=dict)


def active_indices(beta, threshold: float = ZERO_THRESHOLD) -> np.ndarray:
    return np.flatnonzero(np.abs(np.asarray(beta, float)) >= threshold)


def solve_psd(H: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve H x = rhs for symmetric PSD H, escalating a tiny ridge if needed."""
    d = H.shape[0]
    scale = max(np.trace(H) / d, 1e-300)
    bump = 0.0
    for _ in range(6):
        try:
            cho = cho_factor(H + bump * np.eye(d), lower=True, check_finite=False)
            return cho_solve(cho, rhs, check_finite=False)
        except np.linalg.LinAlgError:
            bump = scale * 1e-12 if bump == 0.0 else bump * 100.0
    raise SingularMatrixError(
        f"Newton system singular (trace scale {scale:.3e}, last ridge {bump:.3e})"
    )


def fit_qif(sample: SurveySample, init=None, *, grad_tol: float = 1e-6,
            step_tol: float = 1e-8, max_iter: int = 100,
            max_halvings: int = 30) -> FitResult:
    """Minimize Q_n by damped Newton using the leading Hessian term.

    Step-halving keeps the objective non-increasing across accepted steps;
    non-convergence is reported through the result, not raised.
    """
    d = sample.d
    beta = np.zeros(d) if init is None else np.asarray(init, float).copy()
    if beta.shape != (d,):
        raise ContractError(f"init has shape {beta.shape}, expected ({d},)")

    trace = []
    converged = False
    iterations = 0
    state = evaluate_state(sample, beta)
    value = state.value
    grad = state.gradient()

    for iterations in range(max_iter + 1):
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= grad_tol * (1.0 + abs(value)):
            converged = True
            break
        if iterations == max_iter:
            break
        step = solve_psd(state.hessian_lead(), -grad)
        accepted = False
        tau = 1.0
        for _ in range(max_halvings + 1):
            candidate = beta + tau * step
            cand_value = qif_value(sample, candidate)
            if cand_value <= value + 1e-12 * (1.0 + abs(value)):
                accepted = True
                break
            tau *= 0.5
        if not accepted:
            break
        step_norm = float(np.max(np.abs(tau * step)))
        beta = candidate
        state = evaluate_state(sample, beta)
        value = state.value
        grad = state.gradient()
        trace.append((value, step_norm))
        if step_norm <= step_tol:
            converged = True
            iterations += 1
            break

    gnorm = float(np.max(np.abs(grad)))
    return FitResult(
        beta_hat=beta,
        objective=value,
        iterations=iterations,
        converged=converged or gnorm <= grad_tol * (1.0 + abs(value)),
        grad_norm=gnorm,
        active_set=active_indices(beta),
        trace=trace,
        diagnostics={"ridge": state.ridge},
    )
