"""Penalized survey-weighted QIF estimation.

Implements the local-quadratic-approximation Newton loop for the SCAD
penalty, the WBIC-based regularization path, the plug-in sandwich
variance for the active block, and the rescaling-bootstrap one-step
variance estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ContractError, SingularMatrixError
from .qif import (
    RIDGE_REL,
    FitResult,
    QifState,
    SurveySample,
    active_indices,
    evaluate_state,
    fit_qif,
    qif_value,
    solve_psd,
)
from .scad import PenaltySpec, lqa_weights, scad_second_derivative, scad_value

DEFAULT_GRID_SIZE = 25
DEFAULT_GRID_RATIO = 100.0


@dataclass
class PenalizedFitConfig:
    """Path configuration: grid (None means auto), SCAD template, loop limits."""

    lambda_grid: Optional[np.ndarray] = None   # descending when given
    a: float = 3.7
    zero_threshold: float = 1e-3
    grid_size: int = DEFAULT_GRID_SIZE
    grid_ratio: float = DEFAULT_GRID_RATIO
    max_outer: int = 30
    tol: float = 1e-6

    def __post_init__(self):
        if self.lambda_grid is not None:
            grid = np.asarray(self.lambda_grid, dtype=float)
            if grid.size == 0:
                raise ContractError("lambda grid must be nonempty")
            if np.any(grid <= 0.0):
                raise ContractError("lambda grid entries must be positive")
            if np.any(np.diff(grid) > 0):
                raise ContractError("lambda grid must be descending")
            self.lambda_grid = grid
        if self.grid_size < 1 or self.grid_ratio <= 1.0:
            raise ContractError("grid size must be >= 1 and ratio > 1")
        if self.max_outer < 1 or self.tol <= 0.0:
            raise ContractError("loop limits must be positive")

    def penalty(self, lam: float) -> PenaltySpec:
        return PenaltySpec(lam=lam, a=self.a, zero_threshold=self.zero_threshold)


@dataclass(frozen=True)
class BootstrapPlan:
    """Rescaling bootstrap: B replicates of size n-1, streams keyed by (seed, b)."""

    B: int
    seed: int

    def __post_init__(self):
        if self.B < 1:
            raise ContractError("bootstrap replicate count must be >= 1")


def penalized_objective(sample: SurveySample, beta, spec: PenaltySpec) -> float:
    """Q_n(beta) + n * sum_k p_lambda(|beta_k|)."""
    beta = np.asarray(beta, dtype=float)
    return qif_value(sample, beta) + sample.n * float(np.sum(scad_value(np.abs(beta), spec)))


def _penalty_sum(beta, spec: PenaltySpec) -> float:
    return float(np.sum(scad_value(np.abs(beta), spec)))


def fit_penalized(sample: SurveySample, lam: float, init, *,
                  config: Optional[PenalizedFitConfig] = None) -> FitResult:
    """SCAD-penalized QIF fit by LQA Newton-Raphson on the active set.

    Coordinates falling below the zero threshold are pruned and stay out
    for the remainder of this fit; steps are halved until the penalized
    objective does not increase.  An empty active set is a valid outcome
    (the all-zero fit), not an error.
    """
    config = config or PenalizedFitConfig()
    spec = config.penalty(lam)
    d = sample.d
    n = sample.n
    beta = np.asarray(init, dtype=float).copy()
    if beta.shape != (d,):
        raise ContractError(f"init has shape {beta.shape}, expected ({d},)")

    thr = spec.zero_threshold
    alive = np.abs(beta) >= thr
    beta[~alive] = 0.0

    trace = []
    converged = False
    iterations = 0
    resid_norm = 0.0
    for iterations in range(1, config.max_outer + 1):
        active = np.flatnonzero(alive)
        if active.size == 0:
            beta = np.zeros(d)
            converged = True
            resid_norm = 0.0
            break
        state = evaluate_state(sample, beta)
        value = state.value
        pvalue = value + n * _penalty_sum(beta, spec)
        grad = state.gradient()
        H = state.hessian_lead()
        gamma = lqa_weights(beta[active], spec)
        H1 = H[np.ix_(active, active)] + n * np.diag(gamma)
        rhs = grad[active] + n * gamma * beta[active]
        resid_norm = float(np.max(np.abs(rhs)))
        step = solve_psd(H1, -rhs)

        accepted = False
        tau = 1.0
        for _ in range(31):
            candidate = beta.copy()
            candidate[active] = beta[active] + tau * step
            cand_p = qif_value(sample, candidate) + n * _penalty_sum(candidate, spec)
            if cand_p <= pvalue + 1e-12 * (1.0 + abs(pvalue)):
                accepted = True
                break
            tau *= 0.5
        if not accepted:
            converged = float(np.max(np.abs(step))) <= config.tol
            break

        step_norm = float(np.max(np.abs(tau * step)))
        beta = candidate
        trace.append((cand_p, step_norm))
        newly_dead = alive & (np.abs(beta) < thr)
        beta[newly_dead] = 0.0
        alive &= ~newly_dead
        pruned = bool(np.any(newly_dead))
        if step_norm <= config.tol and not pruned:
            converged = True
            break

    final_state = evaluate_state(sample, beta, derivatives=False)
    objective = final_state.value + n * _penalty_sum(beta, spec)
    return FitResult(
        beta_hat=beta,
        objective=objective,
        iterations=iterations,
        converged=converged,
        grad_norm=resid_norm,  # penalized stationarity residual at the last Newton system
        active_set=active_indices(beta, thr),
        trace=trace,
        diagnostics={"lambda": lam, "qif_value": final_state.value},
    )


# ---------------------------------------------------------------------------
# Regularization path and WBIC tuning
# ---------------------------------------------------------------------------


def wbic(qif_at_fit: float, n: int, df: int) -> float:
    """Information criterion Q_n(beta) + log(n) * df."""
    return qif_at_fit + math.log(n) * df


def lambda_max(sample: SurveySample, init, *, config: Optional[PenalizedFitConfig] = None,
               rel_tol: float = 5e-2) -> float:
    """Smallest lambda that zeroes every coefficient, found by bisection.

    Probe fits run at a relaxed step tolerance; only the zero/nonzero
    outcome matters for the path anchor.
    """
    config = config or PenalizedFitConfig()
    probe_config = replace(config, tol=max(config.tol, 1e-4))

    def all_zero(lam: float) -> bool:
        return fit_penalized(sample, lam, init, config=probe_config).active_set.size == 0

    hi = 1.0
    for _ in range(60):
        if all_zero(hi):
            break
        hi *= 2.0
    else:
        raise SingularMatrixError("no lambda zeroing all coefficients up to 2^60")
    lo = 0.0
    # the floor guards the degenerate case of an all-zero unpenalized fit
    while hi - lo > rel_tol * hi and hi > 1e-12:
        mid = 0.5 * (lo + hi)
        if all_zero(mid):
            hi = mid
        else:
            lo = mid
    return max(hi, 1e-12)


@dataclass
class PathPoint:
    lam: float
    fit: FitResult
    wbic: float
    df: int


def lambda_path(sample: SurveySample, config: Optional[PenalizedFitConfig] = None,
                init: Optional[np.ndarray] = None) -> list[PathPoint]:
    """Fit the descending lambda grid with warm starts; return per-lambda results.

    Coordinates pruned at the previous grid point are re-seeded from the
    unpenalized fit so they may re-enter as lambda decreases (within one
    fit, pruning is final).  Grid fits run at a step tolerance of at most
    1e-4; select_lambda refits the winner at the configured tolerance.
    """
    config = config or PenalizedFitConfig()
    if init is None:
        unpen = fit_qif(sample).beta_hat
    else:
        unpen = np.asarray(init, dtype=float)

    if config.lambda_grid is not None:
        grid = config.lambda_grid
    else:
        lam_hi = lambda_max(sample, unpen, config=config)
        grid = np.geomspace(lam_hi, lam_hi / config.grid_ratio, config.grid_size)

    grid_config = replace(config, tol=max(config.tol, 1e-4))
    points = []
    prev = unpen.copy()
    thr = config.zero_threshold
    for lam in grid:
        start = np.where(np.abs(prev) >= thr, prev, unpen)
        fit = fit_penalized(sample, float(lam), start, config=grid_config)
        df = int(fit.active_set.size)
        q_at_fit = fit.diagnostics["qif_value"]
        points.append(PathPoint(lam=float(lam), fit=fit,
                                wbic=wbic(q_at_fit, sample.n, df), df=df))
        prev = fit.beta_hat
    return points


def select_lambda(sample: SurveySample, config: Optional[PenalizedFitConfig] = None,
                  init: Optional[np.ndarray] = None):
    """WBIC-minimizing lambda and its fit; ties break toward the larger lambda.

    The winning grid point is refit at the configured (tight) tolerance,
    warm-started from its own path estimate.
    """
    config = config or PenalizedFitConfig()
    points = lambda_path(sample, config, init)
    best = points[0]
    for p in points[1:]:
        if p.wbic < best.wbic:
            best = p
    refit = fit_penalized(sample, best.lam, best.fit.beta_hat, config=config)
    return best.lam, refit


# ---------------------------------------------------------------------------
# Variance estimation
# ---------------------------------------------------------------------------


def _block_indices(active: np.ndarray, d: int, L: int) -> np.ndarray:
    """Stacked-score row indices eta*d + k for k active, eta = 0..L-1."""
    return np.concatenate([eta * d + active for eta in range(L)])


def score_variance_estimate(state: QifState, sample: SurveySample) -> np.ndarray:
    """With-replacement estimator of Var(sqrt(n) q_n) from per-cluster scores.

    (n/(n-1)) * sum_i (w_i q_i / N - q_n / n)(...)' scaled by n, which for
    equal weights reduces to the sample covariance of the q_i.
    """
    n = sample.n
    w = sample.weights
    terms = (w[:, None] * state.scores) / float(sample.N)   # (n, Ld)
    centered = terms - state.q / n
    return (n * n / (n - 1.0)) * (centered.T @ centered) if n > 1 else np.zeros(
        (state.q.size, state.q.size))


def _solve_sub(C1: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    eps = RIDGE_REL * np.trace(C1) / C1.shape[0]
    return np.linalg.solve(C1 + max(eps, RIDGE_REL) * np.eye(C1.shape[0]), rhs)


def sandwich_variance(sample: SurveySample, fit: FitResult, spec: PenaltySpec) -> np.ndarray:
    """Plug-in variance of the active coefficients.

    n^{-1} [2 D1' C1^{-1} D1 + B]^{-1} V [same]^{-1} with
    V = 4 D1' C1^{-1} Sigma0_1 C1^{-1} D1, B the diagonal of SCAD second
    derivatives, all pieces restricted to the active rows/columns.
    """
    active = np.asarray(fit.active_set, dtype=int)
    if active.size == 0:
        raise ContractError("sandwich variance requires a nonempty active set")
    d, L, n = sample.d, sample.L, sample.n
    state = evaluate_state(sample, fit.beta_hat)
    rows = _block_indices(active, d, L)
    D1 = state.D[np.ix_(rows, active)]
    C1 = state.C[np.ix_(rows, rows)]
    Sigma1 = score_variance_estimate(state, sample)[np.ix_(rows, rows)]

    CinvD = _solve_sub(C1, D1)
    B = np.diag(scad_second_derivative(np.abs(fit.beta_hat[active]), spec))
    bracket = 2.0 * (D1.T @ CinvD) + B
    V = 4.0 * (CinvD.T @ Sigma1 @ CinvD)
    cond = np.linalg.cond(bracket)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularMatrixError(f"sandwich bracket ill-conditioned (cond={cond:.3e})")
    binv = np.linalg.inv(bracket)
    out = (binv @ V @ binv) / n
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# Rescaling bootstrap
# ---------------------------------------------------------------------------


def rescaled_bootstrap_weights(sample: SurveySample, plan: BootstrapPlan, b: int) -> np.ndarray:
    """Rescaled replicate weights w_i * (n/(n-1)) * t_i^(b).

    t_i^(b) counts unit i among n-1 equal-probability with-replacement
    draws; the stream is derived from (plan.seed, b) so replicates are
    independent of evaluation order.
    """
    n = sample.n
    if n < 2:
        raise ContractError("bootstrap requires at least two sampled clusters")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(plan.seed, b)))
    counts = np.bincount(rng.integers(0, n, size=n - 1), minlength=n).astype(float)
    return sample.weights * (n / (n - 1.0)) * counts


def bootstrap_one_step(sample: SurveySample, fit: FitResult, boot_weights,
                       spec: PenaltySpec) -> np.ndarray:
    """One Newton correction of the active block under bootstrap weights.

    Uses the LQA curvature frozen at the fitted point; no pruning, no
    iteration.  Raises SingularMatrixError when the bootstrap system is
    degenerate (the caller flags and excludes the replicate).
    """
    active = np.asarray(fit.active_set, dtype=int)
    if active.size == 0:
        raise ContractError("bootstrap one-step requires a nonempty active set")
    n = sample.n
    state = evaluate_state(sample, fit.beta_hat, weights=boot_weights)
    grad = state.gradient()
    H = state.hessian_lead()
    gamma = lqa_weights(fit.beta_hat[active], spec)
    M = H[np.ix_(active, active)] + n * np.diag(gamma)
    rhs = grad[active] + n * gamma * fit.beta_hat[active]
    try:
        cho = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"bootstrap Hessian not positive definite: {exc}") from exc
    delta = np.linalg.solve(cho.T, np.linalg.solve(cho, rhs))
    return fit.beta_hat[active] - delta


@dataclass
class BootstrapVariance:
    """Average outer product of replicate deviations plus bookkeeping."""

    covariance: np.ndarray
    b_effective: int
    b_excluded: int
    replicates: Optional[np.ndarray] = field(default=None, repr=False)


def bootstrap_variance(sample: SurveySample, fit: FitResult, plan: BootstrapPlan,
                       spec: PenaltySpec, keep_replicates: bool = False) -> BootstrapVariance:
    """Bootstrap variance of the active block over plan.B one-step replicates."""
    if plan.B < 2:
        raise ContractError("bootstrap variance requires B >= 2")
    active = np.asarray(fit.active_set, dtype=int)
    center = fit.beta_hat[active]
    reps = []
    excluded = 0
    for b in range(1, plan.B + 1):
        w_b = rescaled_bootstrap_weights(sample, plan, b)
        try:
            reps.append(bootstrap_one_step(sample, fit, w_b, spec))
        except SingularMatrixError:
            excluded += 1
    if len(reps) < 2:
        raise SingularMatrixError(
            f"fewer than 2 valid bootstrap replicates ({excluded} excluded)")
    reps = np.asarray(reps)
    dev = reps - center
    cov = dev.T @ dev / len(reps)
    return BootstrapVariance(covariance=0.5 * (cov + cov.T), b_effective=len(reps),
                             b_excluded=excluded,
                             replicates=reps if keep_replicates else None)
