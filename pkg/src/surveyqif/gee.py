"""Survey-weighted GEE baseline, plain and SCAD-penalized.

The estimating function is the weighted quasi-score with a working
correlation R(alpha); alpha is a nuisance handled by a weighted moment
estimator on Pearson residuals.  The penalized variant reuses the LQA
update of the QIF path, and its tuning criterion replaces Q_n with the
weighted quadratic form of the GEE score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .correlation import AR1, EXCHANGEABLE, INDEPENDENCE, CorrelationStructure, working_correlation
from .errors import ContractError, NumericDomainError, SingularMatrixError
from .model import BERNOULLI_LOGIT, link_inverse
from .penalized import PenalizedFitConfig, wbic
from .qif import RIDGE_REL, FitResult, SurveySample, active_indices, solve_psd
from .scad import lqa_weights, scad_value

ALPHA_MAX = 0.95  # keeps R(alpha) well-conditioned


@dataclass
class GeeConfig:
    structure: CorrelationStructure
    max_iter: int = 100
    tol: float = 1e-8
    alpha_update: str = "moment"      # "moment" or "fixed"
    alpha_fixed: float = 0.0

    def __post_init__(self):
        if self.max_iter < 1 or self.tol <= 0.0:
            raise ContractError("GEE iteration limits must be positive")
        if self.alpha_update not in ("moment", "fixed"):
            raise ContractError(f"unknown alpha update rule: {self.alpha_update!r}")


def _link_terms(sample: SurveySample, beta):
    if sample.model.family != BERNOULLI_LOGIT:
        raise ContractError(f"unsupported family {sample.model.family!r}")
    beta = np.asarray(beta, dtype=float)
    Y, X, _ = sample.arrays()
    if beta.shape != (X.shape[2],):
        raise ContractError(f"beta has shape {beta.shape}, expected ({X.shape[2]},)")
    mu = link_inverse(X @ beta)
    var = mu * (1.0 - mu)
    s = np.sqrt(sample.model.dispersion * var)
    u = (Y - mu) / s
    P = (var / s)[:, :, None] * X
    return u, P


def _correlation_inverse(structure: CorrelationStructure, alpha: float) -> np.ndarray:
    R = working_correlation(structure, alpha)
    try:
        return np.linalg.inv(R)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"working correlation R({alpha}) singular: {exc}") from exc


def _score_from_terms(u, P, w, Rinv) -> np.ndarray:
    wuR = w[:, None] * (u @ Rinv)
    d = P.shape[2]
    return wuR.reshape(-1) @ P.reshape(-1, d)


def _information_from_terms(P, w, Rinv) -> np.ndarray:
    RP = np.matmul(Rinv, P)
    d = P.shape[2]
    Pw = (w[:, None, None] * P).reshape(-1, d)
    H = Pw.T @ RP.reshape(-1, d)
    return 0.5 * (H + H.T)


def gee_score(sample: SurveySample, beta, alpha: float,
              structure: CorrelationStructure) -> np.ndarray:
    """Weighted GEE estimating function sum_i w_i J' A^{-1/2} R^{-1} A^{-1/2} (y - mu)."""
    u, P = _link_terms(sample, beta)
    Rinv = _correlation_inverse(structure, alpha)
    return _score_from_terms(u, P, sample.weights, Rinv)


def gee_information(sample: SurveySample, beta, alpha: float,
                    structure: CorrelationStructure) -> np.ndarray:
    """Fisher information analogue sum_i w_i J' A^{-1/2} R^{-1} A^{-1/2} J."""
    u, P = _link_terms(sample, beta)
    Rinv = _correlation_inverse(structure, alpha)
    return _information_from_terms(P, sample.weights, Rinv)


def _alpha_from_residuals(u: np.ndarray, w: np.ndarray, kind: str) -> float:
    m = u.shape[1]
    if m < 2:
        raise ContractError("alpha estimation needs at least 2 observations per cluster")
    if kind == EXCHANGEABLE:
        tot = u.sum(axis=1)
        pair_mean = (tot ** 2 - (u ** 2).sum(axis=1)) / (m * (m - 1.0))
    else:
        pair_mean = (u[:, :-1] * u[:, 1:]).sum(axis=1) / (m - 1.0)
    obs_mean = (u ** 2).sum(axis=1) / m
    denom = float(w @ obs_mean)
    if denom <= 0.0:
        raise NumericDomainError("degenerate residuals in alpha estimation")
    return float(np.clip((w @ pair_mean) / denom, 0.0, ALPHA_MAX))


def estimate_alpha(sample: SurveySample, beta, structure: CorrelationStructure) -> float:
    """Weighted moment estimator of the working-correlation parameter.

    Exchangeable averages Pearson-residual products over all pairs l != r,
    AR(1) over lag-1 pairs; both are normalized by the weighted mean
    squared residual and clamped to [0, ALPHA_MAX].
    """
    if structure.kind not in (EXCHANGEABLE, AR1):
        raise ContractError("alpha estimation applies to exchangeable/ar1 only")
    u, _ = _link_terms(sample, beta)
    return _alpha_from_residuals(u, sample.weights, structure.kind)


def _current_alpha(u: np.ndarray, w: np.ndarray, config: GeeConfig) -> float:
    if config.structure.kind == INDEPENDENCE:
        return 0.0
    if config.alpha_update == "fixed":
        return config.alpha_fixed
    return _alpha_from_residuals(u, w, config.structure.kind)


def _quadratic_form_from_terms(u, P, w, Rinv, n: int, N: int) -> float:
    scores = np.matmul((u @ Rinv)[:, None, :], P)[:, 0, :]   # (n, d) per-cluster scores
    invN = 1.0 / float(N)
    ghat = invN * (w @ scores)
    V = invN * ((w[:, None] * scores).T @ scores)
    V = 0.5 * (V + V.T)
    eps = max(RIDGE_REL * np.trace(V) / V.shape[0], RIDGE_REL)
    z = np.linalg.solve(V + eps * np.eye(V.shape[0]), ghat)
    return float(max(n * (ghat @ z), 0.0))


def _gee_quadratic_form(sample: SurveySample, beta, alpha: float,
                        structure: CorrelationStructure) -> float:
    """n ghat' Vhat^{-1} ghat with the same 1/N scaling as the QIF pieces."""
    u, P = _link_terms(sample, beta)
    Rinv = _correlation_inverse(structure, alpha)
    return _quadratic_form_from_terms(u, P, sample.weights, Rinv, sample.n, sample.N)


def fit_gee(sample: SurveySample, config: GeeConfig, init=None) -> FitResult:
    """Fisher scoring for the weighted GEE, alternating with alpha updates."""
    d = sample.d
    beta = np.zeros(d) if init is None else np.asarray(init, float).copy()
    if beta.shape != (d,):
        raise ContractError(f"init has shape {beta.shape}, expected ({d},)")

    w = sample.weights
    trace = []
    converged = False
    iterations = 0
    alpha = 0.0
    u, P = _link_terms(sample, beta)
    for iterations in range(1, config.max_iter + 1):
        alpha = _current_alpha(u, w, config)
        Rinv = _correlation_inverse(config.structure, alpha)
        g = _score_from_terms(u, P, w, Rinv)
        H = _information_from_terms(P, w, Rinv)
        step = solve_psd(H, g)
        gnorm = np.linalg.norm(g)
        tau = 1.0
        for _ in range(20):
            candidate = beta + tau * step
            u_new, P_new = _link_terms(sample, candidate)
            g_new = _score_from_terms(u_new, P_new, w, Rinv)
            if np.linalg.norm(g_new) <= gnorm * (1.0 + 1e-10) or tau < 1e-4:
                break
            tau *= 0.5
        step_norm = float(np.max(np.abs(tau * step)))
        beta = candidate
        u, P = u_new, P_new
        if not np.all(np.isfinite(beta)):
            raise NumericDomainError("GEE iteration diverged to nonfinite values")
        trace.append((float(np.linalg.norm(g_new)), step_norm))
        if step_norm <= config.tol:
            converged = True
            break

    alpha = _current_alpha(u, w, config)
    Rinv = _correlation_inverse(config.structure, alpha)
    g = _score_from_terms(u, P, w, Rinv)
    return FitResult(
        beta_hat=beta,
        objective=_quadratic_form_from_terms(u, P, w, Rinv, sample.n, sample.N),
        iterations=iterations,
        converged=converged,
        grad_norm=float(np.max(np.abs(g))),
        active_set=active_indices(beta),
        trace=trace,
        diagnostics={"alpha": alpha},
    )


def fit_penalized_gee(sample: SurveySample, lam: float, config: GeeConfig, init, *,
                      path_config: Optional[PenalizedFitConfig] = None) -> FitResult:
    """SCAD-penalized weighted GEE via the LQA update on the active set.

    beta1 <- beta1 - [H1 + n Gamma]^{-1} [-g1 + n Gamma beta1], with alpha
    re-estimated each outer iteration and pruning at the zero threshold
    (pruned coordinates stay out for this fit).
    """
    path_config = path_config or PenalizedFitConfig()
    spec = path_config.penalty(lam)
    d = sample.d
    n = sample.n
    beta = np.asarray(init, dtype=float).copy()
    if beta.shape != (d,):
        raise ContractError(f"init has shape {beta.shape}, expected ({d},)")

    thr = spec.zero_threshold
    alive = np.abs(beta) >= thr
    beta[~alive] = 0.0

    w = sample.weights
    trace = []
    converged = False
    iterations = 0
    resid_norm = 0.0
    u, P = _link_terms(sample, beta)
    for iterations in range(1, path_config.max_outer + 1):
        active = np.flatnonzero(alive)
        if active.size == 0:
            beta = np.zeros(d)
            u, P = _link_terms(sample, beta)
            converged = True
            resid_norm = 0.0
            break
        alpha = _current_alpha(u, w, config)
        Rinv = _correlation_inverse(config.structure, alpha)
        g = _score_from_terms(u, P, w, Rinv)
        H = _information_from_terms(P, w, Rinv)
        gamma = lqa_weights(beta[active], spec)
        M = H[np.ix_(active, active)] + n * np.diag(gamma)
        rhs = -g[active] + n * gamma * beta[active]
        resid_norm = float(np.max(np.abs(rhs)))
        step = -solve_psd(M, rhs)
        beta[active] += step
        if not np.all(np.isfinite(beta)):
            raise NumericDomainError("penalized GEE iteration diverged")
        step_norm = float(np.max(np.abs(step)))
        trace.append((resid_norm, step_norm))
        newly_dead = alive & (np.abs(beta) < thr)
        beta[newly_dead] = 0.0
        alive &= ~newly_dead
        u, P = _link_terms(sample, beta)
        if step_norm <= path_config.tol and not np.any(newly_dead):
            converged = True
            break

    alpha = _current_alpha(u, w, config)
    Rinv = _correlation_inverse(config.structure, alpha)
    qg = _quadratic_form_from_terms(u, P, w, Rinv, sample.n, sample.N)
    penalty = n * float(np.sum(scad_value(np.abs(beta), spec)))
    return FitResult(
        beta_hat=beta,
        objective=qg + penalty,
        iterations=iterations,
        converged=converged,
        grad_norm=resid_norm,
        active_set=active_indices(beta, thr),
        trace=trace,
        diagnostics={"lambda": lam, "alpha": alpha, "quadratic_form": qg},
    )


def lambda_max_gee(sample: SurveySample, config: GeeConfig, init, *,
                   path_config: Optional[PenalizedFitConfig] = None,
                   rel_tol: float = 5e-2) -> float:
    """Smallest lambda zeroing every coefficient of the penalized GEE.

    Probe fits run at a relaxed step tolerance, as for the QIF path anchor.
    """
    path_config = path_config or PenalizedFitConfig()
    probe_config = replace(path_config, tol=max(path_config.tol, 1e-4))

    def all_zero(lam: float) -> bool:
        return fit_penalized_gee(sample, lam, config, init,
                                 path_config=probe_config).active_set.size == 0

    hi = 1.0
    for _ in range(60):
        if all_zero(hi):
            break
        hi *= 2.0
    else:
        raise SingularMatrixError("no lambda zeroing the penalized GEE up to 2^60")
    lo = 0.0
    while hi - lo > rel_tol * hi and hi > 1e-12:
        mid = 0.5 * (lo + hi)
        if all_zero(mid):
            hi = mid
        else:
            lo = mid
    return max(hi, 1e-12)


def select_lambda_gee(sample: SurveySample, config: GeeConfig,
                      path_config: Optional[PenalizedFitConfig] = None,
                      init: Optional[np.ndarray] = None):
    """WBIC tuning for the penalized GEE with the quadratic score form.

    Same mechanics as the QIF path: descending grid from the bisection
    lambda_max, warm starts with re-seeding of pruned coordinates, ties
    broken toward the larger lambda.
    """
    path_config = path_config or PenalizedFitConfig()
    if init is None:
        unpen = fit_gee(sample, config).beta_hat
    else:
        unpen = np.asarray(init, dtype=float)

    if path_config.lambda_grid is not None:
        grid = path_config.lambda_grid
    else:
        lam_hi = lambda_max_gee(sample, config, unpen, path_config=path_config)
        grid = np.geomspace(lam_hi, lam_hi / path_config.grid_ratio, path_config.grid_size)

    grid_config = replace(path_config, tol=max(path_config.tol, 1e-4))
    thr = path_config.zero_threshold
    best_lam, best_fit, best_crit = None, None, math.inf
    prev = unpen.copy()
    for lam in grid:
        start = np.where(np.abs(prev) >= thr, prev, unpen)
        fit = fit_penalized_gee(sample, float(lam), config, start, path_config=grid_config)
        crit = wbic(fit.diagnostics["quadratic_form"], sample.n, int(fit.active_set.size))
        if crit < best_crit:
            best_lam, best_fit, best_crit = float(lam), fit, crit
        prev = fit.beta_hat
    refit = fit_penalized_gee(sample, best_lam, config, best_fit.beta_hat,
                              path_config=path_config)
    return best_lam, refit
