"""Finite-population generation, PPS sampling and the Monte Carlo lab.

Populations carry correlated binary responses built through a Gaussian
copula whose latent correlation is calibrated per pair so the binary
Pearson correlation hits the configured target exactly.  Samples are
drawn with probability proportional to size, with replacement, using
per-draw Hansen-Hurwitz weights.  Campaigns run the competing estimators
replicate by replicate with independent seeded streams and aggregate the
selection/accuracy metrics.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri, owens_t

from .correlation import AR1, EXCHANGEABLE, CorrelationStructure, basis_matrices
from .errors import CampaignError, ContractError, NumericDomainError
from .gee import GeeConfig, select_lambda_gee
from .model import ClusterRecord, MarginalModel, link_inverse
from .penalized import (
    BootstrapPlan,
    PenalizedFitConfig,
    bootstrap_variance,
    select_lambda,
)
from .qif import ZERO_THRESHOLD, SurveySample, fit_qif, with_basis

MAD_CONSTANT = 0.6745  # normal-consistency divisor for median absolute deviations

METHOD_PQIF = "pqif"
METHOD_PGEE = "pgee"
METHOD_UNWGT = "unwgt"
METHOD_ORACLE = "oracle"
ALL_METHODS = (METHOD_UNWGT, METHOD_PQIF, METHOD_PGEE, METHOD_ORACLE)


# ---------------------------------------------------------------------------
# Bivariate normal CDF and latent-correlation calibration
# ---------------------------------------------------------------------------


def bvn_cdf(h, k, rho):
    """P(Z1 <= h, Z2 <= k) for standard bivariate normal, via Owen's T.

    Vectorized over all arguments.  Inputs with |h| or |k| below 1e-10 are
    nudged off zero (the formula's axis case), which perturbs the result
    by less than 1e-10.
    """
    h = np.where(np.abs(h) < 1e-10, 1e-10, np.asarray(h, dtype=float))
    k = np.where(np.abs(k) < 1e-10, 1e-10, np.asarray(k, dtype=float))
    rho = np.clip(np.asarray(rho, dtype=float), -0.99999, 0.99999)
    denom = np.sqrt(1.0 - rho * rho)
    a_h = (k - rho * h) / (h * denom)
    a_k = (h - rho * k) / (k * denom)
    out = 0.5 * (ndtr(h) + ndtr(k)) - owens_t(h, a_h) - owens_t(k, a_k)
    out = out - np.where(h * k < 0.0, 0.5, 0.0)
    return np.clip(out, 0.0, 1.0)


def _bvn_density(h, k, rho):
    denom = 1.0 - rho * rho
    expo = -(h * h - 2.0 * rho * h * k + k * k) / (2.0 * denom)
    return np.exp(expo) / (2.0 * math.pi * np.sqrt(denom))


def solve_latent_correlation(z1, z2, p11, *, max_iter: int = 60,
                             tol: float = 1e-12) -> np.ndarray:
    """Latent normal correlation rho with bvn_cdf(z1, z2, rho) = p11.

    Safeguarded Newton (bisection fallback) on the bracket (-1, 1);
    vectorized over all pairs.  Callers must have checked feasibility.
    """
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    p11 = np.asarray(p11, dtype=float)
    lo = np.full_like(p11, -0.99999)
    hi = np.full_like(p11, 0.99999)
    rho = np.zeros_like(p11)
    active = np.ones(p11.shape, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        f = bvn_cdf(z1[idx], z2[idx], rho[idx]) - p11[idx]
        done = np.abs(f) < tol
        if np.any(done):
            active[idx[done]] = False
            idx = idx[~done]
            if idx.size == 0:
                continue
            f = f[~done]
        sub_lo = lo[idx]
        sub_hi = hi[idx]
        sub_rho = rho[idx]
        pos = f > 0.0
        sub_hi = np.where(pos, sub_rho, sub_hi)
        sub_lo = np.where(pos, sub_lo, sub_rho)
        cand = sub_rho - f / _bvn_density(z1[idx], z2[idx], sub_rho)
        outside = (cand <= sub_lo) | (cand >= sub_hi)
        cand = np.where(outside, 0.5 * (sub_lo + sub_hi), cand)
        lo[idx] = sub_lo
        hi[idx] = sub_hi
        rho[idx] = cand
        collapsed = sub_hi - sub_lo < 1e-13
        active[idx[collapsed]] = False
    return rho


# ---------------------------------------------------------------------------
# Population and sampling
# ---------------------------------------------------------------------------


@dataclass
class PopulationConfig:
    N: int = 10_000
    m: int = 5
    d: int = 10
    beta0: np.ndarray = field(default_factory=lambda: np.array(
        [0.8, -0.7, -0.6, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]))
    alpha_true: float = 0.4
    covariate_range: tuple = (0.0, 0.8)

    def __post_init__(self):
        self.beta0 = np.asarray(self.beta0, dtype=float)
        if self.N < 1 or self.m < 1 or self.d < 1:
            raise ContractError("population dimensions must be positive")
        if self.beta0.shape != (self.d,):
            raise ContractError(f"beta0 must have length d={self.d}")
        if not (0.0 <= self.alpha_true < 1.0):
            raise ContractError("alpha_true must lie in [0, 1)")
        lo, hi = self.covariate_range
        if not lo < hi:
            raise ContractError("covariate range must be a nonempty interval")

    @property
    def d1(self) -> int:
        return int(np.count_nonzero(self.beta0))


@dataclass
class FinitePopulation:
    """Stacked cluster arrays plus the PPS size measures z_i = sum_j y_ij + 1."""

    Y: np.ndarray          # (N, m) binary responses
    X: np.ndarray          # (N, m, d)
    sizes: np.ndarray      # (N,) integer size measures
    config: PopulationConfig

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    def cluster(self, i: int, w: float = 1.0) -> ClusterRecord:
        return ClusterRecord(id=int(i), y=self.Y[i], X=self.X[i], w=w)


def generate_population(cfg: PopulationConfig, rng: np.random.Generator) -> FinitePopulation:
    """Generate the finite population with copula-correlated binary responses.

    Covariate entries are i.i.d. uniform on the configured range; binary
    responses follow the marginal logistic model, with within-cluster
    Pearson correlation calibrated pair by pair to alpha_true.
    """
    N, m, d = cfg.N, cfg.m, cfg.d
    lo, hi = cfg.covariate_range
    X = rng.uniform(lo, hi, size=(N, m, d))
    mu = link_inverse(np.einsum("nmd,d->nm", X, cfg.beta0))

    if cfg.alpha_true == 0.0 or m == 1:
        Y = (rng.random((N, m)) < mu).astype(float)
    else:
        z = ndtri(mu)
        sd = np.sqrt(mu * (1.0 - mu))
        R = np.broadcast_to(np.eye(m), (N, m, m)).copy()
        for l in range(m):
            for r in range(l + 1, m):
                target = mu[:, l] * mu[:, r] + cfg.alpha_true * sd[:, l] * sd[:, r]
                lower = np.maximum(0.0, mu[:, l] + mu[:, r] - 1.0)
                upper = np.minimum(mu[:, l], mu[:, r])
                bad = (target <= lower + 1e-12) | (target >= upper - 1e-12)
                if np.any(bad):
                    i = int(np.flatnonzero(bad)[0])
                    raise NumericDomainError(
                        f"copula target infeasible for cluster {i}, occasions "
                        f"({l + 1}, {r + 1}): p11={target[i]:.6f} outside "
                        f"({lower[i]:.6f}, {upper[i]:.6f})")
                rho = solve_latent_correlation(z[:, l], z[:, r], target)
                R[:, l, r] = rho
                R[:, r, l] = rho
        L = _batched_cholesky(R)
        eps = rng.standard_normal((N, m))
        latent = np.matmul(L, eps[:, :, None])[:, :, 0]
        Y = (latent <= z).astype(float)

    sizes = Y.sum(axis=1).astype(int) + 1
    return FinitePopulation(Y=Y, X=X, sizes=sizes, config=cfg)


def _batched_cholesky(R: np.ndarray) -> np.ndarray:
    """Cholesky of each latent correlation; eigen-clip any non-PD stragglers."""
    try:
        return np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        pass
    vals, vecs = np.linalg.eigh(R)
    vals = np.clip(vals, 1e-10, None)
    fixed = vecs @ (vals[..., None] * vecs.transpose(0, 2, 1))
    diag = np.sqrt(np.einsum("nii->ni", fixed))
    fixed /= diag[:, :, None] * diag[:, None, :]
    return np.linalg.cholesky(fixed)


def draw_sample_ppswr(pop: FinitePopulation, n: int, rng: np.random.Generator,
                      model: Optional[MarginalModel] = None,
                      basis=None) -> SurveySample:
    """Draw n clusters with probability proportional to size, with replacement.

    Each draw becomes one sample unit with the Hansen-Hurwitz weight
    w = 1/(n p_i); duplicates are kept as separate units.  The returned
    sample carries the independence basis unless another is supplied.
    """
    if n < 1:
        raise ContractError("sample size must be >= 1")
    model = model or MarginalModel()
    if basis is None:
        basis = basis_matrices(CorrelationStructure("independence", pop.Y.shape[1]))
    p = pop.sizes / float(pop.sizes.sum())
    idx = rng.choice(pop.N, size=n, replace=True, p=p)
    weights = 1.0 / (n * p[idx])
    clusters = [ClusterRecord(id=int(i), y=pop.Y[i], X=pop.X[i], w=float(w))
                for i, w in zip(idx, weights)]
    return SurveySample(clusters=clusters, N=pop.N, model=model, basis=basis)


# ---------------------------------------------------------------------------
# Selection and accuracy metrics
# ---------------------------------------------------------------------------


def classify_selection(estimate, d1: int, threshold: float = ZERO_THRESHOLD) -> str:
    """'C' when exactly the first d1 coefficients are active, 'U' when any
    of them is inactive (takes precedence), 'O' otherwise."""
    estimate = np.asarray(estimate, dtype=float)
    if d1 > estimate.size:
        raise ContractError("d1 exceeds the coefficient dimension")
    active = np.abs(estimate) >= threshold
    if not np.all(active[:d1]):
        return "U"
    if not np.any(active[d1:]):
        return "C"
    return "O"


def compute_mse(estimates: Sequence[np.ndarray], beta0) -> float:
    """Monte Carlo average of the squared estimation error."""
    estimates = np.asarray(estimates, dtype=float)
    if estimates.size == 0:
        raise ContractError("MSE needs at least one estimate")
    diff = estimates - np.asarray(beta0, dtype=float)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def compute_arb(estimates: Sequence[np.ndarray], beta0, k: int) -> float:
    """Absolute relative bias (percent) of coefficient k; beta0_k must be nonzero."""
    beta0 = np.asarray(beta0, dtype=float)
    if beta0[k] == 0.0:
        raise ContractError("ARB is defined for nonzero true coefficients only")
    estimates = np.asarray(estimates, dtype=float)
    return float(abs(estimates[:, k].mean() - beta0[k]) / abs(beta0[k]) * 100.0)


def _mad(x: np.ndarray) -> float:
    return float(np.median(np.abs(x - np.median(x))))


def robust_sd_suite(estimates_k, bootstrap_sds_k=None):
    """(SD, SD_m, SD_mad) for one coefficient across replicates.

    SD is the median-absolute-deviation estimate of the sampling standard
    deviation; SD_m the median of the per-replicate bootstrap standard
    deviations; SD_mad their spread around SD.  NaN bootstrap entries
    (replicates where the coefficient was inactive) are ignored.
    """
    estimates_k = np.asarray(estimates_k, dtype=float)
    if estimates_k.size < 2:
        raise ContractError("robust SD suite needs at least two replicates")
    sd = _mad(estimates_k) / MAD_CONSTANT
    if bootstrap_sds_k is None:
        return sd, float("nan"), float("nan")
    boot = np.asarray(bootstrap_sds_k, dtype=float)
    boot = boot[np.isfinite(boot)]
    if boot.size == 0:
        return sd, float("nan"), float("nan")
    sd_m = float(np.median(boot))
    sd_mad = float(np.median(np.abs(boot - sd))) / MAD_CONSTANT
    return sd, sd_m, sd_mad


# ---------------------------------------------------------------------------
# Campaign
# ---------------------------------------------------------------------------


@dataclass
class CampaignConfig:
    population: PopulationConfig = field(default_factory=PopulationConfig)
    n: int = 300
    H: int = 200
    methods: tuple = ALL_METHODS
    correlations: tuple = (EXCHANGEABLE, AR1)
    seed: int = 0
    bootstrap_B: int = 0            # 0 disables bootstrap SDs (PQIF rows only)
    path: PenalizedFitConfig = field(default_factory=PenalizedFitConfig)
    workers: int = 1
    abort_failure_fraction: float = 0.2

    def __post_init__(self):
        if self.H < 1 or self.n < 1:
            raise ContractError("H and n must be positive")
        unknown = set(self.methods) - set(ALL_METHODS)
        if unknown:
            raise ContractError(f"unknown methods: {sorted(unknown)}")
        for c in self.correlations:
            if c not in (EXCHANGEABLE, AR1):
                raise ContractError(f"unsupported campaign correlation: {c!r}")
        if self.workers < 1:
            raise ContractError("workers must be >= 1")


@dataclass
class MethodCell:
    method: str
    correlation: str
    C: float
    O: float
    U: float
    mse: float
    arb: dict
    sd: dict
    sd_m: dict
    sd_mad: dict
    H_used: int
    failures: int


@dataclass
class SimulationReport:
    n: int
    H: int
    seed: int
    population: PopulationConfig
    cells: list
    estimates: Optional[dict] = None   # (method, corr) -> (H_used, d) array


def _replicate(cfg: CampaignConfig, h: int) -> dict:
    """All methods on one fresh population/sample; exceptions per cell."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, h)))
    pop = generate_population(cfg.population, rng)
    base = draw_sample_ppswr(pop, cfg.n, rng)
    boot_seed = int(np.random.SeedSequence(entropy=(cfg.seed, h, 0xB007)).generate_state(1)[0])

    d1 = cfg.population.d1
    nonzero_idx = np.flatnonzero(cfg.population.beta0)
    out = {}
    for corr in cfg.correlations:
        structure = CorrelationStructure(corr, cfg.population.m)
        basis = basis_matrices(structure)
        sample = with_basis(base, basis)
        unpen_beta = None
        for method in cfg.methods:
            key = (method, corr)
            try:
                boot_sd = None
                if method == METHOD_PQIF:
                    if unpen_beta is None:
                        unpen_beta = fit_qif(sample).beta_hat
                    lam, fit = select_lambda(sample, cfg.path, init=unpen_beta)
                    estimate = fit.beta_hat
                    if cfg.bootstrap_B > 0 and fit.active_set.size > 0:
                        plan = BootstrapPlan(B=cfg.bootstrap_B, seed=boot_seed)
                        bv = bootstrap_variance(sample, fit, plan, cfg.path.penalty(lam))
                        boot_sd = np.full(cfg.population.d, np.nan)
                        boot_sd[fit.active_set] = np.sqrt(np.diag(bv.covariance))
                elif method == METHOD_UNWGT:
                    flat = SurveySample(
                        clusters=[ClusterRecord(id=c.id, y=c.y, X=c.X, w=1.0)
                                  for c in sample.clusters],
                        N=sample.n, model=sample.model, basis=basis)
                    _, fit = select_lambda(flat, cfg.path)
                    estimate = fit.beta_hat
                elif method == METHOD_PGEE:
                    gee_cfg = GeeConfig(structure=structure)
                    _, fit = select_lambda_gee(sample, gee_cfg, cfg.path)
                    estimate = fit.beta_hat
                elif method == METHOD_ORACLE:
                    sub = SurveySample(
                        clusters=[ClusterRecord(id=c.id, y=c.y, X=c.X[:, nonzero_idx], w=c.w)
                                  for c in sample.clusters],
                        N=sample.N, model=sample.model, basis=basis)
                    fit = fit_qif(sub)
                    estimate = np.zeros(cfg.population.d)
                    estimate[nonzero_idx] = fit.beta_hat
                out[key] = {"estimate": estimate, "boot_sd": boot_sd,
                            "classification": "C" if method == METHOD_ORACLE
                            else classify_selection(estimate, d1)}
            except Exception as exc:  # noqa: BLE001 - per-cell failure policy
                out[key] = {"error": f"{type(exc).__name__}: {exc}"}
    return out


def _replicate_star(args):
    return _replicate(*args)


def run_campaign(cfg: CampaignConfig, keep_estimates: bool = False) -> SimulationReport:
    """Run the full Monte Carlo campaign and aggregate Tables-style metrics.

    Replicate h draws all randomness from a stream keyed by (seed, h), so
    the report is identical for any worker count.  Cells whose failure
    fraction exceeds the configured limit abort the campaign.
    """
    tasks = [(cfg, h) for h in range(1, cfg.H + 1)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            per_rep = list(pool.map(_replicate_star, tasks, chunksize=1))
    else:
        per_rep = [_replicate(cfg, h) for h in range(1, cfg.H + 1)]

    beta0 = cfg.population.beta0
    nonzero_idx = [int(k) for k in np.flatnonzero(beta0)]
    cells = []
    estimates_by_cell = {}
    for corr in cfg.correlations:
        for method in cfg.methods:
            key = (method, corr)
            rows = [rep[key] for rep in per_rep if key in rep]
            failures = sum(1 for r in rows if "error" in r)
            good = [r for r in rows if "error" not in r]
            if cfg.H > 0 and failures / cfg.H > cfg.abort_failure_fraction:
                examples = [r["error"] for r in rows if "error" in r][:3]
                raise CampaignError(
                    f"{method}/{corr}: {failures}/{cfg.H} replicates failed; "
                    f"first errors: {examples}")
            if not good:
                raise CampaignError(f"{method}/{corr}: no successful replicates")
            ests = np.asarray([r["estimate"] for r in good])
            cls = [r["classification"] for r in good]
            H_used = len(good)
            pc = 100.0 / H_used
            arb = {k: compute_arb(ests, beta0, k) for k in nonzero_idx}
            sd, sd_m, sd_mad = {}, {}, {}
            has_boot = any(r.get("boot_sd") is not None for r in good)
            for k in nonzero_idx:
                boot_k = (np.asarray([r["boot_sd"][k] if r.get("boot_sd") is not None
                                      else np.nan for r in good])
                          if has_boot else None)
                sd[k], sd_m[k], sd_mad[k] = robust_sd_suite(ests[:, k], boot_k)
            cells.append(MethodCell(
                method=method, correlation=corr,
                C=pc * cls.count("C"), O=pc * cls.count("O"), U=pc * cls.count("U"),
                mse=compute_mse(ests, beta0), arb=arb,
                sd=sd, sd_m=sd_m, sd_mad=sd_mad,
                H_used=H_used, failures=failures))
            estimates_by_cell[key] = ests
    return SimulationReport(
        n=cfg.n, H=cfg.H, seed=cfg.seed, population=cfg.population, cells=cells,
        estimates=estimates_by_cell if keep_estimates else None)
