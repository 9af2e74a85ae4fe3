"""Penalized survey-weighted quadratic inference functions.

Marginal regression for longitudinal/clustered binary data collected
under complex sampling: survey-weighted QIF estimation with SCAD-based
variable selection, a weighted GEE baseline, plug-in and bootstrap
variance estimators, and a seeded Monte Carlo simulation lab.
"""

from .correlation import (
    AR1,
    EXCHANGEABLE,
    INDEPENDENCE,
    BasisSet,
    CorrelationStructure,
    basis_matrices,
    span_check,
    working_correlation,
)
from .errors import (
    CampaignError,
    ConfigError,
    ContractError,
    DataError,
    NumericDomainError,
    SingularMatrixError,
    SurveyQifError,
)
from .gee import (
    GeeConfig,
    estimate_alpha,
    fit_gee,
    fit_penalized_gee,
    gee_score,
    select_lambda_gee,
)
from .model import ClusterRecord, ClusterEvaluation, MarginalModel, evaluate_cluster, link_inverse
from .penalized import (
    BootstrapPlan,
    BootstrapVariance,
    PenalizedFitConfig,
    bootstrap_one_step,
    bootstrap_variance,
    fit_penalized,
    lambda_max,
    lambda_path,
    penalized_objective,
    rescaled_bootstrap_weights,
    sandwich_variance,
    select_lambda,
    wbic,
)
from .qif import (
    FitResult,
    QifState,
    SurveySample,
    cluster_score,
    evaluate_state,
    fit_qif,
    qif_gradient,
    qif_hessian_lead,
    qif_value,
    score_covariance,
    weighted_score,
    with_basis,
)
from .scad import PenaltySpec, lqa_weights, scad_derivative, scad_second_derivative, scad_value
from .simulate import (
    CampaignConfig,
    FinitePopulation,
    MethodCell,
    PopulationConfig,
    SimulationReport,
    bvn_cdf,
    classify_selection,
    compute_arb,
    compute_mse,
    draw_sample_ppswr,
    generate_population,
    robust_sd_suite,
    run_campaign,
    solve_latent_correlation,
)

__version__ = "0.1.0"
