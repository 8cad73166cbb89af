"""Penalized second-order estimating equations for clustered binary data.

Simultaneous variable selection and estimation for marginal-mean (logit) and
pairwise-association (log odds-ratio) regression models, via a hierarchical
two-stage penalized solver with SCAD or LASSO penalties, score-based
information criteria for tuning, and penalized-sandwich standard errors."""

from .alr import ALRResult, FitDiagnostics, fit_alr
from .data import ClusterData, Dataset, Params
from .errors import (
    ConfigError,
    ConvergenceError,
    DataFormatError,
    Hpgee2Error,
    LinearAlgebraError,
    NumericalDomainError,
    StructuralError,
)
from .io import load_dataset, report_fit, report_fit_csv, write_dataset
from .model import (
    compute_moments,
    conditional_mean_zeta,
    marginal_mean,
    pairwise_odds_ratio,
    solve_pair_prob,
)
from .penalty import PenaltyConfig, lqa_weight, penalty_derivative, soft_threshold
from .simulate import (
    CovariateLaw,
    SelectionMetrics,
    StudyConfig,
    bahadur_pmf,
    replicate_study,
    rho_from_pair,
    sample_cluster,
    simulate_dataset,
)
from .solver import (
    AnalysisMode,
    FitResult,
    StageResult,
    cd_penalized_wls,
    fit_hpgee2,
    penalized_assoc_stage,
    penalized_mean_stage,
    working_response,
)
from .scores import (
    HessianBlocks,
    ScorePair,
    assoc_score,
    hessian_blocks,
    mean_score,
    score_pair,
    zeta_jacobians,
)
from .tuning import (
    SandwichCovariance,
    TuningReport,
    bic_assoc,
    bic_joint,
    bic_mean,
    grid_search,
    log_grid,
    sandwich_covariance,
)

__version__ = "0.1.0"

__all__ = [
    "ALRResult",
    "AnalysisMode",
    "ClusterData",
    "ConfigError",
    "ConvergenceError",
    "CovariateLaw",
    "DataFormatError",
    "Dataset",
    "FitDiagnostics",
    "FitResult",
    "HessianBlocks",
    "Hpgee2Error",
    "LinearAlgebraError",
    "NumericalDomainError",
    "Params",
    "PenaltyConfig",
    "SandwichCovariance",
    "ScorePair",
    "SelectionMetrics",
    "StageResult",
    "StructuralError",
    "StudyConfig",
    "TuningReport",
    "assoc_score",
    "bahadur_pmf",
    "bic_assoc",
    "bic_joint",
    "bic_mean",
    "cd_penalized_wls",
    "compute_moments",
    "conditional_mean_zeta",
    "fit_alr",
    "fit_hpgee2",
    "grid_search",
    "hessian_blocks",
    "load_dataset",
    "log_grid",
    "lqa_weight",
    "marginal_mean",
    "mean_score",
    "pairwise_odds_ratio",
    "penalized_assoc_stage",
    "penalized_mean_stage",
    "penalty_derivative",
    "replicate_study",
    "report_fit",
    "report_fit_csv",
    "rho_from_pair",
    "sample_cluster",
    "sandwich_covariance",
    "score_pair",
    "simulate_dataset",
    "soft_threshold",
    "solve_pair_prob",
    "working_response",
    "write_dataset",
    "zeta_jacobians",
]
