"""Estimation of the probability of causation with valid inference.

The library projects the conditional "one minus risk ratio" function onto a
parametric working model, solves a nuisance-corrected moment condition for
the projection coefficients, and reports Wald intervals from a sandwich
covariance. Nuisances can be fit with parametric or nonparametric
regressors, with or without cross-fitting. A synthetic benchmark harness
verifies bias, root-n scaling, and interval coverage at desk scale.
"""

__version__ = "0.1.0"

from .data_model import (
    Dataset,
    EmptyDatasetError,
    Observation,
    PositivityError,
    PotentialOutcomeRecord,
    complete_case_filter,
    load_csv,
    validate_positivity,
    write_csv,
)
from .estimator import (
    BootstrapInstabilityError,
    InfiniteOddsError,
    NonConvergenceError,
    PcEstimate,
    ProjectionFit,
    SingularMatrixError,
    bootstrap_covariance,
    estimating_equation,
    fit_from_dict,
    fit_to_dict,
    gamma_plugin,
    influence_contribution,
    jacobian_M,
    odds_of_causation,
    odds_ratio,
    plugin_projection,
    predict_pc_with_ci,
    sandwich_covariance,
    solve_beta,
)
from .model_selection import (
    CandidateSpec,
    RiskEstimate,
    SelectionReport,
    estimate_pseudo_risk,
    pseudo_risk_contribution,
    select_model,
)
from .nuisance import (
    FoldConstructionError,
    NuisanceFit,
    RegressorSpec,
    crossfit_nuisances,
    fit_nuisances_full_sample,
    fit_regressor,
)
from .simulation import (
    DgpConfig,
    SimulationReport,
    StudyConfig,
    StudyError,
    generate,
    run_study,
    transform_covariates,
    true_gamma,
)
from .working_model import WorkingModelSpec, g_eval, g_grad, h_eval
