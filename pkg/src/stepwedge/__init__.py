"""Stepped-wedge trial simulation, mixed-model fitting and cluster-robust variance estimation."""
from .design import Design, FixedEffects, build_standard_design, design_row, exposure_time
from .errors import *  # noqa: F401,F403
from .fitting import FittedModel, Linearization, fit, fit_glmm_logistic, fit_lmm, linearize
from .harness import (
    NOT_APPLICABLE,
    ReplicationRecord,
    SimulationSummary,
    bias_percent,
    coverage_percent,
    run_scenario,
    sparsity_profile,
)
from .inference import EstimandRow, contrast_exposure, contrast_lte, contrast_tate, infer, report
from .sandwich import ClusterBlocks, VarianceEstimate, classic, estimate_all, kc, mbn, md, model_based
from .simulate import (
    Dataset,
    ScenarioConfig,
    effect_profile_linear,
    make_stream,
    simulate,
    simulate_binary,
    simulate_continuous,
    table1_scenario,
    true_estimands,
)
from .structures import (
    IccSummary,
    RandomStructure,
    ar1_matrix,
    icc_summary,
    marginal_covariance,
    random_effect_covariance,
)

__version__ = "0.1.0"
