"""Mixed-response state-space models.

Latent-state time series driving Gaussian, Bernoulli, and Poisson
observation channels across many subjects: exact Kalman machinery for the
Gaussian part, a mode-based Gaussian approximation plus importance sampling
for the mixed likelihood, block-coordinate maximum likelihood, forecasting
and counterfactual treatment-effect prediction, and a simulation/benchmark
harness.
"""

from . import errors, io
from .families import Bernoulli, ChannelFamily, Gaussian, Poisson, family_from_name
from .lgss import (
    FilterOutput,
    GaussianSSM,
    SmootherOutput,
    collapse_gaps,
    dense_conditional_states,
    dense_joint_loglik,
    diffuse_loglik,
    gap_transition,
    kalman_filter,
    kalman_smoother,
    simulate_gssm,
)
from .mode import (
    LinearizedModel,
    MixedSSM,
    find_mode,
    linearize,
    simulate_mixed,
    state_gradient,
)
from .importance import (
    ISEstimate,
    is_loglik,
    pooled_is_loglik,
    simulation_smoother,
    subject_rng,
)
from .estimator import (
    BlockRecord,
    FitResult,
    LrtResult,
    OptimConfig,
    aic,
    cbcd_fit,
    gaussian_init,
    lrt,
    pooled_loglik,
)
from .simbench import (
    PredictionErrors,
    SimConfig,
    SimDataset,
    VarFit,
    fit_var,
    generate_dataset,
    make_sim_spec,
    natural_from_var,
    one_step_natural,
    pearson_residual_mse,
    pooled_var,
    prediction_errors,
    replicate_estimation,
    replicate_prediction,
    true_parameter_set,
    var_predict,
    var_responses,
)
from .model import (
    AssembledModel,
    ChannelSpec,
    EffectPrediction,
    Forecast,
    GroupSpec,
    MrssSpec,
    OneStepPath,
    ParameterSet,
    Scenario,
    StatePosterior,
    StateSpec,
    SubjectData,
    SubjectDesign,
    assemble_ssm,
    build_design,
    forecast,
    one_step_path,
    predicted_treatment_effect,
    smoothed_states,
)

__version__ = "0.1.0"

__all__ = [
    "errors", "io",
    "ChannelFamily", "Gaussian", "Bernoulli", "Poisson", "family_from_name",
    "GaussianSSM", "FilterOutput", "SmootherOutput",
    "kalman_filter", "kalman_smoother",
    "dense_joint_loglik", "dense_conditional_states",
    "diffuse_loglik", "gap_transition", "collapse_gaps", "simulate_gssm",
    "MixedSSM", "LinearizedModel", "find_mode", "linearize",
    "simulate_mixed", "state_gradient",
    "ISEstimate", "is_loglik", "pooled_is_loglik", "simulation_smoother",
    "subject_rng",
    "ChannelSpec", "StateSpec", "GroupSpec", "MrssSpec", "ParameterSet",
    "SubjectData", "Scenario", "SubjectDesign", "AssembledModel",
    "StatePosterior", "Forecast", "OneStepPath", "EffectPrediction",
    "build_design", "assemble_ssm", "smoothed_states", "forecast",
    "one_step_path", "predicted_treatment_effect",
    "OptimConfig", "FitResult", "BlockRecord", "LrtResult",
    "gaussian_init", "cbcd_fit", "pooled_loglik", "aic", "lrt",
    "SimConfig", "SimDataset", "VarFit", "PredictionErrors",
    "generate_dataset", "make_sim_spec", "true_parameter_set",
    "var_responses", "fit_var", "pooled_var", "var_predict",
    "natural_from_var", "one_step_natural", "prediction_errors",
    "pearson_residual_mse", "replicate_estimation", "replicate_prediction",
    "__version__",
]
