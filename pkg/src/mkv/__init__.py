"""Simulation and drift estimation for weakly interacting particle systems.

The package simulates McKean-Vlasov-type particle systems, estimates drift
parameters offline (path likelihood, closed form where available) and
online (continuous-time stochastic gradient ascent), and runs reproducible
Monte-Carlo studies over (N, T) grids.
"""

from ._version import __version__
from .errors import (
    DegenerateStatistics,
    EstimatorDiverged,
    ExclusionCapExceeded,
    OptimizerDidNotConverge,
    SimulationDiverged,
    ValidationError,
)
from .models import (
    EmpiricalMeasure,
    ModelSpec,
    Theta,
    bump_kernel,
    bump_kernel_grads,
    custom_model,
    drift_B,
    grad_theta_B,
    linear_mean_field,
    model_by_name,
    opinion_dynamics,
)
from .simulate import (
    InitialLaw,
    SimConfig,
    TrajectoryBatch,
    load_trajectory,
    save_trajectory,
    simulate_coupled_pair,
    simulate_ips,
    simulate_mv_linear,
    step_euler,
)
from .offline import (
    AscentOptions,
    FisherInfo,
    LikelihoodValue,
    NormalitySample,
    fisher_information_linear,
    log_likelihood,
    mle_linear_closed_form,
    mle_numeric,
    mle_trials_linear,
    normality_sample,
)
from .online import (
    EstimatorState,
    LearningRate,
    OnlineTrialsResult,
    Schedule,
    ThetaInit,
    asymptotic_contrast_linear,
    asymptotic_loglik_hessian_linear,
    asymptotic_loglik_ips_linear,
    ips_invariant_moments_linear,
    lr_eval,
    lyapunov_covariance_linear,
    online_step_averaged,
    online_step_per_particle,
    online_trials_linear,
    online_trials_opinion,
    run_online,
)
from .harness import (
    ExperimentConfig,
    ExperimentResult,
    export_residuals,
    export_result,
    fit_rate,
    load_config,
    load_result,
    resolve_workers,
    run_experiment,
    summarize,
)

__all__ = [
    "__version__",
    "ValidationError", "SimulationDiverged", "EstimatorDiverged",
    "DegenerateStatistics", "OptimizerDidNotConverge", "ExclusionCapExceeded",
    "ModelSpec", "Theta", "EmpiricalMeasure", "linear_mean_field",
    "opinion_dynamics", "custom_model", "model_by_name", "bump_kernel",
    "bump_kernel_grads", "drift_B", "grad_theta_B",
    "InitialLaw", "SimConfig", "TrajectoryBatch", "step_euler", "simulate_ips",
    "simulate_mv_linear", "simulate_coupled_pair", "save_trajectory",
    "load_trajectory",
    "LikelihoodValue", "AscentOptions", "FisherInfo", "NormalitySample",
    "log_likelihood", "mle_linear_closed_form", "mle_numeric",
    "fisher_information_linear", "mle_trials_linear", "normality_sample",
    "Schedule", "LearningRate", "ThetaInit", "EstimatorState", "OnlineTrialsResult",
    "lr_eval", "run_online", "online_step_averaged", "online_step_per_particle",
    "asymptotic_contrast_linear", "asymptotic_loglik_ips_linear",
    "asymptotic_loglik_hessian_linear", "ips_invariant_moments_linear",
    "lyapunov_covariance_linear", "online_trials_linear", "online_trials_opinion",
    "ExperimentConfig", "ExperimentResult", "run_experiment", "summarize",
    "fit_rate", "export_result", "load_result", "load_config",
    "export_residuals", "resolve_workers",
]
