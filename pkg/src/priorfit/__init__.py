"""priorfit: learn prior hyperparameters from expert-elicited statistics.

The package simulates model quantities from parametric priors, summarizes
them with elicitation techniques (quantiles, moments, histogram samples),
and fits the prior hyperparameters by stochastic gradient descent on
kernel-based discrepancies against expert-provided statistics.
"""

__version__ = "0.1.0"

from .models import ModelSpec, PriorSpec, TargetSpec, builtin_models
from .elicitation import (
    ElicitationTechnique,
    ElicitedStatistic,
    read_expert_file,
    simulate_ideal_expert,
    write_expert_file,
)
from .losses import KernelSpec, dwa_weights, mmd2_biased
from .training import FitResult, TrainingConfig, TrainingTrace, fit, recovery_error
from .studies import (
    CASE_CONFIGS,
    StudyReport,
    run_case_study,
    run_inconsistency_study,
    run_threshold_study,
)

__all__ = [
    "ModelSpec", "PriorSpec", "TargetSpec", "builtin_models",
    "ElicitationTechnique", "ElicitedStatistic",
    "simulate_ideal_expert", "read_expert_file", "write_expert_file",
    "KernelSpec", "mmd2_biased", "dwa_weights",
    "TrainingConfig", "TrainingTrace", "FitResult", "fit", "recovery_error",
    "CASE_CONFIGS", "StudyReport",
    "run_case_study", "run_threshold_study", "run_inconsistency_study",
]
