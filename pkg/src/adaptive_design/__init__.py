"""Two-stage adaptive D-optimal design for the Emax dose-response model."""

from __future__ import annotations

from adaptive_design.design import (
    Design,
    ExactDesign,
    apportion,
    brute_force_d_optimal,
    d_optimal_emax,
    fisher_matrix,
)
from adaptive_design.estimation import (
    MleResult,
    StageData,
    TwoStageData,
    fit_mle,
    score,
    simulate_stage,
    stage1_bias_theta2,
)
from adaptive_design.exceptions import DomainError, RankDeficiencyError, SingularMatrixError, SingularRateError
from adaptive_design.model import EMAX, DoseInterval, ModelParams, ModelSpec, ParameterBox
from adaptive_design.asymptotics import (
    MixtureLawSampler,
    asymptotic_variance,
    per_subject_information,
    sample_limit_law,
    sym_inverse_sqrt,
)
from adaptive_design.simulation import (
    Scenario,
    efficiency_curve,
    relative_efficiency,
    run_adaptive,
    run_fixed,
    run_paired,
)

__version__ = "0.1.0"

__all__ = [
    "EMAX", "Design", "DomainError", "DoseInterval", "ExactDesign", "MixtureLawSampler",
    "MleResult", "ModelParams", "ModelSpec", "ParameterBox", "RankDeficiencyError",
    "Scenario", "SingularMatrixError", "SingularRateError", "StageData", "TwoStageData",
    "apportion", "asymptotic_variance", "brute_force_d_optimal", "d_optimal_emax",
    "efficiency_curve", "fisher_matrix", "fit_mle", "per_subject_information",
    "relative_efficiency", "run_adaptive", "run_fixed", "run_paired", "sample_limit_law",
    "score", "simulate_stage", "stage1_bias_theta2", "sym_inverse_sqrt",
]
