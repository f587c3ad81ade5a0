"""Sliding-window inertial fusion backend."""

from .preintegration import NoiseParams, PreintegratedImu, identity_preintegration, preintegrate
from .problem import FactorGraphProblem, PoseObsFactor, PreintFactor, PriorFactor, slide_window
from .residuals import (
    NnVelocityFactor,
    SmoothnessFactor,
    nn_factor_from_prediction,
    residual_bias_walk,
    residual_nn_velocity,
    residual_pose_obs,
    residual_preint,
    residual_prior,
    residual_smoothness,
    sqrt_info_diag,
    sqrt_information,
)
from .session import FusionConfig, FusionResult, run_fusion
from .solver import SolveResult, SolverConfig, solve, write_report

__all__ = [
    "FactorGraphProblem", "FusionConfig", "FusionResult", "NnVelocityFactor", "NoiseParams",
    "PoseObsFactor", "PreintFactor", "PreintegratedImu", "PriorFactor", "SmoothnessFactor",
    "SolveResult", "SolverConfig", "identity_preintegration", "nn_factor_from_prediction",
    "preintegrate", "residual_bias_walk", "residual_nn_velocity", "residual_pose_obs",
    "residual_preint", "residual_prior", "residual_smoothness", "run_fusion", "slide_window",
    "solve", "sqrt_info_diag", "sqrt_information", "write_report",
]
