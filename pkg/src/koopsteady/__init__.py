"""Koopman models of controlled nonlinear systems and steady-state input programming."""

from .deepdmd import KoopmanModel, TrainConfig, multi_step_predict, train
from .dmdc import LinearModel, fit_dmdc, fit_two_stage, predict_linear
from .numerics import NumericsError, Trajectory, integrate, rk4_step
from .observables import MonomialDictionary, build_Mu, build_Mx, lift, lift_mixed
from .ssprog import (
    OptimizerConfig,
    SteadyStateProblem,
    SteadyStateSolution,
    brute_force_oracle,
    solve,
    verify,
)
from .systems import ConfigurationError, InputSignal, generate_dataset, make_system

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "InputSignal",
    "KoopmanModel",
    "LinearModel",
    "MonomialDictionary",
    "NumericsError",
    "OptimizerConfig",
    "SteadyStateProblem",
    "SteadyStateSolution",
    "TrainConfig",
    "Trajectory",
    "brute_force_oracle",
    "build_Mu",
    "build_Mx",
    "fit_dmdc",
    "fit_two_stage",
    "generate_dataset",
    "integrate",
    "lift",
    "lift_mixed",
    "make_system",
    "multi_step_predict",
    "predict_linear",
    "rk4_step",
    "solve",
    "train",
    "verify",
]
