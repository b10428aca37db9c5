"""Hybrid SCADA/PMU power-system state estimation under PMU sampling phase errors."""
from .network import (NetworkCase, bundled_case, build_measurement_model, distance2_coloring,
                      kappa, load_case, parse_case)
from .truncnorm import TruncatedGaussian
from .measurement import MeasurementSet, TrueState, exact_pmu, perturb_state, simulate
from .scada import RectPrior, irwls_estimate, polar_to_rect
from .centralized import (am_estimate, cvi_run, elbo, stack_model, uniform_phase_prior,
                          wls_estimate)
from .distributed import run_algorithm1
from .experiment import ExperimentConfig, run_experiment, summarize

__version__ = "0.1.0"

__all__ = [
    "NetworkCase", "bundled_case", "build_measurement_model", "distance2_coloring", "kappa",
    "load_case", "parse_case", "TruncatedGaussian", "MeasurementSet", "TrueState",
    "exact_pmu", "perturb_state", "simulate", "RectPrior", "irwls_estimate", "polar_to_rect",
    "am_estimate", "cvi_run", "elbo", "stack_model", "uniform_phase_prior", "wls_estimate",
    "run_algorithm1", "ExperimentConfig", "run_experiment", "summarize",
]
