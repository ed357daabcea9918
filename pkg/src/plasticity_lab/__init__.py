"""Desk-scale continual-learning lab for plasticity and Hessian-rank diagnostics."""

from .config import ExperimentConfig, parse_config
from .runner import run_experiment, run_sweep, validate_hessian_approx

__all__ = ["ExperimentConfig", "parse_config", "run_experiment", "run_sweep", "validate_hessian_approx"]
__version__ = "0.1.0"
