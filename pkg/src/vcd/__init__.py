"""Variational inference with MCMC-improved contrastive divergences."""
from .config import ConfigError, ExperimentConfig
from .divergence import ObjectiveMode, estimate_vcd, vcd_gradient
from .experiment import run_experiment
from .mcmc import HMCKernel, KernelConfig

__all__ = ["ConfigError", "ExperimentConfig", "HMCKernel", "KernelConfig", "ObjectiveMode",
           "estimate_vcd", "run_experiment", "vcd_gradient"]
