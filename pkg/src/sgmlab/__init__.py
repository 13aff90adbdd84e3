"""Numerical laboratory for DDPM and CLD score-based samplers.

Exact Gaussian step kernels, analytic score oracles, Girsanov path-KL
estimators, divergence metrics and a config-driven experiment runner.
"""

from .analysis import (
    gaussian_chain_law,
    girsanov_kl,
    stationary_chain_variance,
    stationary_cld_kl,
    stationary_ddpm_kl,
    theorem_bound_rhs,
)
from .forward import cld_marginal, cld_transition, ou_marginal, ou_transition
from .metrics import empirical_divergence, gaussian_divergence
from .samplers import SamplerConfig, early_stop_time, run_reverse
from .score_matching import DSMRegressor, ScoreModel, fit_dsm
from .score_oracle import exact_score, make_perturbed
from .targets import Gaussian, GaussianMixture, UniformBall, UniformSphere

__version__ = "0.1.0"

__all__ = [
    "DSMRegressor",
    "Gaussian",
    "GaussianMixture",
    "SamplerConfig",
    "ScoreModel",
    "UniformBall",
    "UniformSphere",
    "cld_marginal",
    "cld_transition",
    "early_stop_time",
    "empirical_divergence",
    "exact_score",
    "fit_dsm",
    "gaussian_chain_law",
    "gaussian_divergence",
    "girsanov_kl",
    "make_perturbed",
    "ou_marginal",
    "ou_transition",
    "run_reverse",
    "stationary_chain_variance",
    "stationary_cld_kl",
    "stationary_ddpm_kl",
    "theorem_bound_rhs",
]
