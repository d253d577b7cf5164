"""Optimistic actor-critic for finite-horizon linear MDPs."""

from .config import ConfigError, EnvConfig, ExperimentConfig, load_config
from .harness import EpisodeRecord, RunResult, run_experiment
from .linear_mdp import LinearMdp, fit_linear_mdp, make_deep_sea, make_random_mdp

__all__ = [
    "ConfigError",
    "EnvConfig",
    "EpisodeRecord",
    "ExperimentConfig",
    "LinearMdp",
    "RunResult",
    "fit_linear_mdp",
    "load_config",
    "make_deep_sea",
    "make_random_mdp",
    "run_experiment",
]

__version__ = "0.1.0"
