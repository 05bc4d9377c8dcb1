"""Contrastive diffusion planning for offline RL, in plain numpy.

Modules: nn (MLP, Adam, checkpoints), diffusion (schedules, guided sampling),
data (episodes, returns, windows), contrastive (sampling, clustering, loss),
guide (return predictor), training, planner, envs (toy maze, behaviour
policies), analysis (scores, histograms, consistency) and cli.
"""
from .errors import (CdplanError, ConfigError, DimensionError, NumericError, ParseError, SamplingError,
                     UsageError)

__version__ = "0.1.0"

__all__ = ["CdplanError", "ConfigError", "DimensionError", "NumericError", "ParseError", "SamplingError",
           "UsageError", "__version__"]
