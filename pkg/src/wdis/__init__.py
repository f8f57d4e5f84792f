"""Label-conditioned Wasserstein disentanglement of foreground and background features."""

from .config import ConfigError, RunConfig, config_from_dict, parse_config
from .estimator import WassersteinDisentangler
from .models import Architecture, ParamStore, init_params
from .probe import LinearProbe, probe_grid
from .trainer import TrainConfig, TrainState, run_training

__all__ = [
    "Architecture",
    "ConfigError",
    "LinearProbe",
    "ParamStore",
    "RunConfig",
    "TrainConfig",
    "TrainState",
    "WassersteinDisentangler",
    "config_from_dict",
    "init_params",
    "parse_config",
    "probe_grid",
    "run_training",
]

__version__ = "0.1.0"
