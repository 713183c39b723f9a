"""Soft actor-critic with a learned neural Lyapunov function and world model."""

from .agent import ObjectiveMode
from .config import RunConfig, from_dict, load_config, with_overrides
from .errors import ConfigError, FormatError, NumericError, SaclabError, ShapeError, UsageError
from .stability import (StabilityReport, epsilon_stability_check, export_plot_data, roa_percent,
                        surface_build, trajectory_log_probability)
from .trainer import Trainer, read_metrics, train_run

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "FormatError", "NumericError", "ObjectiveMode", "RunConfig", "SaclabError",
    "ShapeError", "StabilityReport", "Trainer", "UsageError", "epsilon_stability_check",
    "export_plot_data", "from_dict", "load_config", "read_metrics", "roa_percent",
    "surface_build", "train_run", "trajectory_log_probability", "with_overrides",
]
