"""Configuration: environment settings and experiment files."""

from noisespace.app.config.config import Settings, get_settings
from noisespace.app.config.experiment import ExperimentConfig, parse_config

__all__ = ["Settings", "get_settings", "ExperimentConfig", "parse_config"]
