"""Command-line orchestration of the verification experiments."""

from .config import ConfigError, ExperimentConfig, build_config
from .experiments import run
from .report import VerdictReport

__all__ = ["ConfigError", "ExperimentConfig", "VerdictReport", "build_config", "run"]
