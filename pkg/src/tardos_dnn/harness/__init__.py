"""Config-driven Monte Carlo experiments and their result files."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .experiments import (
    ExperimentResult,
    SweepResult,
    TableResult,
    TrialError,
    aggregate,
    experiment_baseline_comparison,
    experiment_kappa_sweep,
    experiment_ma_table,
    experiment_trigger_skew,
    experiment_whitebox,
    run_experiment,
)
from .output import write_result

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "SweepResult",
    "TableResult",
    "TrialError",
    "aggregate",
    "experiment_baseline_comparison",
    "experiment_kappa_sweep",
    "experiment_ma_table",
    "experiment_trigger_skew",
    "experiment_whitebox",
    "load_config",
    "parse_config",
    "run_experiment",
    "write_result",
]
