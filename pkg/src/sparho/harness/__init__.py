from .config import DEFAULTS, EXPERIMENTS, ConfigError, ExperimentConfig, default_config, load_config
from .experiments import ExperimentResult, Table, run_experiment, run_tasks
from .seeding import derive_seed, stream

__all__ = [
    "DEFAULTS",
    "EXPERIMENTS",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "Table",
    "default_config",
    "derive_seed",
    "load_config",
    "run_experiment",
    "run_tasks",
    "stream",
]
