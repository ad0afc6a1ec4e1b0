"""Experiment configuration: per-experiment defaults, JSON loading and validation."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

EXPERIMENTS = (
    "bandit-sweep",
    "bandit-online",
    "pathworld",
    "gridworld",
    "gridworld-linear",
    "emphatic",
    "dynamics",
    "mc",
)

LAMBDA_VARIANTS = ["q_lambda", "sparho_lambda", "retrace_lambda", "resparho_lambda"]
WEIGHT_KINDS = ["is", "sparho", "clipped_is", "clipped_sparho"]
STEP_SIZES = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]

_GRID = {"side": 5, "dirs": "four", "eps_pi": 0.5, "eps_mu": 1.0, "preferred_pi": None, "preferred_mu": None,
         "on_policy": False, "learner": "trace"}

# Full-scale defaults; the files under configs/ hold desk-scale variants.
DEFAULTS: dict[str, dict] = {
    "bandit-sweep": {
        "runs": 10000,
        "variants": list(WEIGHT_KINDS),
        "options": {"sizes": [2**k for k in range(1, 16)], "beta": 2.0, "clip": [0.0, 1.0], "chunk_elements": 2**21},
    },
    "bandit-online": {
        "runs": 100,
        "steps": 1000,
        "alphas": [0.01],
        "variants": list(WEIGHT_KINDS) + ["ris_is", "ris_sparho"],
        "record_every": 10,
        "options": {"n_actions": 8, "beta": 2.0, "noise_std": 1.0, "update_target": "scalar", "on_policy": False,
                    "clip": [0.0, 1.0]},
    },
    "pathworld": {
        "runs": 30,
        "steps": 10000,
        "alphas": list(STEP_SIZES),
        "lambdas": [0.5, 0.75, 0.875],
        "variants": list(LAMBDA_VARIANTS),
        "record_every": 500,
        "options": {"widths": [8, 32], "depth": 5, "beta": 1.0, "steps_per_width": {"32": 500000}, "on_policy": False,
                    "learner": "trace"},
    },
    "gridworld": {
        "runs": 100,
        "steps": 20000,
        "alphas": list(STEP_SIZES),
        "lambdas": [0.5, 0.75, 0.875, 0.9375, 0.96875, 0.984375, 0.9921875],
        "variants": list(LAMBDA_VARIANTS),
        "record_every": 500,
        "options": dict(_GRID),
    },
    "gridworld-linear": {
        "runs": 100,
        "steps": 50000,
        "alphas": list(STEP_SIZES),
        "lambdas": [0.5, 0.75, 0.875, 0.9375],
        "variants": list(LAMBDA_VARIANTS),
        "record_every": 1000,
        "options": {**_GRID, "dirs": "eight", "eps_mu": 0.5, "n_bits": 16, "n_ones": 8},
    },
    "emphatic": {
        "runs": 100,
        "steps": 100000,
        "alphas": [0.0001, 0.0005, 0.001, 0.005, 0.01, 0.05, 0.1],
        "lambdas": [0.5, 0.75, 0.875, 0.9375, 0.96875],
        "variants": list(WEIGHT_KINDS),
        "record_every": 2000,
        "options": {**_GRID, "learner": "emphatic", "interest": 1.0},
    },
    "dynamics": {
        "alphas": [0.1],
        "variants": ["is", "sparho"],
        "options": {"mdp": None, "n_values": [None, 4, 8, 16], "resolution": 21, "span": 2.0, "v1_range": None,
                    "v2_range": None, "states": [0, 1], "lift": "min_norm", "trajectory_steps": 200,
                    "trajectory_starts": "corners"},
    },
    "mc": {
        "runs": 10,
        "steps": 50000,
        "alphas": [0.05],
        "variants": ["sparho"],
        "record_every": 1000,
        "options": {"width": 2, "depth": 1, "beta": 1.0, "n": None, "init_noise": 1e-3, "gamma": 1.0},
    },
}

_FIELDS = ("experiment", "seed", "runs", "steps", "alphas", "lambdas", "variants", "record_every", "options", "out")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    runs: int = 1
    steps: int = 1
    alphas: list = field(default_factory=lambda: [0.1])
    lambdas: list = field(default_factory=lambda: [0.0])
    variants: list = field(default_factory=list)
    record_every: int = 0
    options: dict = field(default_factory=dict)
    out: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.runs < 1:
            raise ConfigError("runs must be at least 1")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if self.record_every < 0:
            raise ConfigError("record_every must be non-negative")
        for name in ("alphas", "lambdas", "variants"):
            if not getattr(self, name):
                raise ConfigError(f"{name} grid is empty")
        if any(a < 0 for a in self.alphas):
            raise ConfigError("step sizes must be non-negative")
        if any(not 0.0 <= lam <= 1.0 for lam in self.lambdas):
            raise ConfigError("trace-decay values must lie in [0, 1]")
        unknown = set(self.options) - set(DEFAULTS[self.experiment]["options"])
        if unknown:
            raise ConfigError(f"unknown options for {self.experiment}: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict, experiment: str | None = None) -> "ExperimentConfig":
        data = dict(data)
        name = experiment or data.get("experiment")
        if name is None:
            raise ConfigError("config does not name an experiment")
        if experiment is not None and data.get("experiment", experiment) != experiment:
            raise ConfigError(f"config is for {data['experiment']!r}, not {experiment!r}")
        if name not in DEFAULTS:
            raise ConfigError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
        unknown = set(data) - set(_FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        merged = copy.deepcopy(DEFAULTS[name])
        options = {**merged.pop("options"), **data.pop("options", {})}
        merged.update(data)
        merged["experiment"] = name
        merged["options"] = options
        return cls(**merged)


def load_config(path, experiment: str | None = None) -> ExperimentConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(data, experiment)


def default_config(experiment: str, **overrides) -> ExperimentConfig:
    return ExperimentConfig.from_dict(overrides, experiment)
