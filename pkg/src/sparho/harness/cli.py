"""Command-line entry point: ``sparho <experiment> [--config FILE] [--seed N] [--out DIR] [--jobs N]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from .config import EXPERIMENTS, ConfigError, ExperimentConfig, load_config
from .experiments import run_experiment

log = logging.getLogger("sparho")

_HELP = {
    "bandit-sweep": "closed-form variance, bias and mean weight over random bandits",
    "bandit-online": "learned-value bandit estimators, including regression importance sampling",
    "pathworld": "lambda-learner sweep on Path World",
    "gridworld": "lambda-learner sweep on the tabular grid world",
    "gridworld-linear": "lambda-learner sweep on the 8-direction grid world with random binary features",
    "emphatic": "emphatic Q(lambda) sweep on the tabular grid world",
    "dynamics": "expected-update vector fields and trajectories on a small MDP file",
    "mc": "first-visit Monte Carlo (or n-step) learner on Path World",
}


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparho", description="Value-aware importance weighting experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=_HELP[name], description=_HELP[name])
        p.add_argument("--config", help="JSON config file; missing keys take the full-scale defaults")
        p.add_argument("--seed", type=_seed, help="master seed (overrides the config)")
        p.add_argument("--out", help="output directory (env SPARHO_OUT; default results/<experiment>)")
        p.add_argument("--jobs", type=_positive, help="worker processes (env SPARHO_JOBS; default 1)")
    return parser


def resolve(args, environ=os.environ) -> tuple[ExperimentConfig, str, int]:
    if args.config:
        config = load_config(args.config, args.experiment)
    else:
        config = ExperimentConfig.from_dict({}, args.experiment)
    if args.seed is not None:
        config.seed = args.seed
    out = args.out or environ.get("SPARHO_OUT") or config.out or os.path.join("results", args.experiment)
    jobs = args.jobs or int(environ.get("SPARHO_JOBS", "1"))
    if jobs < 1:
        raise ConfigError("SPARHO_JOBS must be at least 1")
    config.out = None  # output location is not part of the experiment's identity
    return config, out, jobs


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config, out, jobs = resolve(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"sparho: {exc}", file=sys.stderr)
        return 2
    log.info("running %s (seed %d, %d job%s)", config.experiment, config.seed, jobs, "" if jobs == 1 else "s")
    start = time.perf_counter()
    result = run_experiment(config, jobs)
    paths = result.write(out)
    log.info("finished in %.1fs", time.perf_counter() - start)
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
