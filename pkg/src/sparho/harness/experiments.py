"""Named, seeded experiment sweeps.

Every experiment splits into independent tasks whose RNG streams are derived
from ``(master seed, cell index, run index)``.  Tasks return plain row lists
and are reassembled in task order, so output is independent of ``jobs``.
Environment streams are keyed by environment cell and run only: every learner
configuration in a run sees the same environment and the same transitions.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..algorithms import (
    DivergenceError,
    LearnerConfig,
    LinearQ,
    TabularQ,
    Variant,
    make_learner,
    run_mc_first_visit,
    run_n_step,
    sparho_weight_at,
)
from ..dynamics import (
    SingularSystemError,
    iterate_expected_updates,
    lift_state_values,
    state_values,
    true_action_values,
    vector_field,
)
from ..envs import (
    Sampler,
    generate_bandit,
    generate_bandits,
    load_mdp,
    make_grid_world,
    make_path_world,
    make_random_features,
    two_state_placeholder_path,
)
from ..metrics import RunSummary, rms_error
from ..weights import WeightKind, compute_weights, weight_stats
from .config import ExperimentConfig
from .io import write_csv, write_json
from .seeding import derive_seed, stream


@dataclass
class Table:
    columns: list[str]
    rows: list = field(default_factory=list)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    tables: dict[str, Table]
    summary: dict

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        paths = [write_csv(out / f"{name}.csv", t.columns, t.rows) for name, t in self.tables.items()]
        paths.append(write_json(out / "config.json", self.config.to_dict()))
        paths.append(write_json(out / "summary.json", self.summary))
        return paths


def run_tasks(fn, tasks: list, jobs: int = 1) -> list:
    """Evaluate ``fn`` over ``tasks``; results come back in task order for any ``jobs``."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def learner_kind(name: str) -> WeightKind:
    """Trace weighting for a variant name (``q_lambda`` ...) or weight-kind name (``is`` ...)."""
    try:
        return Variant(name).weights
    except ValueError:
        return WeightKind(name)


def _summarize(rows, key_len: int, value_index: int):
    """Group rows by their first ``key_len`` fields (order of first appearance) plus the step column."""
    groups: dict[tuple, list] = {}
    for row in rows:
        groups.setdefault(tuple(row[:key_len]) + (row[value_index - 1],), []).append(row[value_index])
    out = []
    for key, values in groups.items():
        s = RunSummary.from_values(values)
        out.append(list(key) + [s.mean, s.stderr, s.n_finite, s.runs])
    return out


# --------------------------------------------------------------------------
# Closed-form bandit sweep


def _bandit_chunk(task):
    cfg, size_index, chunk_index, start, count = task
    opts = cfg["options"]
    n_actions = opts["sizes"][size_index]
    seed, rng = stream(cfg["seed"], size_index, chunk_index)
    mu, pi, q = generate_bandits(count, n_actions, opts["beta"], rng)
    lo, hi = opts["clip"]
    rows = []
    for name in cfg["variants"]:
        kind = WeightKind(name)
        w = compute_weights(kind, mu, pi, q, clip=(lo, hi))
        st = weight_stats(mu, pi, q, w)
        for i in range(count):
            rows.append([n_actions, name, start + i, chunk_index, seed, float(st.estimate_variance[i]),
                         float(st.bias_sq[i]), float(st.mean_weight[i]), float(st.weight_variance[i])])
    return rows


def run_bandit_sweep(config: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    cfg = config.to_dict()
    opts = config.options
    tasks = []
    for si, n_actions in enumerate(opts["sizes"]):
        chunk = max(1, int(opts["chunk_elements"]) // int(n_actions))
        for ci, start in enumerate(range(0, config.runs, chunk)):
            tasks.append((cfg, si, ci, start, min(chunk, config.runs - start)))
    parts = run_tasks(_bandit_chunk, tasks, jobs)
    # regroup so rows are ordered by size, estimator, instance
    by_key: dict[tuple, list] = {}
    for part in parts:
        for row in part:
            by_key.setdefault((row[0], row[1]), []).append(row)
    runs = Table(["n_actions", "estimator", "instance", "chunk", "seed", "estimate_variance", "bias_sq",
                  "mean_weight", "weight_variance"])
    summary = Table(["n_actions", "estimator", "instances", "estimate_variance", "estimate_variance_se", "bias_sq",
                     "bias_sq_se", "mean_weight", "mean_weight_se", "weight_variance", "weight_variance_se"])
    for n_actions in opts["sizes"]:
        for name in config.variants:
            rows = by_key[(n_actions, name)]
            runs.rows.extend(rows)
            stats = []
            for col in range(5, 9):
                s = RunSummary.from_values([r[col] for r in rows])
                stats += [s.mean, s.stderr]
            summary.rows.append([n_actions, name, len(rows)] + stats)
    return ExperimentResult(config, {"runs": runs, "summary": summary}, {"experiment": config.experiment})


# --------------------------------------------------------------------------
# Online bandit


def _bandit_online_run(task):
    cfg, run = task
    opts = cfg["options"]
    env_seed, env_rng = stream(cfg["seed"], 0, run)
    inst = generate_bandit(opts["n_actions"], opts["beta"], env_rng)
    mu, q_true = inst.mu, inst.q
    pi = mu.copy() if opts["on_policy"] else inst.pi
    target_value = float(pi @ q_true)
    sample_seed = derive_seed(cfg["seed"], 1, run)
    lo, hi = opts["clip"]
    per_action = opts["update_target"] == "per_action"
    if opts["update_target"] not in ("scalar", "per_action"):
        raise ValueError(f"unknown update_target {opts['update_target']!r}")
    cdf = np.cumsum(mu).tolist()
    rows = []
    for name in cfg["variants"]:
        ris = name.startswith("ris_")
        kind = WeightKind(name[4:] if ris else name)
        for alpha in cfg["alphas"]:
            rng = np.random.default_rng(sample_seed)
            q_hat = np.zeros_like(q_true)
            v_hat = 0.0
            counts = np.zeros_like(mu)

            def error():
                return float(np.mean(np.abs(q_hat - q_true))) if per_action else abs(v_hat - target_value)

            rows.append([name, alpha, run, sample_seed, 0, error()])
            for t in range(1, cfg["steps"] + 1):
                u, z = rng.random(), rng.standard_normal()
                a = min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)
                y = q_true[a] + opts["noise_std"] * z
                counts[a] += 1.0
                mu_used = counts / t if ris else mu
                if kind.base is WeightKind.IS:
                    w = pi[a] / mu_used[a]
                else:
                    w = sparho_weight_at(mu_used, pi, q_hat, a)
                if kind.clipped:
                    w = min(max(w, lo), hi)
                if per_action:
                    q_hat[a] += alpha * w * (y - q_hat[a])
                else:
                    v_hat += alpha * (w * y - v_hat)
                    q_hat[a] += alpha * (y - q_hat[a])
                if (cfg["record_every"] and t % cfg["record_every"] == 0) or t == cfg["steps"]:
                    rows.append([name, alpha, run, sample_seed, t, error()])
    return rows


def run_bandit_online(config: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    cfg = config.to_dict()
    parts = run_tasks(_bandit_online_run, [(cfg, r) for r in range(config.runs)], jobs)
    runs = Table(["estimator", "alpha", "run", "seed", "step", "error"])
    for p in parts:
        runs.rows.extend(p)
    runs.rows.sort(key=lambda r: (config.variants.index(r[0]), config.alphas.index(r[1]), r[2], r[4]))
    summary = Table(["estimator", "alpha", "step", "error", "error_se", "n_finite", "runs"])
    summary.rows = _summarize([[r[0], r[1], r[4], r[5]] for r in runs.rows], 2, 3)
    return ExperimentResult(config, {"runs": runs, "summary": summary}, {"experiment": config.experiment})


# --------------------------------------------------------------------------
# Online lambda-learners (Path World, grid worlds, emphatic)


def _build_env(experiment: str, opts: dict, env_cell: int, rng):
    """Environment, policies, features (or ``None``) and a label for environment cell ``env_cell``."""
    if experiment == "pathworld":
        width = opts["widths"][env_cell]
        mdp, mu, pi = make_path_world(width, opts["depth"], opts["beta"], rng)
        features, label = None, width
    else:
        mdp, mu, pi = make_grid_world(opts["side"], opts["dirs"], opts["eps_pi"], opts["eps_mu"], rng,
                                      opts["preferred_pi"], opts["preferred_mu"])
        features = None
        if experiment == "gridworld-linear":
            features = make_random_features(mdp.n_states, rng, opts["n_bits"], opts["n_ones"])
        label = mdp.n_actions
    if opts["on_policy"]:
        mu = pi.copy()
    return mdp, mu, pi, features, label


def _env_cells(config: ExperimentConfig) -> list[int]:
    if config.experiment == "pathworld":
        return list(range(len(config.options["widths"])))
    return [0]


def _steps_for(config_dict: dict, env_cell: int) -> int:
    opts = config_dict["options"]
    if config_dict["experiment"] == "pathworld":
        width = str(opts["widths"][env_cell])
        return int(opts.get("steps_per_width", {}).get(width, config_dict["steps"]))
    return config_dict["steps"]


def _online_run(task):
    cfg, env_cell, run = task
    opts = cfg["options"]
    env_seed, env_rng = stream(cfg["seed"], env_cell, run)
    mdp, mu, pi, features, label = _build_env(cfg["experiment"], opts, env_cell, env_rng)
    q_true = true_action_values(mdp, pi)
    sample_seed = derive_seed(cfg["seed"], env_cell, run, 1)
    steps = _steps_for(cfg, env_cell)
    every = cfg["record_every"]
    checkpoints = sorted({t for t in range(every, steps + 1, every)} | {steps}) if every else [steps]
    learner_type = opts.get("learner", "trace")
    extra = {}
    if learner_type == "emphatic":
        extra["interest"] = np.full(mdp.n_states, float(opts["interest"]))
    rows = []
    for variant in cfg["variants"]:
        kind = learner_kind(variant)
        for alpha in cfg["alphas"]:
            for lam in cfg["lambdas"]:
                lc = LearnerConfig(kind, alpha=alpha, lambda_=lam, gamma=mdp.gamma)
                if features is None:
                    value = TabularQ(mdp.n_states, mdp.n_actions, mdp.terminal)
                else:
                    value = LinearQ(features, mdp.n_actions, mdp.terminal)
                learner = make_learner(learner_type, value, mu, pi, lc, **extra)
                rng = np.random.default_rng(sample_seed)
                sampler = Sampler(mdp, mu)
                prefix = [label, variant, alpha, lam, run, sample_seed]
                rows.append(prefix + [0, rms_error(value.as_table(), q_true, mdp.terminal), 0])
                s = sampler.reset(rng)
                t = 0
                diverged = False
                with np.errstate(over="ignore", invalid="ignore"):
                    for stop in checkpoints:
                        if not diverged:
                            try:
                                while t < stop:
                                    a = sampler.action(s, rng)
                                    r, s2, done = sampler.transition(s, a, rng)
                                    learner.step(s, a, r, s2, done)
                                    s = sampler.reset(rng) if done else s2
                                    t += 1
                            except DivergenceError:
                                diverged = True
                        err = math.nan if diverged else rms_error(value.as_table(), q_true, mdp.terminal)
                        if not math.isfinite(err):
                            diverged, err = True, math.nan
                        rows.append(prefix + [stop, err, int(diverged)])
    return rows


def _best_cells(config: ExperimentConfig, summary_rows, final_steps: dict):
    """Per (environment, variant), the (alpha, lambda) cell with lowest final mean RMS among non-divergent cells."""
    best = {}
    for label, variant, alpha, lam, step, mean, se, n_finite, runs in summary_rows:
        if step != final_steps[label]:
            continue
        complete = n_finite == runs
        score = (not complete, mean if math.isfinite(mean) else math.inf)
        key = (label, variant)
        if key not in best or score < best[key][0]:
            best[key] = (score, alpha, lam, mean, se, n_finite, runs)
    return best


def run_online_sweep(config: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    cfg = config.to_dict()
    tasks = [(cfg, c, r) for c in _env_cells(config) for r in range(config.runs)]
    parts = run_tasks(_online_run, tasks, jobs)
    runs = Table(["env", "variant", "alpha", "lambda", "run", "seed", "step", "rms", "diverged"])
    for p in parts:
        runs.rows.extend(p)
    order = {v: i for i, v in enumerate(config.variants)}
    runs.rows.sort(key=lambda r: (r[0], order[r[1]], config.alphas.index(r[2]), config.lambdas.index(r[3]), r[4], r[6]))
    summary = Table(["env", "variant", "alpha", "lambda", "step", "rms", "rms_se", "n_finite", "runs"])
    summary.rows = _summarize([r[:4] + [r[6], r[7]] for r in runs.rows], 4, 5)
    labels = sorted({r[0] for r in runs.rows})
    final_steps = {lab: max(r[6] for r in runs.rows if r[0] == lab) for lab in labels}
    best = _best_cells(config, summary.rows, final_steps)
    best_table = Table(["env", "variant", "alpha", "lambda", "step", "rms", "rms_se", "n_finite", "runs"])
    chosen = {(k[0], k[1], v[1], v[2]) for k, v in best.items()}
    best_table.rows = [r for r in summary.rows if tuple(r[:4]) in chosen]
    info = {
        "experiment": config.experiment,
        "best": [
            {"env": k[0], "variant": k[1], "alpha": v[1], "lambda": v[2], "final_rms": v[3], "final_rms_se": v[4],
             "n_finite": v[5], "runs": v[6]}
            for k, v in sorted(best.items(), key=lambda kv: (kv[0][0], order[kv[0][1]]))
        ],
    }
    return ExperimentResult(config, {"runs": runs, "summary": summary, "best": best_table}, info)


# --------------------------------------------------------------------------
# Expected-update dynamics


def _load_dynamics_mdp(opts):
    path = opts["mdp"] or two_state_placeholder_path()
    mdp, mu, pi = load_mdp(path)
    if mu is None or pi is None:
        raise ValueError(f"{path}: dynamics needs 'mu' and 'pi' policies in the MDP file")
    return mdp, mu, pi


def _axes(opts, v_pi):
    s1, s2 = opts["states"]
    axes = []
    for state, rng_key in ((s1, "v1_range"), (s2, "v2_range")):
        lo, hi = opts[rng_key] or (v_pi[state] - opts["span"], v_pi[state] + opts["span"])
        axes.append(np.linspace(lo, hi, opts["resolution"]))
    return axes


def _n_label(n):
    return "mc" if n is None else int(n)


def _dynamics_cell(task):
    cfg, variant, alpha, n = task
    opts = cfg["options"]
    mdp, mu, pi = _load_dynamics_mdp(opts)
    q_pi = true_action_values(mdp, pi)
    v_pi = state_values(q_pi, pi)
    xs, ys = _axes(opts, v_pi)
    states = tuple(opts["states"])
    kind = WeightKind(variant)
    field_rows = []
    for v1, v2, dv1, dv2, ok in vector_field(mdp, mu, pi, q_pi, xs, ys, alpha, kind, n, states, opts["lift"]):
        field_rows.append([v1, v2, dv1, dv2, variant, alpha, _n_label(n), int(ok), cfg["seed"]])
    if opts["trajectory_starts"] == "corners":
        starts = [(xs[0], ys[0]), (xs[0], ys[-1]), (xs[-1], ys[0]), (xs[-1], ys[-1])]
    else:
        starts = [tuple(p) for p in opts["trajectory_starts"]]
    traj_rows = []
    for si, (v1, v2) in enumerate(starts):
        v = v_pi.copy()
        v[states[0]], v[states[1]] = v1, v2
        q0 = lift_state_values(v, q_pi, pi, opts["lift"])
        try:
            _, vs = iterate_expected_updates(mdp, q0, opts["trajectory_steps"], alpha, mu, pi, kind, n)
        except SingularSystemError as exc:
            traj_rows.append([si, exc.iterate, math.nan, math.nan, variant, alpha, _n_label(n), 0, cfg["seed"]])
            continue
        for k, vk in enumerate(vs):
            traj_rows.append([si, k, float(vk[states[0]]), float(vk[states[1]]), variant, alpha, _n_label(n), 1,
                              cfg["seed"]])
    return field_rows, traj_rows


def run_dynamics(config: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    cfg = config.to_dict()
    tasks = [(cfg, v, a, n) for v in config.variants for a in config.alphas for n in config.options["n_values"]]
    parts = run_tasks(_dynamics_cell, tasks, jobs)
    fields = Table(["v1_start", "v2_start", "v1_delta", "v2_delta", "variant", "alpha", "n", "ok", "seed"])
    trajs = Table(["start", "iter", "v1", "v2", "variant", "alpha", "n", "ok", "seed"])
    magnitudes = []
    for (_, variant, alpha, n), (f, t) in zip(tasks, parts):
        fields.rows.extend(f)
        trajs.rows.extend(t)
        mags = [math.hypot(r[2], r[3]) for r in f if r[7]]
        magnitudes.append({"variant": variant, "alpha": alpha, "n": _n_label(n),
                           "max_update": max(mags) if mags else None,
                           "mean_update": float(np.mean(mags)) if mags else None,
                           "singular_cells": sum(1 for r in f if not r[7])})
    mdp, mu, pi = _load_dynamics_mdp(config.options)
    v_pi = state_values(true_action_values(mdp, pi), pi)
    info = {"experiment": config.experiment, "mdp": mdp.name, "v_pi": v_pi.tolist(), "update_magnitudes": magnitudes}
    return ExperimentResult(config, {"field": fields, "trajectories": trajs}, info)


# --------------------------------------------------------------------------
# Episodic Monte Carlo / n-step on Path World


def _mc_run(task):
    cfg, run = task
    opts = cfg["options"]
    env_seed, env_rng = stream(cfg["seed"], 0, run)
    mdp, mu, pi = make_path_world(opts["width"], opts["depth"], opts["beta"], env_rng)
    q_true = true_action_values(mdp, pi)
    sample_seed = derive_seed(cfg["seed"], 0, run, 1)
    rows = []
    for variant in cfg["variants"]:
        kind = learner_kind(variant)
        for alpha in cfg["alphas"]:
            lc = LearnerConfig(kind, alpha=alpha, gamma=opts["gamma"], n=opts["n"])
            rng = np.random.default_rng(sample_seed)
            if opts["n"] is None:
                _, series = run_mc_first_visit(mdp, mu, pi, lc, rng, cfg["steps"], q_true,
                                               init_noise=opts["init_noise"], record_every=cfg["record_every"])
            else:
                _, series = run_n_step(mdp, mu, pi, lc, rng, cfg["steps"], q_true, init_noise=opts["init_noise"],
                                       record_every=cfg["record_every"])
            for ep, err in zip(series.steps, series.values):
                rows.append([variant, alpha, run, sample_seed, ep, err])
    return rows


def run_mc(config: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    cfg = config.to_dict()
    parts = run_tasks(_mc_run, [(cfg, r) for r in range(config.runs)], jobs)
    runs = Table(["variant", "alpha", "run", "seed", "episode", "rms"])
    for p in parts:
        runs.rows.extend(p)
    runs.rows.sort(key=lambda r: (config.variants.index(r[0]), config.alphas.index(r[1]), r[2], r[4]))
    summary = Table(["variant", "alpha", "episode", "rms", "rms_se", "n_finite", "runs"])
    summary.rows = _summarize([[r[0], r[1], r[4], r[5]] for r in runs.rows], 2, 3)
    return ExperimentResult(config, {"runs": runs, "summary": summary}, {"experiment": config.experiment})


RUNNERS = {
    "bandit-sweep": run_bandit_sweep,
    "bandit-online": run_bandit_online,
    "pathworld": run_online_sweep,
    "gridworld": run_online_sweep,
    "gridworld-linear": run_online_sweep,
    "emphatic": run_online_sweep,
    "dynamics": run_dynamics,
    "mc": run_mc,
}


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return RUNNERS[config.experiment](config, jobs)
