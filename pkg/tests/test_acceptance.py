"""Acceptance suite: twelve end-to-end criteria at their stated tolerances.

Each criterion is a ``check_*`` function returning ``(passed, detail)``.  Under
pytest every criterion prints one ``[acceptance NN] PASS|FAIL`` line; run the
file directly (``python tests/test_acceptance.py``) for the same lines
without pytest.
"""
from __future__ import annotations

import filecmp
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import finite_difference_gradient, sample_per_decision_returns  # noqa: E402
from sparho.algorithms import LearnerConfig, TabularQ, TraceLearner, Variant, forward_lambda_return  # noqa: E402
from sparho.dynamics import expected_return_vector, true_action_values, vector_field, weight_table  # noqa: E402
from sparho.envs import (  # noqa: E402
    Sampler,
    generate_bandits,
    load_mdp,
    make_grid_world,
    make_path_world,
    random_mdp,
    sample_episode,
    two_state_placeholder_path,
)
from sparho.harness import ExperimentConfig, load_config, run_experiment  # noqa: E402
from sparho.metrics import RunSummary, pooled_stderr  # noqa: E402
from sparho.weights import (  # noqa: E402
    DEGENERACY_TOL,
    SINGULAR_Q_TOL,
    WeightKind,
    is_weights,
    kkt_oracle,
    l2_to_c_weights,
    l2_to_one_weights,
    lagrangian,
    minvar_length_c_weights,
    minvar_product_weights,
    sparho_weights,
)

CONSTRAINT_TOL = 1e-10
CONFIGS = Path(__file__).resolve().parents[1] / "configs"
JOBS = int(os.environ.get("SPARHO_JOBS", "1"))


def _rowwise(x):
    return np.sum(x, axis=-1)


def _constraint_instances(n_actions, rng, n=10_000):
    return generate_bandits(n, n_actions, 2.0, rng)


# ---------------------------------------------------------------------------


def check_01_constraints():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = {}

    def track(name, err):
        worst[name] = max(worst.get(name, 0.0), float(np.max(err)) if np.size(err) else 0.0)

    for n_actions in (2, 3, 4, 8, 16, 64):
        mu, pi, q = _constraint_instances(n_actions, rng)
        v = _rowwise(pi * q)
        w = sparho_weights(mu, pi, q)
        track("sparho value", np.abs(_rowwise(mu * w * q) - v))
        track("sparho mean", np.abs(_rowwise(mu * w) - 1.0))
        w = l2_to_one_weights(mu, pi, q)
        track("C.1 value", np.abs(_rowwise(mu * w * q) - v))
        w = l2_to_c_weights(mu, pi, q, 0.5)
        track("C.2 value", np.abs(_rowwise(mu * w * q) - v))
        w = minvar_length_c_weights(mu, pi, q, 0.9)
        track("C.3 value", np.abs(_rowwise(mu * w * q) - v))
        track("C.3 mean", np.abs(_rowwise(mu * w) - 0.9))
        # C.4 is defined only away from zero action-values and constant 1/Q
        qmax = np.max(np.abs(q), axis=-1, keepdims=True)
        inv = 1.0 / q
        m1 = _rowwise(mu * inv)
        den = _rowwise(mu * (inv - m1[:, None]) ** 2)
        ok = np.all(np.abs(q) >= SINGULAR_Q_TOL * qmax, axis=-1) & (
            den >= DEGENERACY_TOL * np.maximum(1.0, _rowwise(mu * inv * inv))
        )
        w = minvar_product_weights(mu[ok], pi[ok], q[ok])
        track("C.4 value", np.abs(_rowwise(mu[ok] * w * q[ok]) - v[ok]))
        track("C.4 mean", np.abs(_rowwise(mu[ok] * w) - 1.0))
    elapsed = time.perf_counter() - start
    passed = all(e <= CONSTRAINT_TOL for e in worst.values()) and elapsed < 10.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    return passed, detail


def check_02_variance_dominance():
    rng = np.random.default_rng(101)
    worst = -math.inf
    count = 0
    start = time.perf_counter()
    for n_actions in (2, 3, 4, 8, 16, 64):
        mu, pi, q = _constraint_instances(n_actions, rng)
        ws, wi = sparho_weights(mu, pi, q), is_weights(mu, pi)
        var_s = _rowwise(mu * (ws - _rowwise(mu * ws)[:, None]) ** 2)
        var_i = _rowwise(mu * (wi - _rowwise(mu * wi)[:, None]) ** 2)
        worst = max(worst, float(np.max(var_s - var_i)))
        count += len(mu)
    elapsed = time.perf_counter() - start
    return worst <= 1e-12, f"max Var(sparho) - Var(is) = {worst:.2e} over {count} instances; {elapsed:.1f}s"


def _oracle_instances(rng, n):
    """Well-conditioned instances: spread-out values bounded away from zero."""
    out = []
    while len(out) < n:
        n_actions = int(rng.integers(2, 17))
        mu, pi, q = (x[0] for x in generate_bandits(1, n_actions, 1.0, rng))
        if np.min(mu) < 1e-3 or np.min(np.abs(q)) < 0.1 * np.max(np.abs(q)):
            continue
        if mu @ (q - mu @ q) ** 2 < 1e-2:
            continue
        out.append((mu, pi, q))
    return out


def check_03_oracle_equivalence():
    rng = np.random.default_rng(103)
    forms = {
        WeightKind.SPARHO: lambda mu, pi, q, c: sparho_weights(mu, pi, q),
        WeightKind.L2_TO_ONE: lambda mu, pi, q, c: l2_to_one_weights(mu, pi, q),
        WeightKind.L2_TO_C: l2_to_c_weights,
        WeightKind.MINVAR_LENGTH_C: minvar_length_c_weights,
        WeightKind.MINVAR_PRODUCT: lambda mu, pi, q, c: minvar_product_weights(mu, pi, q),
    }
    worst_w = worst_g = 0.0
    instances = _oracle_instances(rng, 1000)
    for mu, pi, q in instances:
        c = 0.75
        for kind, closed in forms.items():
            sol = kkt_oracle(mu, pi, q, kind, c)
            worst_w = max(worst_w, float(np.max(np.abs(closed(mu, pi, q, c) - sol.weights))))
            g = finite_difference_gradient(lambda w: lagrangian(kind, w, sol.multipliers, mu, pi, q, c), sol.weights)
            worst_g = max(worst_g, float(np.max(np.abs(g))))
    passed = worst_w <= 1e-8 and worst_g <= 1e-6
    return passed, f"{len(instances)} instances x 5 objectives: max |w - w_kkt| {worst_w:.1e}, max |grad L| {worst_g:.1e}"


def check_04_bandit_sweep():
    start = time.perf_counter()
    config = load_config(CONFIGS / "bandit_sweep_desk.json")
    result = run_experiment(config, JOBS)
    rows = result.tables["summary"].rows
    stats = {(r[0], r[1]): r for r in rows}
    sizes = config.options["sizes"]
    col = {"var": 3, "bias_sq": 5, "mean_w": 7}

    def get(n, est, what):
        return stats[(n, est)][col[what]]

    is_var = [get(n, "is", "var") for n in sizes]
    sp_var = [get(n, "sparho", "var") for n in sizes]
    increasing = all(b > a for a, b in zip(is_var, is_var[1:]))
    # "lower" must exceed floating-point noise: at |A|=2 both estimators are the same function
    lower = [s < i * (1 - 1e-9) for s, i in zip(sp_var, is_var)]
    shrinks = get(1024, "sparho", "var") < get(4, "sparho", "var")
    clipped = [
        get(n, "clipped_sparho", "bias_sq") < get(n, "clipped_is", "bias_sq")
        and get(n, "clipped_sparho", "mean_w") > get(n, "clipped_is", "mean_w")
        for n in sizes
        if n >= 4
    ]
    elapsed = time.perf_counter() - start
    failing = [n for n, ok in zip(sizes, lower) if not ok]
    passed = increasing and all(lower) and shrinks and all(clipped) and elapsed < 120
    detail = (
        f"(a) IS variance increasing: {increasing}; Sparho lower at every size: {all(lower)}"
        + (f" (not lower at |A| in {failing}: IS {is_var[0]:.6g} vs Sparho {sp_var[0]:.6g})" if failing else "")
        + f"; Sparho |A|=1024 < |A|=4: {shrinks}; (b) clipped ordering at |A|>=4: {all(clipped)}; {elapsed:.1f}s"
    )
    return passed, detail


def check_05_forward_backward():
    rng = np.random.default_rng(105)
    mdp, mu, pi = make_path_world(8, 5, 1.0, rng)
    worst = 0.0
    episodes = [sample_episode(mdp, mu, rng) for _ in range(100)]
    tables = []
    for _ in episodes:
        q = rng.normal(0.0, 1.0, (mdp.n_states, mdp.n_actions))
        q[mdp.terminal] = 0.0
        tables.append(q)
    for variant in Variant:
        for lam in (0.0, 0.5, 1.0):
            for traj, q in zip(episodes, tables):
                value = TabularQ(mdp.n_states, mdp.n_actions, mdp.terminal, q)
                learner = TraceLearner(value, mu, pi, LearnerConfig.for_variant(variant, 1.0, lam), frozen=True)
                for s, a, r, s2 in traj.steps():
                    learner.step(s, a, r, s2, bool(mdp.terminal[s2]))
                targets = forward_lambda_return(traj, q, pi, lam, mdp.gamma, learner.weight)
                forward = np.zeros_like(q)
                for t, (s, a) in enumerate(zip(traj.states, traj.actions)):
                    forward[s, a] += targets[t] - q[s, a]
                worst = max(worst, float(np.max(np.abs(forward - learner.pending))))
    return worst <= 1e-10, f"100 episodes x 4 variants x 3 lambdas: max |backward - forward| {worst:.1e}"


def check_06_on_policy_collapse():
    rng = np.random.default_rng(106)
    mdp, _, pi = make_grid_world(5, "four", 0.5, 1.0, rng)
    mu = pi.copy()
    learners = [
        TraceLearner(TabularQ(mdp.n_states, mdp.n_actions, mdp.terminal), mu, pi,
                     LearnerConfig.for_variant(v, 0.3, 0.875))
        for v in Variant
    ]
    sampler = Sampler(mdp, mu)
    s = sampler.reset(rng)
    mismatches = 0
    for _ in range(10_000):
        a = sampler.action(s, rng)
        r, s2, done = sampler.transition(s, a, rng)
        for learner in learners:
            learner.step(s, a, r, s2, done)
        ref = learners[0].value.table
        mismatches += sum(not np.array_equal(ref, l.value.table) for l in learners[1:])
        s = sampler.reset(rng) if done else s2
    return mismatches == 0, f"10,000 steps: {mismatches} step-wise table mismatches"


def check_07_fixed_points():
    rng = np.random.default_rng(107)
    worst_is = worst_sp = 0.0
    for _ in range(20):
        n_states = int(rng.integers(2, 6))  # plus the appended terminal state: at most 6
        n_actions = int(rng.integers(2, 5))
        mdp, mu, pi = random_mdp(n_states, n_actions, rng)
        q_pi = true_action_values(mdp, pi)
        q_any = rng.normal(0.0, 3.0, q_pi.shape)
        g = expected_return_vector(mdp, mu, pi, q_any, WeightKind.IS)
        worst_is = max(worst_is, float(np.max(np.abs(g - q_pi))))
        g = expected_return_vector(mdp, mu, pi, q_pi, WeightKind.SPARHO)
        worst_sp = max(worst_sp, float(np.max(np.abs(g - q_pi))))
    passed = worst_is <= 1e-8 and worst_sp <= 1e-8
    return passed, f"20 MDPs: IS max error {worst_is:.1e}; Sparho at q_pi max error {worst_sp:.1e}"


def check_08_sampling_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(108)
    mdp, mu, pi = random_mdp(2, 3, rng)  # two live states plus a terminal
    q_current = true_action_values(mdp, pi) + rng.normal(0.0, 0.5, (mdp.n_states, mdp.n_actions))
    q_current[mdp.terminal] = 0.0
    expected = expected_return_vector(mdp, mu, pi, q_current, WeightKind.SPARHO)
    weights = weight_table(mdp, mu, pi, q_current, WeightKind.SPARHO)
    pairs = [(s, a) for s in range(mdp.n_states) if not mdp.terminal[s] for a in range(mdp.n_actions)]
    samples = sample_per_decision_returns(mdp, mu, weights, pairs, 1_000_000, rng)
    worst = 0.0
    for (s, a), g in zip(pairs, samples):
        z = abs(g.mean() - expected[s, a]) / (g.std(ddof=1) / math.sqrt(g.size))
        worst = max(worst, z)
    elapsed = time.perf_counter() - start
    return worst < 4.0 and elapsed < 60, f"{len(pairs)} pairs x 1e6 returns: max |z| {worst:.2f}; {elapsed:.1f}s"


def check_09_gridworld_ordering():
    start = time.perf_counter()
    config = load_config(CONFIGS / "gridworld_desk.json")
    result = run_experiment(config, JOBS)
    best = {b["variant"]: b for b in result.summary["best"]}

    def summary(name):
        b = best[name]
        return RunSummary(b["final_rms"], b["final_rms_se"], b["runs"], b["n_finite"])

    def gap(a, b):
        sa, sb = summary(a), summary(b)
        return (sb.mean - sa.mean) / pooled_stderr(sa, sb)

    g1, g2 = gap("sparho_lambda", "q_lambda"), gap("resparho_lambda", "retrace_lambda")
    elapsed = time.perf_counter() - start
    cells = "; ".join(f"{k} {v['final_rms']:.3f}+-{v['final_rms_se']:.3f} (a={v['alpha']}, l={v['lambda']})"
                      for k, v in best.items())
    passed = g1 >= 2 and g2 >= 2 and elapsed < 900
    return passed, f"Sparho vs Q {g1:.1f} SE, ReSparho vs Retrace {g2:.1f} SE; {cells}; {elapsed:.0f}s"


def check_10_nstep_limit():
    mdp, mu, pi = load_mdp(two_state_placeholder_path())
    q_pi = true_action_values(mdp, pi)
    v = (pi * q_pi).sum(axis=1)
    xs = np.linspace(v[0] - 2, v[0] + 2, 21)
    ys = np.linspace(v[1] - 2, v[1] + 2, 21)
    worst = 0.0
    for kind in (WeightKind.IS, WeightKind.SPARHO):
        mc = np.array(vector_field(mdp, mu, pi, q_pi, xs, ys, 0.1, kind, None))
        n64 = np.array(vector_field(mdp, mu, pi, q_pi, xs, ys, 0.1, kind, 64))
        if not np.array_equal(mc[:, 4], n64[:, 4]):
            return False, "singular cells differ between the two fields"
        ok = mc[:, 4] == 1
        worst = max(worst, float(np.max(np.abs(mc[ok, 2:4] - n64[ok, 2:4]))))
    return worst <= 1e-6, f"21x21 grid, IS and Sparho: max |n=64 - MC| {worst:.1e}"


def check_11_mc_convergence():
    config = load_config(CONFIGS / "mc_desk.json")
    result = run_experiment(config, JOBS)
    rows = result.tables["summary"].rows  # variant, alpha, episode, rms, se, n_finite, runs
    reached = [r for r in rows if r[2] <= 50_000 and r[3] < 0.05]
    final = rows[-1]
    first = reached[0][2] if reached else None
    passed = bool(reached)
    return passed, (f"depth {config.options['depth']}, {config.runs} seeds: mean RMS {final[3]:.4f} at episode "
                    f"{final[2]}; first below 0.05 at episode {first}")


def _tiny_configs():
    return [
        {"experiment": "bandit-sweep", "runs": 50, "options": {"sizes": [2, 8, 64]}},
        {"experiment": "bandit-online", "runs": 4, "steps": 100},
        {"experiment": "pathworld", "runs": 3, "steps": 300, "alphas": [0.3], "lambdas": [0.5, 0.875], "record_every": 100,
         "options": {"widths": [4], "depth": 3}},
        {"experiment": "gridworld", "runs": 3, "steps": 500, "alphas": [0.3], "lambdas": [0.875], "record_every": 100},
        {"experiment": "gridworld-linear", "runs": 3, "steps": 500, "alphas": [0.1], "lambdas": [0.5], "record_every": 100},
        {"experiment": "emphatic", "runs": 3, "steps": 500, "alphas": [0.01], "lambdas": [0.5], "record_every": 100},
        {"experiment": "dynamics", "options": {"resolution": 5, "trajectory_steps": 10, "n_values": [None, 4]}},
        {"experiment": "mc", "runs": 3, "steps": 200, "record_every": 50},
    ]


def check_12_reproducibility():
    mismatched = []
    with tempfile.TemporaryDirectory() as tmp:
        for spec in _tiny_configs():
            config = ExperimentConfig.from_dict({**spec, "seed": 12345})
            outs = []
            for tag, jobs in (("a", 1), ("b", 1), ("c", 8)):
                out = Path(tmp) / f"{config.experiment}-{tag}"
                run_experiment(config, jobs).write(out)
                outs.append(out)
            for out in outs[1:]:
                for csv_file in sorted(outs[0].glob("*.csv")):
                    if not filecmp.cmp(csv_file, out / csv_file.name, shallow=False):
                        mismatched.append(f"{config.experiment}/{csv_file.name}")
    n = len(_tiny_configs())
    return not mismatched, f"{n} experiments, reruns with --jobs 1 and 8: mismatched {mismatched or 'none'}"


CHECKS = [
    ("01", "constraint suite", check_01_constraints),
    ("02", "variance dominance", check_02_variance_dominance),
    ("03", "oracle equivalence", check_03_oracle_equivalence),
    ("04", "bandit sweep ordering", check_04_bandit_sweep),
    ("05", "forward-backward equivalence", check_05_forward_backward),
    ("06", "on-policy collapse", check_06_on_policy_collapse),
    ("07", "fixed points", check_07_fixed_points),
    ("08", "sampling oracle", check_08_sampling_oracle),
    ("09", "grid world ordering", check_09_gridworld_ordering),
    ("10", "n-step limit", check_10_nstep_limit),
    ("11", "Monte Carlo convergence", check_11_mc_convergence),
    ("12", "reproducibility", check_12_reproducibility),
]


def _line(number, name, passed, detail):
    return f"[acceptance {number}] {'PASS' if passed else 'FAIL'} {name}: {detail}"


@pytest.mark.acceptance
@pytest.mark.parametrize("number,name,check", CHECKS, ids=[f"{n}-{name.replace(' ', '_')}" for n, name, _ in CHECKS])
def test_acceptance(number, name, check, capsys):
    passed, detail = check()
    with capsys.disabled():
        print("\n" + _line(number, name, passed, detail))
    assert passed, detail


if __name__ == "__main__":
    failures = 0
    for number, name, check in CHECKS:
        passed, detail = check()
        failures += not passed
        print(_line(number, name, passed, detail), flush=True)
    sys.exit(1 if failures else 0)
