"""Off-policy prediction learners over tabular or linear action-values.

The backward-view learners implement, for every weighting family,

    G_t - Q(S_t, A_t) = sum_{k >= t} delta_k prod_{i=t+1}^{k} gamma lambda w_i

with Expected Sarsa TD errors ``delta_k`` and accumulating traces.  Weights
are recomputed from the current action-values at every visit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .envs import Sampler, TabularMDP, sample_episode, validate_policy
from .metrics import MetricSeries, rms_error
from .weights import DEGENERACY_TOL, WeightKind, _check_behavior


class DivergenceError(FloatingPointError):
    """A learner produced a non-finite weight, TD error or followon trace."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


class Variant(str, Enum):
    Q_LAMBDA = "q_lambda"
    SPARHO_LAMBDA = "sparho_lambda"
    RETRACE_LAMBDA = "retrace_lambda"
    RESPARHO_LAMBDA = "resparho_lambda"

    @property
    def weights(self) -> WeightKind:
        return _VARIANT_WEIGHTS[self]


_VARIANT_WEIGHTS = {
    Variant.Q_LAMBDA: WeightKind.IS,
    Variant.SPARHO_LAMBDA: WeightKind.SPARHO,
    Variant.RETRACE_LAMBDA: WeightKind.CLIPPED_IS,
    Variant.RESPARHO_LAMBDA: WeightKind.CLIPPED_SPARHO,
}
LAMBDA_VARIANTS = tuple(Variant)
TRACE_WEIGHTS = (WeightKind.IS, WeightKind.SPARHO, WeightKind.CLIPPED_IS, WeightKind.CLIPPED_SPARHO)


@dataclass
class LearnerConfig:
    weights: WeightKind
    alpha: float
    lambda_: float = 0.0
    gamma: float = 1.0
    clip: tuple[float, float] | None = None
    n: int | None = None

    def __post_init__(self):
        if isinstance(self.weights, Variant):
            self.weights = self.weights.weights
        self.weights = WeightKind(self.weights)
        if self.weights not in TRACE_WEIGHTS:
            raise ValueError(f"learners support {[k.value for k in TRACE_WEIGHTS]}, got {self.weights.value!r}")
        if self.weights.clipped and self.clip is None:
            self.clip = (0.0, 1.0)
        if self.clip is not None and not self.weights.clipped:
            raise ValueError("clip range given for an unclipped weighting")
        if self.clip is not None and self.clip[0] > self.clip[1]:
            raise ValueError("empty clip range")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.n is not None and self.n < 1:
            raise ValueError("n must be at least 1")

    @classmethod
    def for_variant(cls, variant, alpha, lambda_=0.0, gamma=1.0, **kwargs) -> "LearnerConfig":
        return cls(Variant(variant).weights, alpha, lambda_, gamma, **kwargs)


# --------------------------------------------------------------------------
# Weights at a visited pair


def sparho_weight_at(mu_s: np.ndarray, pi_s: np.ndarray, q_s: np.ndarray, a: int, mass: float | None = None,
                     ref: int | None = None) -> float:
    """Value-aware weight of action ``a`` alone; same formula and degeneracy rule as the vector form.

    No softness check is made, so empirical behavior estimates with zero
    entries are accepted.  ``mass`` (``sum(mu_s)``) and ``ref`` (``argmax(mu_s)``)
    may be passed in when precomputed.
    """
    mass = float(mu_s.sum()) if mass is None else mass
    q_ref = q_s[int(np.argmax(mu_s)) if ref is None else ref]
    y = q_s - q_ref
    shift = (mu_s @ y) / mass
    shift += (mu_s @ (y - shift)) / mass
    centered = y - shift
    var = mu_s @ (centered * centered)
    if var < DEGENERACY_TOL * max(1.0, mu_s @ (q_s * q_s)):
        return 1.0
    if len(q_s) == 2 and mu_s[a] > 0:
        return float(pi_s[a] / mu_s[a])
    gap = pi_s @ y - shift + (pi_s.sum() - 1.0) * q_ref
    return 1.0 / mass + centered[a] * gap / var


class WeightProvider:
    """Weight of the visited pair ``(s, a)`` given that state's current action-values.

    The value-aware weight is evaluated for the single visited action with
    the same closed form and degeneracy rule as
    :func:`sparho.weights.sparho_weights`.
    """

    def __init__(self, mu, pi, kind, clip=(0.0, 1.0)):
        self.kind = WeightKind(kind)
        if self.kind not in TRACE_WEIGHTS:
            raise ValueError(f"unsupported trace weighting {self.kind.value!r}")
        self.mu = np.asarray(mu, dtype=np.float64)
        self.pi = np.asarray(pi, dtype=np.float64)
        _check_behavior(self.mu)
        self.lo, self.hi = clip if self.kind.clipped else (-math.inf, math.inf)
        ratio = self.pi / self.mu
        if self.kind.clipped:
            ratio = np.clip(ratio, self.lo, self.hi)
        self._ratio = ratio.tolist()
        self._value_aware = self.kind.base is WeightKind.SPARHO
        self._mass = self.mu.sum(axis=1).tolist()
        self._ref = np.argmax(self.mu, axis=1).tolist()
        self._on_policy = np.all(self.mu == self.pi, axis=1).tolist()

    def __call__(self, s: int, a: int, q_s: np.ndarray) -> float:
        if not self._value_aware:
            return self._ratio[s][a]
        if self._on_policy[s]:
            return 1.0
        w = sparho_weight_at(self.mu[s], self.pi[s], q_s, a, self._mass[s], self._ref[s])
        return min(max(w, self.lo), self.hi)


# --------------------------------------------------------------------------
# Value representations


class TabularQ:
    def __init__(self, n_states: int, n_actions: int, terminal=None, table=None):
        self.table = np.zeros((n_states, n_actions)) if table is None else np.array(table, dtype=np.float64)
        self.terminal = np.zeros(n_states, dtype=bool) if terminal is None else np.asarray(terminal, dtype=bool)
        self.table[self.terminal] = 0.0

    def values(self, s: int) -> np.ndarray:
        return self.table[s]

    def new_trace(self) -> np.ndarray:
        return np.zeros_like(self.table)

    def add_gradient(self, trace: np.ndarray, s: int, a: int, scale: float = 1.0) -> None:
        trace[s, a] += scale

    def apply(self, increment: np.ndarray) -> None:
        self.table += increment

    def as_table(self) -> np.ndarray:
        return self.table.copy()


class LinearQ:
    """One weight vector per action: ``Q(s, a) = theta[a] . phi(s)``; terminal states read 0."""

    def __init__(self, features: np.ndarray, n_actions: int, terminal=None, theta=None):
        self.features = np.asarray(features, dtype=np.float64)
        n_states, dim = self.features.shape
        self.theta = np.zeros((n_actions, dim)) if theta is None else np.array(theta, dtype=np.float64)
        self.terminal = np.zeros(n_states, dtype=bool) if terminal is None else np.asarray(terminal, dtype=bool)
        self._zeros = np.zeros(n_actions)

    def values(self, s: int) -> np.ndarray:
        if self.terminal[s]:
            return self._zeros
        return self.theta @ self.features[s]

    def new_trace(self) -> np.ndarray:
        return np.zeros_like(self.theta)

    def add_gradient(self, trace: np.ndarray, s: int, a: int, scale: float = 1.0) -> None:
        trace[a] += scale * self.features[s]

    def apply(self, increment: np.ndarray) -> None:
        self.theta += increment

    def as_table(self) -> np.ndarray:
        table = self.features @ self.theta.T
        table[self.terminal] = 0.0
        return table


def expected_next_value(q_next: np.ndarray, pi_next: np.ndarray) -> float:
    return float(pi_next @ q_next)


def td_error_expected_sarsa(value, pi, s: int, a: int, r: float, s_next: int, done: bool, gamma: float) -> float:
    """``R + gamma E_pi[Q(S', .)] - Q(S, A)`` with no bootstrap at terminal ``S'``."""
    boot = 0.0 if done else float(pi[s_next] @ value.values(s_next))
    return r + gamma * boot - float(value.values(s)[a])


# --------------------------------------------------------------------------
# Backward-view lambda learners


class TraceLearner:
    """Q(lambda), Sparho(lambda), Retrace(lambda) and ReSparho(lambda).

    Per transition: weight the visited pair, decay the trace by
    ``gamma lambda w``, add the pair's gradient, then move the parameters by
    ``alpha delta trace``.  With ``frozen=True`` increments are summed into
    ``pending`` and the parameters are left untouched.
    """

    def __init__(self, value, mu, pi, config: LearnerConfig, frozen: bool = False):
        self.value = value
        self.pi = np.asarray(pi, dtype=np.float64)
        self.config = config
        self.weight = WeightProvider(mu, pi, config.weights, config.clip or (0.0, 1.0))
        self.frozen = frozen
        self.trace = value.new_trace()
        self.pending = value.new_trace()
        self.t = 0
        self.last_weight = math.nan

    def reset(self) -> None:
        self.trace.fill(0.0)

    def _emphasis(self, s: int, w: float) -> float:
        return 1.0

    def step(self, s: int, a: int, r: float, s_next: int, done: bool) -> float:
        cfg = self.config
        q_s = self.value.values(s)
        w = self.weight(s, a, q_s)
        if not math.isfinite(w):
            raise DivergenceError("non-finite importance weight", self.t)
        self.last_weight = w
        emphasis = self._emphasis(s, w)
        self.trace *= cfg.gamma * cfg.lambda_ * w
        self.value.add_gradient(self.trace, s, a, emphasis)
        boot = 0.0 if done else float(self.pi[s_next] @ self.value.values(s_next))
        delta = r + cfg.gamma * boot - float(q_s[a])
        if not math.isfinite(delta):
            raise DivergenceError("non-finite TD error", self.t)
        increment = (cfg.alpha * delta) * self.trace
        if self.frozen:
            self.pending += increment
        else:
            self.value.apply(increment)
        self.t += 1
        if done:
            self.reset()
        return delta


class EmphaticLearner(TraceLearner):
    """Emphatic Q(lambda) with an interchangeable trace weighting.

    ``F_t = gamma w_{t-1} F_{t-1} + i(S_t)`` and
    ``M_t = lambda i(S_t) + (1 - lambda) F_t`` scale the gradient added to
    the trace.
    """

    def __init__(self, value, mu, pi, config: LearnerConfig, interest=None, frozen: bool = False):
        super().__init__(value, mu, pi, config, frozen)
        n_states = self.pi.shape[0]
        self.interest = np.ones(n_states) if interest is None else np.asarray(interest, dtype=np.float64)
        self.followon = 0.0
        self.emphasis = 0.0
        self._prev_weight = 0.0

    def reset(self) -> None:
        super().reset()
        self.followon = 0.0
        self._prev_weight = 0.0

    def _emphasis(self, s: int, w: float) -> float:
        cfg = self.config
        i_s = self.interest[s]
        self.followon = cfg.gamma * self._prev_weight * self.followon + i_s
        if not math.isfinite(self.followon):
            raise DivergenceError("non-finite followon trace", self.t)
        self.emphasis = cfg.lambda_ * i_s + (1.0 - cfg.lambda_) * self.followon
        self._prev_weight = w
        return self.emphasis


def make_learner(kind: str, value, mu, pi, config: LearnerConfig, **kwargs) -> TraceLearner:
    if kind == "emphatic":
        return EmphaticLearner(value, mu, pi, config, **kwargs)
    return TraceLearner(value, mu, pi, config, **kwargs)


def run_online(learner: TraceLearner, mdp: TabularMDP, mu, steps: int, rng, q_true=None, record_every: int = 0,
               sampler: Sampler | None = None):
    """Feed ``steps`` behavior transitions to ``learner``, restarting episodes at termination.

    Returns the list of ``(step, rms)`` records (RMS against ``q_true`` after
    every ``record_every`` steps, plus the final step).
    """
    sampler = sampler or Sampler(mdp, mu)
    records = []
    s = sampler.reset(rng)
    for t in range(1, steps + 1):
        a = sampler.action(s, rng)
        r, s2, done = sampler.transition(s, a, rng)
        learner.step(s, a, r, s2, done)
        s = sampler.reset(rng) if done else s2
        if q_true is not None and ((record_every and t % record_every == 0) or t == steps):
            records.append((t, rms_error(learner.value.as_table(), q_true, mdp.terminal)))
    return records


# --------------------------------------------------------------------------
# Forward-view oracle


def forward_lambda_return(traj, q_table, pi, lambda_: float, gamma: float, weight_fn, form: str = "expected") -> np.ndarray:
    """Per-step lambda-returns of a complete episode under frozen action-values.

    ``form="expected"`` is the control-variate recursion

        G_t = R + gamma (lambda (w' G_{t+1} + E_pi Q' - w' Q(S', A'))
                         + (1 - lambda) E_pi Q')

    and ``form="sampled"`` bootstraps on the reweighted sampled successor,
    ``G_t = R + gamma (lambda w' G_{t+1} + (1 - lambda) w' Q(S', A'))``.
    ``weight_fn(s, a, q_row)`` gives the weight of a successor pair.
    """
    if not traj.terminated:
        raise ValueError("forward lambda-return needs a complete episode")
    if form not in ("expected", "sampled"):
        raise ValueError(f"unknown form {form!r}")
    q_table = np.asarray(q_table, dtype=np.float64)
    T = len(traj)
    out = np.zeros(T)
    g = 0.0
    for t in range(T - 1, -1, -1):
        r = traj.rewards[t]
        if t == T - 1:
            g = r
        else:
            s2, a2 = traj.states[t + 1], traj.actions[t + 1]
            w = weight_fn(s2, a2, q_table[s2])
            q_sa = q_table[s2, a2]
            if form == "expected":
                ev = float(pi[s2] @ q_table[s2])
                g = r + gamma * (lambda_ * (w * g + ev - w * q_sa) + (1.0 - lambda_) * ev)
            else:
                g = r + gamma * (lambda_ * w * g + (1.0 - lambda_) * w * q_sa)
        out[t] = g
    return out


# --------------------------------------------------------------------------
# Episodic learners


def _init_table(mdp, rng, noise: float, q_init=None) -> TabularQ:
    table = None
    if q_init is not None:
        table = q_init
    elif noise > 0:
        table = noise * rng.standard_normal((mdp.n_states, mdp.n_actions))
    return TabularQ(mdp.n_states, mdp.n_actions, mdp.terminal, table)


def _require_episodic(mdp: TabularMDP) -> None:
    if not mdp.terminal.any():
        raise ValueError("episodic learner needs an MDP with terminal states")


def run_mc_first_visit(mdp, mu, pi, config: LearnerConfig, rng, n_episodes: int, q_true=None, *,
                       init_noise: float = 1e-3, q_init=None, record_every: int = 0, max_steps: int = 10**6):
    """First-visit Monte Carlo with per-decision weighting of the successor pair.

    Backward over each episode: ``G <- R_{t+1} + gamma w_{t+1} G`` with the
    weight of ``(S_{t+1}, A_{t+1})`` under the current Q (0 past the end),
    and ``Q <- Q + alpha (G - Q)`` at first visits.
    """
    _require_episodic(mdp)
    mu = validate_policy(mu, mdp, soft=True)
    pi = validate_policy(pi, mdp)
    value = _init_table(mdp, rng, init_noise, q_init)
    weight = WeightProvider(mu, pi, config.weights, config.clip or (0.0, 1.0))
    sampler = Sampler(mdp, mu)
    series = MetricSeries(metric="rms")
    table, gamma, alpha = value.table, config.gamma, config.alpha
    for episode in range(1, n_episodes + 1):
        traj = sample_episode(mdp, mu, rng, max_steps=max_steps, sampler=sampler)
        first = {}
        for t, (s, a) in enumerate(zip(traj.states, traj.actions)):
            first.setdefault((s, a), t)
        g = 0.0
        for t in range(len(traj) - 1, -1, -1):
            if t + 1 < len(traj):
                s2, a2 = traj.states[t + 1], traj.actions[t + 1]
                w = weight(s2, a2, table[s2])
            else:
                w = 0.0
            g = traj.rewards[t] + gamma * w * g
            s, a = traj.states[t], traj.actions[t]
            if first[(s, a)] == t:
                table[s, a] += alpha * (g - table[s, a])
        if q_true is not None and ((record_every and episode % record_every == 0) or episode == n_episodes):
            series.append(episode, rms_error(table, q_true, mdp.terminal))
    return value, series


def run_n_step(mdp, mu, pi, config: LearnerConfig, rng, n_episodes: int, q_true=None, *,
               q_init=None, init_noise: float = 0.0, record_every: int = 0, max_steps: int = 10**6):
    """n-step per-decision TD: ``G_{t:t+n} = R_{t+1} + gamma w_{t+1} G_{t+1:t+n}``, ``G_{h:h} = Q(S_h, A_h)``.

    Each pair's weight is computed from the current Q when the pair is
    visited; the update of time ``tau`` is applied once ``S_{tau+n}`` is
    known (or at episode end).
    """
    if config.n is None:
        raise ValueError("n-step learner needs config.n")
    _require_episodic(mdp)
    mu = validate_policy(mu, mdp, soft=True)
    pi = validate_policy(pi, mdp)
    value = _init_table(mdp, rng, init_noise, q_init)
    weight = WeightProvider(mu, pi, config.weights, config.clip or (0.0, 1.0))
    sampler = Sampler(mdp, mu)
    series = MetricSeries(metric="rms")
    table, gamma, alpha, n = value.table, config.gamma, config.alpha, config.n

    def target(states, actions, rewards, weights, tau, h, terminal_at):
        g = 0.0 if h == terminal_at else table[states[h], actions[h]]
        for k in range(h - 1, tau - 1, -1):
            g = rewards[k] + gamma * (weights[k + 1] if k + 1 < len(weights) else 0.0) * g
        return g

    for episode in range(1, n_episodes + 1):
        s = sampler.reset(rng)
        states, actions, rewards, weights = [s], [], [], []
        a = sampler.action(s, rng)
        actions.append(a)
        weights.append(weight(s, a, table[s]))
        T = None
        tau = 0
        t = 0
        while True:
            if T is None:
                r, s2, done = sampler.transition(states[t], actions[t], rng)
                rewards.append(r)
                states.append(s2)
                if done:
                    T = t + 1
                else:
                    a2 = sampler.action(s2, rng)
                    actions.append(a2)
                    weights.append(weight(s2, a2, table[s2]))
                if t + 1 >= max_steps and T is None:
                    raise RuntimeError(f"episode exceeded {max_steps} steps")
            tau = t - n + 1
            if tau >= 0:
                h = tau + n if T is None else min(tau + n, T)
                g = target(states, actions, rewards, weights, tau, h, T)
                sa = (states[tau], actions[tau])
                table[sa] += alpha * (g - table[sa])
            t += 1
            if T is not None and tau >= T - 1:
                break
        if q_true is not None and ((record_every and episode % record_every == 0) or episode == n_episodes):
            series.append(episode, rms_error(table, q_true, mdp.terminal))
    return value, series
