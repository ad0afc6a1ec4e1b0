"""Finite MDPs, policies and trajectory sampling.

Everything is an explicit tabular model: ``transition[s, a, s']`` and
``reward[s, a, s']`` dense arrays, a boolean terminal mask and a start-state
distribution.  Terminal states self-loop with zero reward.
"""
from __future__ import annotations

import bisect
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .weights import _check_behavior


STOCHASTIC_TOL = 1e-12
DEFAULT_MAX_STEPS = 10**6

FOUR_DIRECTIONS = ((-1, 0), (0, 1), (1, 0), (0, -1))  # N, E, S, W
EIGHT_DIRECTIONS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


class MDPValidationError(ValueError):
    pass


@dataclass(eq=False)
class TabularMDP:
    transition: np.ndarray
    reward: np.ndarray
    terminal: np.ndarray
    gamma: float
    start: np.ndarray
    name: str = "mdp"

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.start = np.asarray(self.start, dtype=np.float64)
        self.gamma = float(self.gamma)
        validate_mdp(self)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def terminal_states(self) -> list[int]:
        return [int(s) for s in np.flatnonzero(self.terminal)]

    def expected_reward(self) -> np.ndarray:
        """``r(s, a) = sum_s' p(s'|s,a) r(s,a,s')``."""
        return np.sum(self.transition * self.reward, axis=-1)


def validate_mdp(mdp: TabularMDP) -> None:
    P, R = mdp.transition, mdp.reward
    if P.ndim != 3 or P.shape[0] != P.shape[2]:
        raise MDPValidationError(f"transition must be (S, A, S), got {P.shape}")
    if R.shape != P.shape:
        raise MDPValidationError(f"reward shape {R.shape} != transition shape {P.shape}")
    S = P.shape[0]
    if mdp.terminal.shape != (S,):
        raise MDPValidationError("terminal mask must have one entry per state")
    if mdp.start.shape != (S,):
        raise MDPValidationError("start distribution must have one entry per state")
    if not 0.0 <= mdp.gamma <= 1.0:
        raise MDPValidationError(f"gamma must lie in [0, 1], got {mdp.gamma}")
    if np.any(P < 0) or not np.all(np.isfinite(P)) or not np.all(np.isfinite(R)):
        raise MDPValidationError("transition probabilities must be finite and non-negative")
    sums = P.sum(axis=-1)
    live = ~mdp.terminal
    if np.any(np.abs(sums[live] - 1.0) > STOCHASTIC_TOL):
        bad = np.argwhere(np.abs(sums - 1.0) > STOCHASTIC_TOL)
        raise MDPValidationError(f"transition rows do not sum to 1 at (s, a) = {bad[:5].tolist()}")
    for s in np.flatnonzero(mdp.terminal):
        if not np.allclose(P[s, :, s], 1.0, atol=STOCHASTIC_TOL) or np.any(R[s] != 0.0):
            raise MDPValidationError(f"terminal state {s} must self-loop with zero reward")
    if np.any(mdp.start < 0) or abs(mdp.start.sum() - 1.0) > STOCHASTIC_TOL:
        raise MDPValidationError("start distribution must be a probability vector")
    if mdp.gamma == 1.0 and not _reaches_terminal(mdp):
        raise MDPValidationError(
            "gamma = 1 requires every state to reach a terminal state under a soft policy"
        )


def _reaches_terminal(mdp: TabularMDP) -> bool:
    # A soft policy terminates with probability 1 iff every state has a path to a terminal.
    reach = mdp.terminal.copy()
    successor = mdp.transition.max(axis=1) > 0.0
    while True:
        grown = reach | (successor @ reach.astype(np.int64) > 0)
        if np.array_equal(grown, reach):
            return bool(reach.all())
        reach = grown


def _one_hot(n: int, i: int) -> np.ndarray:
    v = np.zeros(n)
    v[i] = 1.0
    return v


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def validate_policy(policy: np.ndarray, mdp: TabularMDP | None = None, *, soft: bool = False) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.ndim != 2:
        raise ValueError("policy table must be (n_states, n_actions)")
    if mdp is not None and policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {policy.shape} does not match MDP")
    if np.any(policy < 0) or np.any(np.abs(policy.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
        raise ValueError("policy rows must be probability vectors")
    if soft:
        _check_behavior(policy)
    return policy


# --------------------------------------------------------------------------
# Bandits


@dataclass(frozen=True)
class BanditInstance:
    mu: np.ndarray
    pi: np.ndarray
    q: np.ndarray
    beta: float


def generate_bandits(n_instances: int, n_actions: int, beta: float, rng: np.random.Generator):
    """Batched bandit generator; returns ``(mu, pi, q)`` each shaped ``(n_instances, n_actions)``.

    ``mu`` and ``pi`` are softmaxes of independent ``N(0, beta)`` vectors and
    ``q = beta + N(0, beta)``; ``beta`` is the Normal scale.
    """
    if n_actions < 2:
        raise ValueError("a bandit needs at least two actions")
    if beta <= 0:
        raise ValueError("beta must be positive")
    shape = (n_instances, n_actions)
    mu = softmax(rng.normal(0.0, beta, size=shape))
    pi = softmax(rng.normal(0.0, beta, size=shape))
    q = beta + rng.normal(0.0, beta, size=shape)
    return mu, pi, q


def generate_bandit(n_actions: int, beta: float, rng: np.random.Generator) -> BanditInstance:
    mu, pi, q = generate_bandits(1, n_actions, beta, rng)
    return BanditInstance(mu[0], pi[0], q[0], float(beta))


# --------------------------------------------------------------------------
# Path World


def make_path_world(width: int, depth: int, beta: float, rng: np.random.Generator):
    """Layered graph: start -> ``depth`` layers of ``width`` nodes -> terminal.

    Action ``a`` from any node moves to node ``a`` of the next layer (or to
    the terminal from the last layer) and pays ``(1 + a) / width``.  Policies
    are drawn independently per state as ``softmax(N(0, beta))``.  Every
    episode has exactly ``depth + 1`` decisions.
    """
    if width < 2 or depth < 1:
        raise ValueError("path world needs width >= 2 and depth >= 1")
    n_states = 1 + depth * width + 1
    terminal = n_states - 1
    P = np.zeros((n_states, width, n_states))
    R = np.zeros_like(P)
    pay = (1.0 + np.arange(width)) / width

    def layer(i):  # i = 0 is the start state, i = depth + 1 the terminal
        if i == 0:
            return [0]
        if i == depth + 1:
            return [terminal]
        return list(range(1 + (i - 1) * width, 1 + i * width))

    for i in range(depth + 1):
        nxt = layer(i + 1)
        for s in layer(i):
            for a in range(width):
                s2 = nxt[0] if i == depth else nxt[a]
                P[s, a, s2] = 1.0
                R[s, a, s2] = pay[a]
    P[terminal, :, terminal] = 1.0
    mask = np.zeros(n_states, dtype=bool)
    mask[terminal] = True
    mdp = TabularMDP(P, R, mask, 1.0, _one_hot(n_states, 0), name=f"pathworld-{width}x{depth}")
    mu = softmax(rng.normal(0.0, beta, size=(n_states, width)))
    pi = softmax(rng.normal(0.0, beta, size=(n_states, width)))
    mu[terminal] = pi[terminal] = 1.0 / width
    return mdp, mu, pi


# --------------------------------------------------------------------------
# Grid World


def commitment_policy(n_states: int, n_actions: int, preferred, eps: float) -> np.ndarray:
    """Preferred action with probability ``1 - eps``, uniform with probability ``eps``."""
    if not 0.0 < eps <= 1.0:
        raise ValueError("eps must lie in (0, 1]")
    preferred = np.broadcast_to(np.asarray(preferred, dtype=np.int64), (n_states,))
    policy = np.full((n_states, n_actions), eps / n_actions)
    policy[np.arange(n_states), preferred] += 1.0 - eps
    return policy


def make_grid_world(
    side: int = 5,
    dirs: str = "four",
    eps_pi: float = 0.5,
    eps_mu: float = 1.0,
    rng: np.random.Generator | None = None,
    preferred_pi=None,
    preferred_mu=None,
    gamma: float = 1.0,
):
    """``side x side`` grid, centre start, terminals at top-left and bottom-right.

    Moves are deterministic, moving off the grid stays in place and every
    step pays -1.  States are numbered row-major.  When a preferred action is
    not given it is drawn from ``rng``; the two policies get distinct
    preferred actions so that equal ``eps`` values remain off-policy.
    """
    if side < 3 or side % 2 == 0:
        raise ValueError("grid side must be odd and at least 3")
    moves = {"four": FOUR_DIRECTIONS, "eight": EIGHT_DIRECTIONS}[dirs]
    n_actions = len(moves)
    if preferred_pi is None or preferred_mu is None:
        if rng is None:
            raise ValueError("rng is required to draw preferred actions")
        drawn = rng.choice(n_actions, size=2, replace=False)
        preferred_pi = drawn[0] if preferred_pi is None else preferred_pi
        preferred_mu = drawn[1] if preferred_mu is None else preferred_mu
    n_states = side * side
    terminal = np.zeros(n_states, dtype=bool)
    terminal[0] = terminal[n_states - 1] = True
    P = np.zeros((n_states, n_actions, n_states))
    R = np.zeros_like(P)
    for r in range(side):
        for c in range(side):
            s = r * side + c
            if terminal[s]:
                P[s, :, s] = 1.0
                continue
            for a, (dr, dc) in enumerate(moves):
                r2, c2 = r + dr, c + dc
                s2 = r2 * side + c2 if 0 <= r2 < side and 0 <= c2 < side else s
                P[s, a, s2] = 1.0
                R[s, a, s2] = -1.0
    centre = (side // 2) * side + side // 2
    mdp = TabularMDP(P, R, terminal, gamma, _one_hot(n_states, centre), name=f"grid-{side}-{dirs}")
    pi = commitment_policy(n_states, n_actions, preferred_pi, eps_pi)
    mu = commitment_policy(n_states, n_actions, preferred_mu, eps_mu)
    return mdp, mu, pi


def make_random_features(n_states: int, rng: np.random.Generator, n_bits: int = 16, n_ones: int = 8) -> np.ndarray:
    """One uniformly random ``n_bits``-choose-``n_ones`` binary pattern per state."""
    if n_states < 1:
        raise ValueError("need at least one state")
    keys = rng.random((n_states, n_bits))
    on = np.argsort(keys, axis=1)[:, :n_ones]
    features = np.zeros((n_states, n_bits))
    np.put_along_axis(features, on, 1.0, axis=1)
    return features


# --------------------------------------------------------------------------
# Custom MDPs from structured text files


def make_custom_mdp(spec: dict) -> TabularMDP:
    """Build and validate an MDP from a mapping (see ``load_mdp_spec`` for the file schema)."""
    try:
        S, A = int(spec["n_states"]), int(spec["n_actions"])
        P = np.asarray(spec["transition"], dtype=np.float64)
        R = np.asarray(spec["reward"], dtype=np.float64)
        gamma = float(spec["gamma"])
    except KeyError as exc:
        raise MDPValidationError(f"missing field {exc.args[0]!r}") from None
    if P.shape != (S, A, S):
        raise MDPValidationError(f"transition shape {P.shape} != ({S}, {A}, {S})")
    terminal = np.zeros(S, dtype=bool)
    for t in spec.get("terminal", []):
        if not 0 <= int(t) < S:
            raise MDPValidationError(f"terminal state {t} does not exist")
        terminal[int(t)] = True
    start = spec.get("start", 0)
    if np.ndim(start) == 0:
        if not 0 <= int(start) < S:
            raise MDPValidationError(f"start state {start} does not exist")
        start = _one_hot(S, int(start))
    return TabularMDP(P, R, terminal, gamma, np.asarray(start, dtype=np.float64), name=spec.get("name", "custom"))


def load_mdp_spec(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def load_mdp(path):
    """Load an MDP file; returns ``(mdp, mu, pi)`` where the policies may be ``None``."""
    spec = load_mdp_spec(path)
    mdp = make_custom_mdp(spec)
    mu = validate_policy(spec["mu"], mdp, soft=True) if "mu" in spec else None
    pi = validate_policy(spec["pi"], mdp) if "pi" in spec else None
    return mdp, mu, pi


def mdp_to_spec(mdp: TabularMDP, mu=None, pi=None) -> dict:
    out = {
        "name": mdp.name,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "terminal": mdp.terminal_states,
        "start": mdp.start.tolist(),
        "transition": mdp.transition.tolist(),
        "reward": mdp.reward.tolist(),
    }
    if mu is not None:
        out["mu"] = np.asarray(mu).tolist()
    if pi is not None:
        out["pi"] = np.asarray(pi).tolist()
    return out


def random_mdp(
    n_states: int,
    n_actions: int,
    rng: np.random.Generator,
    gamma: float = 0.9,
    terminate_prob: float | None = 0.3,
):
    """Dense random MDP with random soft policies; returns ``(mdp, mu, pi)``.

    With ``terminate_prob`` set an extra absorbing terminal state is
    appended and every transition ends the episode with that probability.
    """
    live = n_states
    total = live + (terminate_prob is not None)
    P = np.zeros((total, n_actions, total))
    P[:live, :, :live] = rng.dirichlet(np.ones(live), size=(live, n_actions))
    R = np.zeros_like(P)
    R[:live, :, :live] = rng.normal(0.0, 1.0, size=(live, n_actions, live))
    terminal = np.zeros(total, dtype=bool)
    if terminate_prob is not None:
        P[:live, :, :live] *= 1.0 - terminate_prob
        P[:live, :, live] = terminate_prob
        R[:live, :, live] = rng.normal(0.0, 1.0, size=(live, n_actions))
        P[live, :, live] = 1.0
        terminal[live] = True
    start = np.zeros(total)
    start[:live] = 1.0 / live
    mdp = TabularMDP(P, R, terminal, gamma, start, name=f"random-{n_states}x{n_actions}")
    mu = softmax(rng.normal(0.0, 1.0, size=(total, n_actions)))
    pi = softmax(rng.normal(0.0, 1.0, size=(total, n_actions)))
    return mdp, mu, pi


# --------------------------------------------------------------------------
# Sampling


class Sampler:
    """Inverse-CDF sampler over a fixed MDP and policy.

    Each draw consumes exactly one uniform from ``rng``, so two samplers fed
    identical generators produce identical streams.
    """

    def __init__(self, mdp: TabularMDP, policy: np.ndarray):
        self.mdp = mdp
        self.policy = validate_policy(policy, mdp)
        self._action_cdf = [list(np.cumsum(row)) for row in self.policy]
        cdf = np.cumsum(mdp.transition, axis=-1)
        self._next_cdf = [[list(cdf[s, a]) for a in range(mdp.n_actions)] for s in range(mdp.n_states)]
        self._reward = mdp.reward.tolist()
        self._terminal = mdp.terminal.tolist()
        self._start_cdf = list(np.cumsum(mdp.start))

    @staticmethod
    def _draw(cdf: list, u: float) -> int:
        i = bisect.bisect_right(cdf, u * cdf[-1])
        return min(i, len(cdf) - 1)

    def reset(self, rng) -> int:
        return self._draw(self._start_cdf, rng.random())

    def action(self, s: int, rng) -> int:
        return self._draw(self._action_cdf[s], rng.random())

    def transition(self, s: int, a: int, rng):
        """Returns ``(reward, next_state, done)``."""
        s2 = self._draw(self._next_cdf[s][a], rng.random())
        return self._reward[s][a][s2], s2, self._terminal[s2]


@dataclass
class Trajectory:
    states: list[int] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    next_states: list[int] = field(default_factory=list)
    terminated: bool = False
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.states)

    def steps(self):
        return zip(self.states, self.actions, self.rewards, self.next_states)


def sample_episode(
    mdp: TabularMDP,
    policy: np.ndarray,
    rng: np.random.Generator,
    max_steps: int = DEFAULT_MAX_STEPS,
    start_state: int | None = None,
    start_action: int | None = None,
    sampler: Sampler | None = None,
) -> Trajectory:
    """Roll out one episode; a run cut off at ``max_steps`` is flagged ``truncated``."""
    sampler = sampler or Sampler(mdp, policy)
    s = sampler.reset(rng) if start_state is None else int(start_state)
    traj = Trajectory()
    if mdp.terminal[s]:
        traj.terminated = True
        return traj
    a = start_action
    while len(traj) < max_steps:
        if a is None:
            a = sampler.action(s, rng)
        r, s2, done = sampler.transition(s, a, rng)
        traj.states.append(s)
        traj.actions.append(int(a))
        traj.rewards.append(r)
        traj.next_states.append(s2)
        if done:
            traj.terminated = True
            return traj
        s, a = s2, None
    traj.truncated = True
    warnings.warn(f"episode truncated after {max_steps} steps", RuntimeWarning, stacklevel=2)
    return traj


def two_state_placeholder_path() -> Path:
    return Path(__file__).parent / "data" / "two_state_mdp.json"
