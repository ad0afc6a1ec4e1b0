"""Exact expected-update analysis on small tabular MDPs.

State-action pairs are flattened as ``s * n_actions + a``.  Pairs of terminal
states are pinned to zero: their rows and columns are removed from every
operator, so ``(I - M)`` is the identity there.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import TabularMDP
from .weights import WeightKind, compute_weights

BELLMAN_RESIDUAL_TOL = 1e-10
COND_LIMIT = 1e12


class SingularSystemError(np.linalg.LinAlgError):
    def __init__(self, message: str, condition: float = np.inf, iterate: int | None = None):
        super().__init__(message)
        self.condition = condition
        self.iterate = iterate


def _live_pairs(mdp: TabularMDP) -> np.ndarray:
    return np.repeat(~mdp.terminal, mdp.n_actions)


def pair_operator(mdp: TabularMDP, policy: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """``P[(s,a), (s',a')] = p(s'|s,a) policy(a'|s') w(s',a')`` with terminal pairs removed."""
    w = policy if weights is None else policy * weights
    S, A = mdp.n_states, mdp.n_actions
    op = (mdp.transition[:, :, :, None] * w[None, None, :, :]).reshape(S * A, S * A)
    live = _live_pairs(mdp)
    op[~live, :] = 0.0
    op[:, ~live] = 0.0
    return op


def _expected_reward(mdp: TabularMDP) -> np.ndarray:
    r = mdp.expected_reward().reshape(-1).copy()
    r[~_live_pairs(mdp)] = 0.0
    return r


def _solve(matrix: np.ndarray, rhs: np.ndarray, what: str):
    condition = float(np.linalg.cond(matrix))
    if not np.isfinite(condition) or condition > COND_LIMIT:
        raise SingularSystemError(f"{what}: system is singular (condition {condition:.3g})", condition)
    return np.linalg.solve(matrix, rhs), condition


def true_action_values(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    """Solve the Bellman equation for ``q_pi``; returns an ``(S, A)`` table."""
    M = mdp.gamma * pair_operator(mdp, pi)
    r = _expected_reward(mdp)
    q, _ = _solve(np.eye(len(r)) - M, r, "Bellman equation")
    residual = np.max(np.abs(r + M @ q - q))
    if residual > BELLMAN_RESIDUAL_TOL * max(1.0, np.max(np.abs(q))):
        raise SingularSystemError(f"Bellman residual {residual:.3g} exceeds tolerance")
    return q.reshape(mdp.n_states, mdp.n_actions)


def state_values(q: np.ndarray, pi: np.ndarray) -> np.ndarray:
    return np.sum(pi * q, axis=-1)


def weight_table(mdp: TabularMDP, mu, pi, q, kind=WeightKind.SPARHO, **kwargs) -> np.ndarray:
    """Per-(s, a) weights computed from the action-values ``q``; ones at terminal states."""
    w = np.ones((mdp.n_states, mdp.n_actions))
    live = ~mdp.terminal
    w[live] = compute_weights(kind, mu[live], pi[live], np.asarray(q)[live], **kwargs)
    return w


def behavior_operator(mdp, mu, pi, q_current, kind=WeightKind.SPARHO, **kwargs) -> np.ndarray:
    """``gamma P_mu diag(w)`` with ``w`` computed from ``q_current``."""
    w = weight_table(mdp, mu, pi, q_current, kind, **kwargs)
    return mdp.gamma * pair_operator(mdp, mu, w)


def expected_return_vector(mdp: TabularMDP, mu, pi, q_current, kind=WeightKind.SPARHO, **kwargs) -> np.ndarray:
    """Expected per-decision return ``(I - gamma P_mu diag(w))^-1 r`` as an ``(S, A)`` table."""
    M = behavior_operator(mdp, mu, pi, q_current, kind, **kwargs)
    r = _expected_reward(mdp)
    g, _ = _solve(np.eye(len(r)) - M, r, "expected return")
    return g.reshape(mdp.n_states, mdp.n_actions)


def expected_nstep_return(mdp: TabularMDP, mu, pi, q_current, n: int, kind=WeightKind.SPARHO, **kwargs) -> np.ndarray:
    """Expected n-step per-decision return bootstrapping on ``q_current``.

    ``sum_{k<n} M^k r + M^n q`` with ``M = gamma P_mu diag(w)``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    M = behavior_operator(mdp, mu, pi, q_current, kind, **kwargs)
    term = _expected_reward(mdp)
    total = np.zeros_like(term)
    for _ in range(n):
        total += term
        term = M @ term
    q = np.asarray(q_current, dtype=np.float64).reshape(-1).copy()
    q[~_live_pairs(mdp)] = 0.0
    total += np.linalg.matrix_power(M, n) @ q
    return total.reshape(mdp.n_states, mdp.n_actions)


def visitation(mdp: TabularMDP, mu) -> np.ndarray:
    """Expected visits to each (s, a) per episode under ``mu`` (undiscounted)."""
    d0 = (mdp.start[:, None] * mu).reshape(-1)
    d0[~_live_pairs(mdp)] = 0.0
    P = pair_operator(mdp, mu)
    d, _ = _solve((np.eye(len(d0)) - P).T, d0, "visitation")
    return d.reshape(mdp.n_states, mdp.n_actions)


@dataclass(frozen=True)
class ExpectedUpdate:
    """``delta_q`` over (s, a); ``projected_v`` is ``sum_a pi(a|s) (Q + dQ)(s, a)``."""

    delta_q: np.ndarray
    projected_v: np.ndarray
    delta_v: np.ndarray
    target: np.ndarray


def _update(mdp, q_current, mu, pi, alpha, target, visits):
    q_current = np.asarray(q_current, dtype=np.float64)
    delta = alpha * visits * (target - q_current)
    delta[mdp.terminal] = 0.0
    return ExpectedUpdate(
        delta_q=delta,
        projected_v=state_values(q_current + delta, pi),
        delta_v=state_values(delta, pi),
        target=target,
    )


def expected_mc_update(mdp, q_current, mu, pi, alpha: float, kind=WeightKind.SPARHO, *, visits=None, **kwargs) -> ExpectedUpdate:
    """Expected every-visit Monte Carlo update ``alpha d_mu (G - Q)``."""
    visits = visitation(mdp, mu) if visits is None else visits
    target = expected_return_vector(mdp, mu, pi, q_current, kind, **kwargs)
    return _update(mdp, q_current, mu, pi, alpha, target, visits)


def expected_nstep_update(mdp, q_current, mu, pi, alpha: float, n: int, kind=WeightKind.SPARHO, *, visits=None, **kwargs) -> ExpectedUpdate:
    visits = visitation(mdp, mu) if visits is None else visits
    target = expected_nstep_return(mdp, mu, pi, q_current, n, kind, **kwargs)
    return _update(mdp, q_current, mu, pi, alpha, target, visits)


def expected_update(mdp, q_current, mu, pi, alpha, kind=WeightKind.SPARHO, n: int | None = None, **kwargs) -> ExpectedUpdate:
    """Monte Carlo update when ``n`` is ``None``, otherwise the n-step TD update."""
    if n is None:
        return expected_mc_update(mdp, q_current, mu, pi, alpha, kind, **kwargs)
    return expected_nstep_update(mdp, q_current, mu, pi, alpha, n, kind, **kwargs)


def iterate_expected_updates(mdp, q0, steps: int, alpha: float, mu, pi, kind=WeightKind.SPARHO, n: int | None = None, **kwargs):
    """Deterministic iteration ``Q <- Q + dQ``.

    Returns ``(qs, vs)`` with shapes ``(steps + 1, S, A)`` and ``(steps + 1, S)``.
    A singular solve mid-way raises :class:`SingularSystemError` carrying the
    iterate index.
    """
    visits = visitation(mdp, mu)
    q = np.asarray(q0, dtype=np.float64).copy()
    qs, vs = [q.copy()], [state_values(q, pi)]
    for k in range(steps):
        try:
            upd = expected_update(mdp, q, mu, pi, alpha, kind, n, visits=visits, **kwargs)
        except SingularSystemError as exc:
            exc.iterate = k
            raise
        q = q + upd.delta_q
        qs.append(q.copy())
        vs.append(state_values(q, pi))
    return np.array(qs), np.array(vs)


def lift_state_values(v, q_ref, pi, mode: str = "min_norm") -> np.ndarray:
    """Action-values whose ``pi``-projection equals ``v``, anchored at ``q_ref``.

    ``shift`` adds ``v - v_ref`` to every action; ``min_norm`` makes the
    smallest Euclidean change, along ``pi / |pi|^2``.  Value-aware weights are
    invariant to per-state shifts of Q, so only ``min_norm`` exposes how the
    weights change with the starting values.
    """
    q_ref = np.asarray(q_ref, dtype=np.float64)
    gap = np.asarray(v, dtype=np.float64) - state_values(q_ref, pi)
    if mode == "shift":
        direction = np.ones_like(q_ref)
    elif mode == "min_norm":
        direction = pi / np.sum(pi * pi, axis=-1, keepdims=True)
    else:
        raise ValueError(f"unknown lift mode {mode!r}")
    return q_ref + gap[:, None] * direction


def vector_field(mdp, mu, pi, q_ref, v1_values, v2_values, alpha: float, kind=WeightKind.SPARHO, n: int | None = None,
                 states=(0, 1), lift: str = "min_norm", **kwargs):
    """Projected expected updates over a grid of starting state-values.

    ``q_ref`` supplies the action-values of states not on the grid and the
    anchor for lifting.  Returns rows ``(v1, v2, dv1, dv2, ok)``; ``ok`` is
    false where the expected-return system was singular.
    """
    visits = visitation(mdp, mu)
    base_v = state_values(q_ref, pi)
    rows = []
    for v1 in v1_values:
        for v2 in v2_values:
            v = base_v.copy()
            v[states[0]], v[states[1]] = v1, v2
            q = lift_state_values(v, q_ref, pi, lift)
            try:
                upd = expected_update(mdp, q, mu, pi, alpha, kind, n, visits=visits, **kwargs)
            except SingularSystemError:
                rows.append((float(v1), float(v2), np.nan, np.nan, False))
                continue
            dv = upd.delta_v
            rows.append((float(v1), float(v2), float(dv[states[0]]), float(dv[states[1]]), True))
    return rows
