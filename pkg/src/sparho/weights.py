"""Closed-form importance weights for a single state's action distribution.

Every function here works along the last axis, so ``mu``, ``pi`` and ``q`` may
be shaped ``(n_actions,)`` for one state or ``(batch, n_actions)`` for many
independent instances at once.  Weights are plain ``float64`` arrays.

Families
--------
* ``is``               ordinary importance sampling ratio ``pi / mu``.
* ``sparho``           minimum ``Var_mu(w)`` subject to ``E_mu[wQ] = E_pi[Q]``
                       and ``E_mu[w] = 1``.
* ``l2_to_one``        minimum ``E_mu[(w - 1)^2]`` with only the value constraint.
* ``l2_to_c``          minimum ``E_mu[(w - c)^2]`` with only the value constraint.
* ``minvar_length_c``  minimum ``E_mu[(w - c)^2]`` with ``E_mu[w] = c``.
* ``minvar_product``   minimum ``Var_mu(wQ)`` with both constraints.

:func:`kkt_oracle` solves the same problems by assembling and factorising the
full stationarity/feasibility system, without using any closed form.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "DEGENERACY_TOL",
    "SINGULAR_Q_TOL",
    "DegenerateInputError",
    "SingularInputError",
    "WeightKind",
    "WeightStats",
    "KktSolution",
    "is_weights",
    "sparho_weights",
    "clip_weights",
    "clipped_kind",
    "l2_to_one_weights",
    "l2_to_c_weights",
    "minvar_length_c_weights",
    "minvar_product_weights",
    "compute_weights",
    "kkt_oracle",
    "lagrangian",
    "weight_stats",
]

DEGENERACY_TOL = 1e-12
SINGULAR_Q_TOL = 1e-9


class DegenerateInputError(ValueError):
    """The requested weights are undefined for this input (zero variance, singular system)."""


class SingularInputError(DegenerateInputError):
    """An action-value is (numerically) zero where its reciprocal is required."""


class WeightKind(str, Enum):
    IS = "is"
    SPARHO = "sparho"
    CLIPPED_IS = "clipped_is"
    CLIPPED_SPARHO = "clipped_sparho"
    L2_TO_ONE = "l2_to_one"
    L2_TO_C = "l2_to_c"
    MINVAR_LENGTH_C = "minvar_length_c"
    MINVAR_PRODUCT = "minvar_product"

    @property
    def clipped(self) -> bool:
        return self in (WeightKind.CLIPPED_IS, WeightKind.CLIPPED_SPARHO)

    @property
    def base(self) -> "WeightKind":
        """Unclipped family a clipped kind is derived from."""
        return {
            WeightKind.CLIPPED_IS: WeightKind.IS,
            WeightKind.CLIPPED_SPARHO: WeightKind.SPARHO,
        }.get(self, self)


def clipped_kind(kind: WeightKind) -> WeightKind:
    kind = WeightKind(kind)
    mapping = {WeightKind.IS: WeightKind.CLIPPED_IS, WeightKind.SPARHO: WeightKind.CLIPPED_SPARHO}
    if kind.clipped:
        return kind
    if kind not in mapping:
        raise ValueError(f"no clipped variant of {kind.value!r}")
    return mapping[kind]


def _as_arrays(*arrays):
    out = [np.asarray(a, dtype=np.float64) for a in arrays]
    n = out[0].shape[-1] if out[0].ndim else None
    for a in out:
        if a.ndim == 0 or a.shape[-1] != n:
            raise ValueError(
                f"action dimension mismatch: {[x.shape for x in out]}"
            )
    return out


def _check_behavior(mu: np.ndarray) -> None:
    if np.any(~(mu > 0.0)):
        raise ValueError("behavior policy must be soft (every probability > 0)")


def _expect(p: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.sum(p * x, axis=-1)


def is_weights(mu, pi) -> np.ndarray:
    """Ordinary importance sampling ratios ``pi[a] / mu[a]``."""
    mu, pi = _as_arrays(mu, pi)
    _check_behavior(mu)
    return pi / mu


def _shifted_moments(mu, x):
    """Centered values of ``x`` and their ``mu``-variance, computed about a reference entry.

    ``mu`` sums to one only to rounding and ``E_mu[x]`` is only representable
    to one ulp of ``|x|``; both errors are amplified by ``1 / Var`` when the
    values nearly coincide.  Differences from the most likely action's value
    are exact for close values, and the normalising mass is kept explicit.
    Returns ``(mass, ref, mean_shift, centered, var)`` with
    ``E_mu[x] = ref + mean_shift``.
    """
    mass = np.sum(mu, axis=-1)
    ref = np.take_along_axis(x, np.argmax(mu, axis=-1)[..., None], axis=-1)
    y = x - ref
    shift = _expect(mu, y) / mass
    shift = shift + _expect(mu, y - shift[..., None]) / mass
    centered = y - shift[..., None]
    return mass, ref[..., 0], shift, centered, _expect(mu, centered * centered)


def _degenerate(var: np.ndarray, second: np.ndarray) -> np.ndarray:
    return var < DEGENERACY_TOL * np.maximum(1.0, second)


def _minvar_around(mu, pi, q, c):
    """Shared closed form of the two-constraint minimum-variance family.

    Returns the weights and the mask of rows whose action-value variance is
    below the degeneracy threshold (weights there are set to ``c``).
    """
    mass, ref, shift, centered, var = _shifted_moments(mu, q)
    # E_pi[Q] - c E_mu[Q], expanded about the reference value
    gap = _expect(pi, q - ref[..., None]) - c * shift + (np.sum(pi, axis=-1) - c) * ref
    degenerate = _degenerate(var, _expect(mu, q * q))
    scale = np.where(degenerate, 0.0, gap / np.where(degenerate, 1.0, var))
    base = np.where(degenerate, c, c / mass)
    return base[..., None] + centered * scale[..., None], degenerate


def sparho_weights(mu, pi, q, *, check: bool = True) -> np.ndarray:
    """Minimum-variance value-aware weights.

    ``w = 1 + (Q - E_mu[Q]) (E_pi[Q] - E_mu[Q]) / Var_mu(Q)``.  When
    ``Var_mu(Q)`` is numerically zero every action gets weight 1, which is
    feasible and variance-minimal in that case.  Weights may be negative.
With two actions the constraints leave no freedom and the result is the
plain ratio ``pi / mu``.

    ``check=False`` skips input validation; it is meant for inner loops whose
    inputs were validated once up front.
    """
    if check:
        mu, pi, q = _as_arrays(mu, pi, q)
        _check_behavior(mu)
    w, degenerate = _minvar_around(mu, pi, q, 1.0)
    if mu.shape[-1] == 2:
        # two constraints pin two weights: the only feasible point is the ratio
        # itself, and forming it directly avoids the 1 / Var amplification
        ratio = np.divide(pi, mu, out=np.ones_like(w), where=mu > 0)
        w = np.where(degenerate[..., None] | (mu <= 0), w, ratio)
    on_policy = np.all(mu == pi, axis=-1)
    if np.any(on_policy):
        w = np.where(on_policy[..., None], 1.0, w)
    return w


def clip_weights(w, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    if lo > hi:
        raise ValueError(f"empty clip range [{lo}, {hi}]")
    return np.clip(np.asarray(w, dtype=np.float64), lo, hi)


def _second_moment_checked(mu, q):
    second = _expect(mu, q * q)
    if np.any(second < DEGENERACY_TOL):
        raise DegenerateInputError("E_mu[Q^2] is numerically zero")
    return second


def l2_to_c_weights(mu, pi, q, c: float) -> np.ndarray:
    """Weights closest to ``c`` in ``mu``-weighted l2 satisfying only the value constraint."""
    mu, pi, q = _as_arrays(mu, pi, q)
    _check_behavior(mu)
    second = _second_moment_checked(mu, q)
    scale = (_expect(pi, q) - c * _expect(mu, q)) / second
    return c + q * scale[..., None]


def l2_to_one_weights(mu, pi, q) -> np.ndarray:
    return l2_to_c_weights(mu, pi, q, 1.0)


def minvar_length_c_weights(mu, pi, q, c: float) -> np.ndarray:
    """Minimum ``E_mu[(w - c)^2]`` subject to ``E_mu[wQ] = E_pi[Q]`` and ``E_mu[w] = c``.

    At ``c = 1`` this is exactly :func:`sparho_weights`, except that a
    degenerate action-value variance raises instead of falling back.
    """
    mu, pi, q = _as_arrays(mu, pi, q)
    _check_behavior(mu)
    w, degenerate = _minvar_around(mu, pi, q, c)
    if np.any(degenerate):
        raise DegenerateInputError("Var_mu(Q) is numerically zero")
    return w


def minvar_product_weights(mu, pi, q) -> np.ndarray:
    """Minimum ``Var_mu(wQ)`` subject to both constraints.

    Needs every ``Q_a`` away from zero and reciprocal values ``1/Q`` that are
    not all equal.
    """
    mu, pi, q = _as_arrays(mu, pi, q)
    _check_behavior(mu)
    qmax = np.max(np.abs(q), axis=-1, keepdims=True)
    if np.any(np.abs(q) < SINGULAR_Q_TOL * qmax) or np.any(qmax == 0.0):
        raise SingularInputError("action-values too close to zero for the 1/Q form")
    value = _expect(pi, q)
    inv = 1.0 / q
    mass, ref, shift, centered, den = _shifted_moments(mu, inv)
    m1 = ref + shift
    if np.any(_degenerate(den, _expect(mu, inv * inv))):
        raise DegenerateInputError("Var_mu(1/Q) is numerically zero")
    # minimum-variance form in u = wQ; avoids cancelling large 1/Q^2 terms
    u = (value / mass)[..., None] + centered * ((1.0 - m1 * value) / den)[..., None]
    return u * inv


def compute_weights(kind, mu, pi, q=None, *, c: float = 1.0, clip=(0.0, 1.0)) -> np.ndarray:
    """Dispatch on :class:`WeightKind`."""
    kind = WeightKind(kind)
    if kind is WeightKind.IS:
        return is_weights(mu, pi)
    if kind is WeightKind.CLIPPED_IS:
        return clip_weights(is_weights(mu, pi), *clip)
    if q is None:
        raise ValueError(f"{kind.value} weights need action-values")
    if kind is WeightKind.SPARHO:
        return sparho_weights(mu, pi, q)
    if kind is WeightKind.CLIPPED_SPARHO:
        return clip_weights(sparho_weights(mu, pi, q), *clip)
    if kind is WeightKind.L2_TO_ONE:
        return l2_to_one_weights(mu, pi, q)
    if kind is WeightKind.L2_TO_C:
        return l2_to_c_weights(mu, pi, q, c)
    if kind is WeightKind.MINVAR_LENGTH_C:
        return minvar_length_c_weights(mu, pi, q, c)
    return minvar_product_weights(mu, pi, q)


@dataclass(frozen=True)
class KktSolution:
    weights: np.ndarray
    multipliers: np.ndarray
    condition: float


_ORACLE_KINDS = (
    WeightKind.SPARHO,
    WeightKind.L2_TO_ONE,
    WeightKind.L2_TO_C,
    WeightKind.MINVAR_LENGTH_C,
    WeightKind.MINVAR_PRODUCT,
)


def _problem(objective: WeightKind, mu, pi, q, c):
    """Quadratic objective ``0.5 w'Hw + g'w`` (up to a constant) plus equality constraints ``Aw = b``."""
    value = float(pi @ q)
    if objective in (WeightKind.SPARHO, WeightKind.L2_TO_ONE):
        c = 1.0
    if objective is WeightKind.MINVAR_PRODUCT:
        hess = np.diag(2.0 * mu * q * q)
        lin = -2.0 * mu * q * value
        cons = np.vstack([mu * q, mu])
        rhs = np.array([value, 1.0])
    else:
        hess = np.diag(2.0 * mu)
        lin = -2.0 * c * mu
        if objective in (WeightKind.L2_TO_ONE, WeightKind.L2_TO_C):
            cons = (mu * q)[None, :]
            rhs = np.array([value])
        else:
            cons = np.vstack([mu * q, mu])
            rhs = np.array([value, c])
    return hess, lin, cons, rhs


def kkt_oracle(mu, pi, q, objective=WeightKind.SPARHO, c: float = 1.0, *, cond_limit: float = 1e13) -> KktSolution:
    """Solve a weight problem through its dense KKT linear system.

    With ``L(w, lam) = f(w) + sum_j lam_j (b_j - A_j w)`` stationarity reads
    ``H w - A' lam = -g`` and feasibility ``A w = b``.  The block system is
    factorised with partial pivoting (LAPACK ``gesv``).  Multipliers follow
    the same sign convention, so for the sparho objective
    ``w = 1 + Q lam0 / 2 + lam1 / 2``.
    """
    objective = WeightKind(objective)
    if objective not in _ORACLE_KINDS:
        raise ValueError(f"no quadratic program for {objective.value!r}")
    mu, pi, q = _as_arrays(mu, pi, q)
    if mu.ndim != 1:
        raise ValueError("kkt_oracle solves one instance at a time")
    _check_behavior(mu)
    hess, lin, cons, rhs = _problem(objective, mu, pi, q, c)
    n, m = hess.shape[0], cons.shape[0]
    system = np.zeros((n + m, n + m))
    system[:n, :n] = hess
    system[:n, n:] = -cons.T
    system[n:, :n] = cons
    vector = np.concatenate([-lin, rhs])
    condition = float(np.linalg.cond(system))
    if not np.isfinite(condition) or condition > cond_limit:
        raise DegenerateInputError(f"KKT system is singular (condition {condition:.3g})")
    solution = np.linalg.solve(system, vector)
    return KktSolution(solution[:n], solution[n:], condition)


def lagrangian(objective, w, multipliers, mu, pi, q, c: float = 1.0) -> float:
    """Lagrangian value, written out term by term for finite-difference checks."""
    objective = WeightKind(objective)
    w = np.asarray(w, dtype=np.float64)
    lam = np.asarray(multipliers, dtype=np.float64)
    mu, pi, q = _as_arrays(mu, pi, q)
    value = float(np.dot(pi, q))
    if objective in (WeightKind.SPARHO, WeightKind.L2_TO_ONE):
        c = 1.0
    if objective is WeightKind.MINVAR_PRODUCT:
        f = np.sum(mu * (w * q - value) ** 2)
    else:
        f = np.sum(mu * (w - c) ** 2)
    out = f + lam[0] * (value - np.sum(mu * w * q))
    if objective in (WeightKind.SPARHO, WeightKind.MINVAR_LENGTH_C):
        out += lam[1] * (c - np.sum(mu * w))
    elif objective is WeightKind.MINVAR_PRODUCT:
        out += lam[1] * (1.0 - np.sum(mu * w))
    return float(out)


@dataclass(frozen=True)
class WeightStats:
    """Exact moments of a weight vector under the behavior policy."""

    mean_weight: np.ndarray
    weight_variance: np.ndarray
    estimate_variance: np.ndarray
    bias: np.ndarray

    @property
    def bias_sq(self) -> np.ndarray:
        return self.bias * self.bias


def weight_stats(mu, pi, q, w) -> WeightStats:
    mu, pi, q, w = _as_arrays(mu, pi, q, w)
    mean_w = _expect(mu, w)
    dw = w - mean_w[..., None]
    estimate = w * q
    mean_est = _expect(mu, estimate)
    de = estimate - mean_est[..., None]
    return WeightStats(
        mean_weight=mean_w,
        weight_variance=_expect(mu, dw * dw),
        estimate_variance=_expect(mu, de * de),
        bias=mean_est - _expect(pi, q),
    )
