"""Observation allocation by minimizing conditional expected loss on the simplex."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ._kernels import optimize_simplex
from .model import DEFAULT_LOSS, GlobalState, VulnerabilityState
from .risk import expected_loss

STEEPNESS = 15.0
MIDPOINT = 0.34
BOUND_SHARE = 1e-4


def intervention_response(r, steepness: float = STEEPNESS, midpoint: float = MIDPOINT):
    """Fraction of expected loss removed when a share ``r`` of observations is assigned."""
    return 1.0 / (1.0 + np.exp(-steepness * (np.asarray(r, dtype=float) - midpoint)))


@dataclass(frozen=True)
class OptConfig:
    max_iterations: int = 1000
    gradient_tolerance: float = 1e-6
    min_proportion: float = 1e-6
    steepness: float = STEEPNESS
    midpoint: float = MIDPOINT


@dataclass(frozen=True)
class AllocationResult:
    proportions: dict
    objective_value: float
    iterations: int
    converged: bool


def allocation_objective(unit_losses, r, steepness: float = STEEPNESS,
                         midpoint: float = MIDPOINT):
    """Total expected loss after the intervention; sums over the trailing axis."""
    L = np.asarray(unit_losses, dtype=float)
    return np.sum(L * (1.0 - intervention_response(r, steepness, midpoint)), axis=-1)


def objective_gradient(unit_losses, r, steepness: float = STEEPNESS, midpoint: float = MIDPOINT):
    """Gradient of :func:`allocation_objective` with respect to ``r``."""
    h = intervention_response(r, steepness, midpoint)
    return -np.asarray(unit_losses, dtype=float) * steepness * h * (1.0 - h)


def _to_simplex(v, eps):
    n = v.shape[-1]
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    sm = e / e.sum(axis=-1, keepdims=True)
    return eps + (1.0 - n * eps) * sm, sm


def conditional_expected_loss(state: VulnerabilityState, c: Sequence[float], r: float,
                              steepness: float = STEEPNESS, midpoint: float = MIDPOINT) -> float:
    """Expected daily loss of one vulnerability given observation share ``r``."""
    return float((1.0 - intervention_response(r, steepness, midpoint)) * expected_loss(state, c))


def optimize_unit_losses(unit_losses, cfg: OptConfig = OptConfig(), init=None):
    """Minimize the conditional expected loss for a batch of problems.

    ``unit_losses`` has shape (S, n).  Proportions are parameterized as
    ``eps + (1 - n eps) softmax(v)`` and gradient descent with Armijo
    backtracking and Barzilai-Borwein step lengths starts from ``v = 0``
    (the uniform allocation) unless ``init`` supplies starting logits.  The
    objective is scaled by the total loss so a single tolerance fits all
    problems.  Convergence is declared when the projected gradient in ``r``
    (the KKT residual of the simplex problem, with shares whose softmax weight
    is below ``BOUND_SHARE`` treated as bound) has norm below
    ``cfg.gradient_tolerance``.

    Returns (proportions (S, n), objective (S,), iterations (S,), converged (S,),
    final logits (S, n)).
    """
    L = np.atleast_2d(np.asarray(unit_losses, dtype=float))
    S, n = L.shape
    eps = cfg.min_proportion
    if n * eps >= 1:
        raise ValueError("min_proportion too large for the number of vulnerabilities")
    scale = L.sum(axis=1, keepdims=True)
    scale[scale <= 0] = 1.0
    k, m = cfg.steepness, cfg.midpoint
    v0 = np.zeros((S, n)) if init is None else np.array(init, dtype=float).reshape(S, n)
    v, _, iters, res = optimize_simplex(L / scale, v0, eps, k, m, BOUND_SHARE,
                                        cfg.max_iterations, cfg.gradient_tolerance)
    r, _ = _to_simplex(v, eps)
    return r, allocation_objective(L, r, k, m), iters, res < cfg.gradient_tolerance, v


def _as_states(states):
    if isinstance(states, GlobalState):
        return list(states.vuln_ids), [states.vulns[v] for v in states.vuln_ids]
    if isinstance(states, Mapping):
        return list(states), list(states.values())
    states = list(states)
    return list(range(len(states))), states


def unit_losses(states, c: Sequence[float] = DEFAULT_LOSS) -> np.ndarray:
    """Per-vulnerability expected loss with no intervention."""
    return np.array([expected_loss(s, c) for s in _as_states(states)[1]])


def optimize_allocation(states, c: Sequence[float] = DEFAULT_LOSS,
                        cfg: OptConfig = OptConfig()) -> AllocationResult:
    """Optimal observation proportions.

    ``states`` is a list of vulnerability states (proportions keyed by
    position), a mapping from identifier to state, or a :class:`GlobalState`.
    """
    keys, vs = _as_states(states)
    if len(vs) < 2:
        raise ValueError("at least two vulnerabilities are required")
    L = unit_losses(vs, c)
    r, f, it, conv, _ = optimize_unit_losses(L[None, :], cfg)
    return AllocationResult(
        proportions=dict(zip(keys, r[0].tolist())),
        objective_value=float(f[0]), iterations=int(it[0]), converged=bool(conv[0]),
    )
