"""Observation-allocation policies: random, heuristic score, and risk-based."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .allocation import OptConfig, optimize_unit_losses, unit_losses
from .inference import McmcConfig, UpdateError, daily_update_batch
from .model import DEFAULT_LOSS, N_LEVELS, DailyRecord, GlobalState


@dataclass(frozen=True)
class ObservationBudget:
    per_type: Mapping[str, int]

    def __post_init__(self):
        per = {str(k): int(v) for k, v in dict(self.per_type).items()}
        if any(v < 0 for v in per.values()):
            raise ValueError("observation budgets must be non-negative")
        if not any(v > 0 for v in per.values()):
            raise ValueError("at least one observation type needs a positive budget")
        object.__setattr__(self, "per_type", per)

    @property
    def obs_types(self) -> tuple:
        return tuple(self.per_type)


@dataclass(frozen=True)
class AllocationPlan:
    """Integer observation counts keyed by (obs_type, vuln_id).

    ``converged`` is False when the plan came from an optimizer run that hit
    its iteration limit (the best iterate is still used).
    """

    counts: Mapping[tuple, int]
    converged: bool = True

    def total(self, obs_type: str) -> int:
        return sum(v for (x, _), v in self.counts.items() if x == obs_type)

    def get(self, obs_type: str, vuln_id: str) -> int:
        return self.counts.get((obs_type, vuln_id), 0)

    def proportions(self, vuln_ids: Sequence[str]) -> np.ndarray:
        """Share of the whole day's observations given to each vulnerability."""
        tot = np.array([sum(self.get(x, v) for x, w in self.counts if w == v) for v in vuln_ids],
                       dtype=float)
        s = tot.sum()
        return tot / s if s > 0 else tot


@dataclass(frozen=True)
class HeuristicConfig:
    weights: tuple = (0.25, 0.25, 0.25, 0.25)   # obs, incidents, AHL, PHL
    window: int = 30

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if len(w) != 4 or min(w) < 0 or sum(w) == 0:
            raise ValueError("heuristic weights must be four non-negative values, not all zero")
        if self.window < 1:
            raise ValueError("window must be at least one day")
        object.__setattr__(self, "weights", w)


def largest_remainder(proportions, m: int, order: Optional[Sequence] = None) -> np.ndarray:
    """Integer counts summing to ``m`` closest to ``m * proportions``.

    Floors are assigned first; the leftover units go to the largest fractional
    remainders, ties resolved by ``order`` (default: position).
    """
    r = np.asarray(proportions, dtype=float)
    if r.ndim != 1 or len(r) == 0 or np.any(r < 0) or not np.isfinite(r).all():
        raise ValueError("proportions must be a non-empty non-negative vector")
    s = r.sum()
    r = np.full(len(r), 1.0 / len(r)) if s <= 0 else r / s
    quota = m * r
    base = np.floor(quota).astype(int)
    rem = quota - base
    left = int(m - base.sum())
    keys = np.arange(len(r)) if order is None else np.argsort(np.argsort(order, kind="stable"))
    idx = np.lexsort((keys, -rem))[:left]
    base[idx] += 1
    return base


def _plan_from_proportions(vuln_ids, budget: ObservationBudget, r, converged=True) -> AllocationPlan:
    ids = list(vuln_ids)
    counts = {}
    for x, m in budget.per_type.items():
        n = largest_remainder(r, m, order=ids)
        for v, c in zip(ids, n):
            counts[(x, v)] = int(c)
    return AllocationPlan(counts, converged)


def random_policy(vuln_ids: Sequence[str], budget: ObservationBudget, seed) -> AllocationPlan:
    """Every observation goes to a uniformly chosen vulnerability."""
    ids = list(vuln_ids)
    if not ids:
        raise ValueError("no vulnerabilities")
    rng = np.random.default_rng(seed)
    counts = {}
    for x, m in budget.per_type.items():
        n = np.bincount(rng.integers(0, len(ids), m), minlength=len(ids))
        for v, c in zip(ids, n):
            counts[(x, v)] = int(c)
    return AllocationPlan(counts)


def heuristic_scores(history: Mapping[str, Sequence[DailyRecord]], cfg: HeuristicConfig,
                     t: int) -> dict:
    """Weighted indicator score per vulnerability over the days (t - window, t]."""
    lo = t - cfg.window
    wo, wi, wa, wp = cfg.weights
    out = {}
    for vid, recs in history.items():
        neg = tot = n_e = 0
        ahl, phl = [], []
        for rec in recs:
            if not lo < rec.day <= t:
                continue
            for n_tot, n_neg in rec.obs.values():
                tot += n_tot
                neg += n_neg
            n_e += len(rec.ahl)
            ahl.extend(rec.ahl)
            phl.extend(rec.phl)
        q_obs = neg / tot if tot else 0.0
        q_inc = 0.2 * n_e if n_e < 5 else 1.0
        top = N_LEVELS - 1
        q_ahl = float(np.mean(ahl)) / top if ahl else 0.0
        q_phl = float(np.mean(phl)) / top if phl else 0.0
        out[vid] = wo * q_obs + wi * q_inc + wa * q_ahl + wp * q_phl
    return out


def heuristic_policy(history, cfg: HeuristicConfig, budget: ObservationBudget, seed=None,
                     t: Optional[int] = None) -> AllocationPlan:
    """Observations proportional to heuristic scores.

    ``t`` defaults to the latest day present in ``history``.  ``seed`` is
    accepted for interface symmetry; rounding ties are resolved by identifier
    order, so the plan is deterministic.
    """
    if t is None:
        t = max((r.day for recs in history.values() for r in recs), default=0)
    scores = heuristic_scores(history, cfg, t)
    ids = list(history)
    return _plan_from_proportions(ids, budget, np.array([scores[v] for v in ids]))


def risk_based_policy(state: GlobalState, c=DEFAULT_LOSS, budget: ObservationBudget = None,
                      opt_cfg: OptConfig = OptConfig(), seed=None) -> AllocationPlan:
    """Integerized optimal proportions for the calibrated ``state``."""
    L = unit_losses(state, c)
    r, _, _, conv, _ = optimize_unit_losses(L[None, :], opt_cfg)
    return _plan_from_proportions(state.vuln_ids, budget, r[0], bool(conv[0]))


# -- stateful policy objects for the simulation loop -----------------------------

class Policy:
    """A policy plans day ``t`` from data up to day ``t - 1``."""

    name = "policy"

    def plan(self, day: int) -> Optional[AllocationPlan]:
        raise NotImplementedError

    def observe(self, records: Sequence[DailyRecord]) -> None:
        pass

    @classmethod
    def plan_batch(cls, policies, day):
        return [p.plan(day) for p in policies]

    @classmethod
    def observe_batch(cls, policies, records_list):
        """Feed each policy its records; returns a list of exceptions or None."""
        out = []
        for p, recs in zip(policies, records_list):
            try:
                p.observe(recs)
                out.append(None)
            except Exception as exc:  # reported per seed by the caller
                out.append(exc)
        return out


class BaselinePolicy(Policy):
    """No observations at all."""

    name = "baseline"

    def plan(self, day):
        return None


class RandomPolicy(Policy):
    name = "random"

    def __init__(self, vuln_ids, budget: ObservationBudget, seed: int):
        self.vuln_ids = list(vuln_ids)
        self.budget = budget
        self.seed = int(seed)

    def plan(self, day):
        return random_policy(self.vuln_ids, self.budget, [self.seed, 1, day])


class HeuristicPolicy(Policy):
    name = "heuristic"

    def __init__(self, vuln_ids, budget: ObservationBudget, cfg: HeuristicConfig = HeuristicConfig(),
                 seed: int = 0):
        self.vuln_ids = list(vuln_ids)
        self.budget = budget
        self.cfg = cfg
        self.seed = int(seed)
        self.history = {v: deque(maxlen=cfg.window) for v in self.vuln_ids}

    def plan(self, day):
        return heuristic_policy(self.history, self.cfg, self.budget, self.seed, t=day - 1)

    def observe(self, records):
        for rec in records:
            self.history[rec.vuln_id].append(rec)


@dataclass
class RiskBasedPolicy(Policy):
    """Bayesian calibration plus loss-minimizing allocation.

    Until the first update has fitted the rate product, observations are
    spread uniformly.  Each day's optimization starts from the uniform
    allocation; ``warm_start`` reuses the previous day's logits instead.
    """

    state: GlobalState
    budget: ObservationBudget
    mcmc: McmcConfig = McmcConfig()
    opt: OptConfig = OptConfig()
    c: tuple = DEFAULT_LOSS
    seed: int = 0
    use_phl: bool = True
    warm_start: bool = False
    logits: Optional[np.ndarray] = field(default=None, repr=False)
    last_converged: bool = True

    name = "risk"

    def _ready(self):
        return all(v.rate_product is not None for v in self.state.vulns.values())

    def plan(self, day):
        return type(self).plan_batch([self], day)[0]

    def observe(self, records):
        err = type(self).observe_batch([self], [records])[0]
        if err is not None:
            raise err

    @classmethod
    def plan_batch(cls, policies, day):
        out = [None] * len(policies)
        ready = [i for i, p in enumerate(policies) if p._ready()]
        for i, p in enumerate(policies):
            if i not in ready:
                n = len(p.state.vuln_ids)
                out[i] = _plan_from_proportions(p.state.vuln_ids, p.budget, np.full(n, 1.0 / n))
        if not ready:
            return out
        L = np.stack([unit_losses(policies[i].state, policies[i].c) for i in ready])
        init = None
        if policies[ready[0]].warm_start:
            init = np.stack([policies[i].logits if policies[i].logits is not None
                             else np.zeros(L.shape[1]) for i in ready])
        r, _, _, conv, v = optimize_unit_losses(L, policies[ready[0]].opt, init)
        for j, i in enumerate(ready):
            p = policies[i]
            p.logits = v[j]
            p.last_converged = bool(conv[j])
            out[i] = _plan_from_proportions(p.state.vuln_ids, p.budget, r[j], bool(conv[j]))
        return out

    @classmethod
    def observe_batch(cls, policies, records_list):
        states = [p.state for p in policies]
        seeds = [p.seed for p in policies]
        cfg = policies[0].mcmc
        res = daily_update_batch(states, records_list, cfg, seeds, policies[0].use_phl)
        out = []
        for p, new in zip(policies, res):
            if isinstance(new, UpdateError):
                out.append(new)
            else:
                p.state = new
                out.append(None)
        return out
