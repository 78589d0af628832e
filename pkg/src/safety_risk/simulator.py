"""Stochastic safety environment used as ground truth for policy comparison.

Each vulnerability carries an unsafe propensity theta in [0, 1].  Every day,
allocated observations come back negative with a type-specific biased
probability, incidents arrive as Poisson(lambda_star * xi_base * theta), each
negative observation scales theta by (1 - delta), and theta then drifts to
min(1, k theta + alpha).
"""

from __future__ import annotations

import json
from functools import cached_property
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .model import DEFAULT_LOSS, N_LEVELS, DailyRecord, loss_vector
from .policies import AllocationPlan, ObservationBudget


class PlanBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class VulnEnvParams:
    lambda_star: float
    xi_base: float
    theta0: float
    k: float
    alpha_drift: float
    p: tuple

    def __post_init__(self):
        p = tuple(float(x) for x in self.p)
        object.__setattr__(self, "p", p)
        if self.lambda_star < 0:
            raise ValueError("lambda_star must be non-negative")
        if not 0 < self.xi_base < 1 or not 0 < self.theta0 < 1:
            raise ValueError("xi_base and theta0 must lie in (0, 1)")
        if not 0 < self.k <= 1 or self.alpha_drift <= 0:
            raise ValueError("k must lie in (0, 1] and alpha_drift must be positive")
        if len(p) != N_LEVELS or min(p) < 0 or abs(sum(p) - 1) > 1e-9:
            raise ValueError("p must be a probability vector over the six Hurt levels")

    @cached_property
    def hurt_tables(self):
        return _hurt_tables(self.p)

    @property
    def limit(self) -> float:
        """Fixed point of the drift-only recursion."""
        return 1.0 if self.k >= 1 else min(1.0, self.alpha_drift / (1 - self.k))


@dataclass(frozen=True)
class ObsTypeParams:
    m: int
    delta_neg: float
    eta_neg: float
    eta_pos: float

    def __post_init__(self):
        if self.m < 0 or not 0 < self.delta_neg < 1 or self.eta_neg <= 0 or self.eta_pos <= 0:
            raise ValueError("invalid observation-type parameters")


@dataclass(frozen=True)
class Scenario:
    vulns: Mapping[str, VulnEnvParams]
    obs_types: Mapping[str, ObsTypeParams]
    loss: tuple = DEFAULT_LOSS

    @property
    def vuln_ids(self) -> tuple:
        return tuple(self.vulns)

    @property
    def budget(self) -> ObservationBudget:
        return ObservationBudget({x: o.m for x, o in self.obs_types.items()})

    def to_dict(self) -> dict:
        return {
            "vulnerabilities": {v: asdict(p) for v, p in self.vulns.items()},
            "observation_types": {x: asdict(o) for x, o in self.obs_types.items()},
            "loss": list(self.loss),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        try:
            vulns = {str(v): VulnEnvParams(**p) for v, p in d["vulnerabilities"].items()}
            obs = {str(x): ObsTypeParams(**o) for x, o in d["observation_types"].items()}
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed scenario: {exc}") from exc
        loss = tuple(float(x) for x in d.get("loss", DEFAULT_LOSS))
        loss_vector(loss)
        return cls(vulns, obs, loss)


DEFAULT_SCENARIO = {
    "vulnerabilities": {
        "A": dict(lambda_star=17, xi_base=0.55, theta0=0.31, k=0.97, alpha_drift=0.04,
                  p=[0.5, 0.35, 0.13, 0.02, 0.0, 0.0]),
        "B": dict(lambda_star=13, xi_base=0.25, theta0=0.88, k=0.99, alpha_drift=0.005,
                  p=[0.6, 0.11, 0.11, 0.16, 0.02, 0.0]),
        "C": dict(lambda_star=22, xi_base=0.4, theta0=0.53, k=0.95, alpha_drift=0.01,
                  p=[0.3, 0.05, 0.35, 0.28, 0.02, 0.0]),
        "D": dict(lambda_star=12, xi_base=0.1, theta0=0.45, k=0.98, alpha_drift=0.005,
                  p=[0.2, 0.3, 0.25, 0.18, 0.04, 0.03]),
        "E": dict(lambda_star=15, xi_base=0.05, theta0=0.18, k=0.99, alpha_drift=0.01,
                  p=[0.2, 0.16, 0.16, 0.16, 0.16, 0.16]),
        "F": dict(lambda_star=5, xi_base=0.45, theta0=0.78, k=0.97, alpha_drift=0.02,
                  p=[0.4, 0.03, 0.08, 0.18, 0.26, 0.05]),
        "G": dict(lambda_star=22, xi_base=0.3, theta0=0.35, k=0.99, alpha_drift=0.005,
                  p=[0.65, 0.15, 0.08, 0.06, 0.04, 0.02]),
    },
    "observation_types": {
        "WSO": dict(m=2, delta_neg=0.03, eta_neg=100, eta_pos=150),
        "SAO": dict(m=2, delta_neg=0.03, eta_neg=100, eta_pos=100),
        "BPO": dict(m=1, delta_neg=0.03, eta_neg=120, eta_pos=100),
    },
    "loss": list(DEFAULT_LOSS),
}


def default_scenario() -> Scenario:
    return Scenario.from_dict(DEFAULT_SCENARIO)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return Scenario.from_dict(json.load(fh))


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class EnvState:
    """Environment state; randomness for day t is derived from (seed, t)."""

    theta: Mapping[str, float]
    day: int = 0
    seed: int = 0

    def __post_init__(self):
        th = {str(v): float(x) for v, x in dict(self.theta).items()}
        if any(not 0 <= x <= 1 for x in th.values()):
            raise ValueError("theta must lie in [0, 1]")
        object.__setattr__(self, "theta", th)


def initial_env(scenario: Scenario, seed: int = 0) -> EnvState:
    return EnvState({v: p.theta0 for v, p in scenario.vulns.items()}, 0, int(seed))


def negative_probability(theta, obs: ObsTypeParams):
    """Chance that one observation of this type is negative."""
    theta = np.asarray(theta, dtype=float)
    num = obs.eta_pos * theta
    return num / (num + obs.eta_neg * (1.0 - theta))


def _hurt_tables(p):
    """CDF of the AHL, and CDF of the PHL conditioned on each AHL (row a)."""
    p = np.asarray(p, dtype=float)
    cdf = np.cumsum(p)
    cond = np.zeros((N_LEVELS, N_LEVELS))
    for a in range(N_LEVELS):
        tail = p[a:].sum()
        if tail > 0:
            cond[a, a:] = np.cumsum(p[a:]) / tail
    return cdf, cond


def _sample_hurt(rng, tables, n):
    if n == 0:
        return (), ()
    cdf, cond = tables
    u = rng.random((2, n))
    top = N_LEVELS - 1
    ahl = np.minimum((u[0][:, None] >= cdf[None, :]).sum(axis=1), top)
    phl = np.minimum((u[1][:, None] >= cond[ahl]).sum(axis=1), top)
    return tuple(ahl.tolist()), tuple(phl.tolist())


def step_environment(env: EnvState, scenario: Scenario,
                     plan: Optional[AllocationPlan]) -> tuple[EnvState, list]:
    """Advance one day. ``plan=None`` means no observations are made.

    Incidents for each vulnerability use their own stream, so paired runs
    under different policies share incident randomness wherever theta agrees.
    """
    if plan is not None:
        for x, o in scenario.obs_types.items():
            if plan.total(x) != o.m:
                raise PlanBudgetError(f"plan assigns {plan.total(x)} {x} observations, "
                                      f"budget is {o.m}")
        unknown = {x for x, _ in plan.counts} - set(scenario.obs_types)
        if unknown:
            raise PlanBudgetError(f"plan uses unknown observation types {sorted(unknown)}")
    day = env.day + 1
    obs_rng = np.random.default_rng([env.seed, day, 0])
    theta = dict(env.theta)
    records = []
    for i, (vid, vp) in enumerate(scenario.vulns.items()):
        th = theta[vid]
        inc_rng = np.random.default_rng([env.seed, day, 1, i])
        n_e = int(inc_rng.poisson(vp.lambda_star * vp.xi_base * th))
        ahl, phl = _sample_hurt(inc_rng, vp.hurt_tables, n_e)
        obs = {}
        factor = 1.0
        for x, o in scenario.obs_types.items():
            n = plan.get(x, vid) if plan is not None else 0
            neg = int(obs_rng.binomial(n, negative_probability(th, o))) if n else 0
            obs[x] = (n, neg)
            factor *= (1.0 - o.delta_neg) ** neg
        records.append(DailyRecord(vid, day, n_e, ahl, phl, obs))
        theta[vid] = min(1.0, vp.k * th * factor + vp.alpha_drift)
    return EnvState(theta, day, env.seed), records


def true_metrics(env: EnvState, scenario: Scenario, c=None) -> dict:
    """Per-vulnerability (expected daily loss, P(incident with AHL >= 4))."""
    c = loss_vector(scenario.loss if c is None else c)
    out = {}
    for vid, vp in scenario.vulns.items():
        rate = vp.lambda_star * vp.xi_base * env.theta[vid]
        p = np.asarray(vp.p)
        out[vid] = (float(rate * (c @ p)), float(-np.expm1(-rate * (p[4] + p[5]))))
    return out


def baseline_theta(scenario: Scenario, days: int) -> np.ndarray:
    """Closed-form drift-only trajectory, shape (days + 1, n_vulns)."""
    out = np.empty((days + 1, len(scenario.vulns)))
    for i, vp in enumerate(scenario.vulns.values()):
        t = np.arange(days + 1)
        if vp.k == 1:
            th = vp.theta0 + vp.alpha_drift * t
        else:
            fix = vp.alpha_drift / (1 - vp.k)
            th = fix + (vp.theta0 - fix) * vp.k ** t
        # once the affine path crosses 1 it is clamped and stays there
        hit = np.flatnonzero(th >= 1)
        if len(hit):
            th[hit[0]:] = 1.0
        out[:, i] = th
    return out


@dataclass
class SimulationTrace:
    vuln_ids: tuple
    records: list = field(default_factory=list)      # per day: list of DailyRecord
    plans: list = field(default_factory=list)        # per day: AllocationPlan or None
    expected_loss: list = field(default_factory=list)  # per day: array (n_vulns,)
    tail_probability: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    error: Optional[Exception] = None

    def __len__(self):
        return len(self.records)


class PolicyError(RuntimeError):
    def __init__(self, day: int, cause: Exception):
        super().__init__(f"day {day}: {cause}")
        self.day = day
        self.cause = cause


def _record_metrics(trace: SimulationTrace, env: EnvState, scenario: Scenario):
    m = true_metrics(env, scenario)
    trace.expected_loss.append(np.array([m[v][0] for v in trace.vuln_ids]))
    trace.tail_probability.append(np.array([m[v][1] for v in trace.vuln_ids]))
    trace.theta.append(np.array([env.theta[v] for v in trace.vuln_ids]))


def run_simulations(scenario: Scenario, policies: Sequence, days: int,
                    seeds: Sequence[int], on_day=None) -> list:
    """Run one simulation per (policy, seed) pair in lockstep.

    All policies must share a class so that batched planning and updating can
    be used.  Metrics on row t are evaluated on the state at the end of day t.
    A failing seed stops with ``trace.error`` set; the others continue.
    """
    if days < 1:
        raise ValueError("days must be at least 1")
    if len(policies) != len(seeds):
        raise ValueError("one policy per seed is required")
    if not policies:
        return []
    cls = type(policies[0])
    envs = [initial_env(scenario, s) for s in seeds]
    traces = [SimulationTrace(scenario.vuln_ids) for _ in seeds]
    live = list(range(len(seeds)))
    for day in range(1, days + 1):
        try:
            plans = cls.plan_batch([policies[i] for i in live], day)
        except Exception as exc:
            for i in live:
                traces[i].error = PolicyError(day, exc)
            break
        stepped = []
        for i, plan in zip(live, plans):
            try:
                envs[i], recs = step_environment(envs[i], scenario, plan)
            except Exception as exc:
                traces[i].error = PolicyError(day, exc)
                continue
            traces[i].plans.append(plan)
            traces[i].records.append(recs)
            _record_metrics(traces[i], envs[i], scenario)
            stepped.append(i)
        errs = cls.observe_batch([policies[i] for i in stepped],
                                 [traces[i].records[-1] for i in stepped])
        live = []
        for i, err in zip(stepped, errs):
            if err is None:
                live.append(i)
            else:
                traces[i].error = PolicyError(day, err)
        if on_day is not None:
            on_day(day)
        if not live:
            break
    return traces


def run_simulation(scenario: Scenario, policy, days: int, seed: int = 0) -> SimulationTrace:
    """Single run; raises ``PolicyError`` with the failing day."""
    trace = run_simulations(scenario, [policy], days, [seed])[0]
    if trace.error is not None:
        raise trace.error
    return trace
