"""Causal stream calibration and multi-policy simulation experiments."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .allocation import OptConfig
from .inference import McmcConfig, UpdateError, daily_update
from .model import DEFAULT_LOSS, DailyRecord, GlobalState, PriorConfig, initial_state
from .policies import (BaselinePolicy, HeuristicConfig, HeuristicPolicy, RandomPolicy,
                       RiskBasedPolicy)
from .risk import RiskReport, risk_reports
from .simulator import Scenario, run_simulations

log = logging.getLogger(__name__)

POLICY_NAMES = ("risk", "heuristic", "random", "baseline")
MAX_FAILED_FRACTION = 0.05


# -- configuration ----------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    prior: PriorConfig = PriorConfig()
    mcmc: McmcConfig = McmcConfig()
    optimizer: OptConfig = OptConfig()
    heuristic: HeuristicConfig = HeuristicConfig()
    loss: tuple = DEFAULT_LOSS
    use_phl: bool = True
    first_seed: int = 0


def _build(cls, d: Mapping):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**kw)


def config_from_dict(d: Mapping) -> ExperimentConfig:
    sections = {"prior": PriorConfig, "mcmc": McmcConfig, "optimizer": OptConfig,
                "heuristic": HeuristicConfig}
    unknown = set(d) - set(sections) - {"loss", "use_phl", "first_seed"}
    if unknown:
        raise ValueError(f"unknown configuration sections: {sorted(unknown)}")
    kw = {k: _build(cls, d[k]) for k, cls in sections.items() if k in d}
    if "loss" in d:
        kw["loss"] = tuple(float(x) for x in d["loss"])
    for k in ("use_phl", "first_seed"):
        if k in d:
            kw[k] = d[k]
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["loss"] = list(cfg.loss)
    d["heuristic"]["weights"] = list(cfg.heuristic.weights)
    return d


# -- stream calibration ---------------------------------------------------------------

class CalibrationError(RuntimeError):
    """A daily update failed; ``state`` and ``reports`` hold everything up to ``day - 1``."""

    def __init__(self, day: int, cause: Exception, state: GlobalState, reports: list):
        super().__init__(f"calibration failed on day {day}: {cause}")
        self.day = day
        self.cause = cause
        self.state = state
        self.reports = reports


def calibrate_stream(state: GlobalState, batches: Sequence, cfg: McmcConfig = McmcConfig(),
                     c=DEFAULT_LOSS, use_phl: bool = True,
                     on_day: Optional[Callable[[GlobalState, list], None]] = None):
    """Apply the daily recursion to ``batches`` of ``(day, records)``.

    Days missing from the stream are treated as days without data.  After
    each day the reports for every vulnerability are computed from that day's
    state only, and ``on_day(state, reports)`` is called so callers can flush
    partial output.  Returns ``(final_state, reports)``.
    """
    reports: list = []
    by_day = {}
    for day, recs in batches:
        by_day[int(day)] = list(recs)
    if by_day and min(by_day) <= state.day:
        raise ValueError(f"records start on day {min(by_day)}, state is at day {state.day}")
    last = max(by_day, default=state.day)
    for day in range(state.day + 1, last + 1):
        recs = by_day.get(day, [])
        try:
            state = daily_update(state, recs, cfg, use_phl)
        except UpdateError as exc:
            raise CalibrationError(day, exc, state, reports) from exc
        today = risk_reports(state, c)
        reports.extend(today)
        if on_day is not None:
            on_day(state, today)
    return state, reports


REPORT_COLUMNS = ("day", "vuln_id", "expected_loss", "tail_probability") + tuple(
    f"expected_count_{lvl}" for lvl in range(6))


def report_rows(reports: Sequence[RiskReport]) -> list:
    return [[r.day, r.vuln_id, repr(r.expected_loss), repr(r.tail_probability)]
            + [repr(float(v)) for v in r.expected_hurt_counts] for r in reports]


# -- policy experiments -----------------------------------------------------------

def make_policies(name: str, scenario: Scenario, seeds: Sequence[int], cfg: ExperimentConfig,
                  use_phl: Optional[bool] = None) -> list:
    ids, budget = scenario.vuln_ids, scenario.budget
    if name == "baseline":
        return [BaselinePolicy() for _ in seeds]
    if name == "random":
        return [RandomPolicy(ids, budget, s) for s in seeds]
    if name == "heuristic":
        return [HeuristicPolicy(ids, budget, cfg.heuristic, s) for s in seeds]
    if name == "risk":
        phl = cfg.use_phl if use_phl is None else use_phl
        return [RiskBasedPolicy(initial_state(ids, list(scenario.obs_types), cfg.prior), budget,
                                replace(cfg.mcmc, seed=s), cfg.optimizer, tuple(scenario.loss),
                                seed=s, use_phl=phl) for s in seeds]
    raise ValueError(f"unknown policy {name!r}; choose from {', '.join(POLICY_NAMES)}")


class ExperimentError(RuntimeError):
    pass


@dataclass
class PolicyRun:
    """Per-seed results of one policy, all seeds of the experiment in order."""

    name: str
    seeds: list
    loss: list = field(default_factory=list)        # per seed: (days, n) or None on failure
    tail: list = field(default_factory=list)
    proportions: list = field(default_factory=list)  # per seed: (days, n) or None
    weights: list = field(default_factory=list)      # per seed: (days, T) or None
    failures: dict = field(default_factory=dict)     # seed -> (day, message)

    @property
    def ok(self) -> list:
        return [j for j, s in enumerate(self.seeds) if s not in self.failures]


def _total_tail(tail):
    # probability that at least one vulnerability has a severe incident
    return -np.expm1(np.sum(np.log1p(-np.asarray(tail)), axis=-1))


def run_policy(name: str, scenario: Scenario, days: int, seeds: Sequence[int],
               cfg: ExperimentConfig, use_phl: Optional[bool] = None, label: Optional[str] = None,
               progress: Optional[Callable[[str, int], None]] = None) -> PolicyRun:
    policies = make_policies(name, scenario, seeds, cfg, use_phl)
    is_risk = name == "risk"
    weights = [[] for _ in seeds]

    def on_day(day):
        if is_risk:
            for j, p in enumerate(policies):
                xi = np.asarray(p.state.xi)
                weights[j].append(xi / xi.sum())
        if progress is not None:
            progress(label or name, day)

    traces = run_simulations(scenario, policies, days, list(seeds), on_day)
    run = PolicyRun(label or name, list(seeds))
    for j, (s, tr) in enumerate(zip(seeds, traces)):
        if tr.error is not None:
            run.failures[s] = (getattr(tr.error, "day", None), str(tr.error))
            for lst in (run.loss, run.tail, run.proportions, run.weights):
                lst.append(None)
            continue
        run.loss.append(np.array(tr.expected_loss))
        run.tail.append(np.array(tr.tail_probability))
        if name == "baseline":
            run.proportions.append(None)
        else:
            run.proportions.append(np.array([pl.proportions(scenario.vuln_ids) for pl in tr.plans]))
        run.weights.append(np.array(weights[j][:days]) if is_risk else None)
    return run


def _band(x):
    """Mean and normal-approximation 95% band across axis 0."""
    x = np.asarray(x, dtype=float)
    m = x.mean(axis=0)
    if x.shape[0] < 2:
        return m, m, m
    se = x.std(axis=0, ddof=1) / np.sqrt(x.shape[0])
    return m, m - 1.96 * se, m + 1.96 * se


def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def paired_test(a, b) -> dict:
    """One-sided paired t-test of mean(a) < mean(b)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    d = a - b
    out = {"n": int(len(d)), "mean_diff": float(d.mean()) if len(d) else float("nan")}
    if len(d) >= 2 and np.std(d) > 0:
        out["p_value"] = float(stats.ttest_rel(a, b, alternative="less").pvalue)
    else:
        out["p_value"] = float("nan")
    return out


def run_policy_experiment(scenario: Scenario, policies: Sequence[str], days: int, n_seeds: int,
                          out_dir, cfg: ExperimentConfig = ExperimentConfig(),
                          phl_ablation: bool = False,
                          progress: Optional[Callable[[str, int], None]] = None) -> dict:
    """Run every policy over the same seeds and write the result tables.

    Files written to ``out_dir``:
      metrics.csv      policy,day,vuln_id,loss_mean,loss_lo,loss_hi,tail_mean,tail_lo,tail_hi
                       (vuln_id ``ALL`` is the total across vulnerabilities)
      final.csv        policy,seed,loss,tail  (totals on the last day)
      allocations.csv  policy,day,vuln_id,proportion (mean share across seeds)
      weights.csv      policy,day,obs_type,mean,lo,hi (posterior mean weights)
      phl_ablation.csv seed,loss_phl,loss_nophl,diff (only with ``phl_ablation``)
      failures.csv     policy,seed,day,message
      summary.json     final means, paired tests, failure counts
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [cfg.first_seed + i for i in range(n_seeds)]
    arms = [(p, p, None) for p in policies]
    if phl_ablation:
        if "risk" not in policies:
            arms.append(("risk", "risk", True))
        arms.append(("risk", "risk_nophl", False))
    runs = {}
    for name, label, phl in arms:
        log.info("running %s over %d seeds x %d days", label, n_seeds, days)
        runs[label] = run_policy(name, scenario, days, seeds, cfg, phl, label, progress)
    ids = scenario.vuln_ids
    types = list(scenario.obs_types)

    metrics, final, alloc, wrows, frows = [], [], [], [], []
    summary = {"days": days, "n_seeds": n_seeds, "policies": {}, "tests": {}}
    for label, run in runs.items():
        ok = run.ok
        for s, (day, msg) in sorted(run.failures.items()):
            frows.append([label, s, "" if day is None else day, msg])
        summary["policies"][label] = {"failed_seeds": len(run.failures)}
        if not ok:
            continue
        L = np.stack([run.loss[j] for j in ok])          # (S, days, n)
        P = np.stack([run.tail[j] for j in ok])
        series = [(v, L[:, :, i], P[:, :, i]) for i, v in enumerate(ids)]
        series.append(("ALL", L.sum(axis=2), _total_tail(P)))
        for vid, l, t in series:
            lm, llo, lhi = _band(l)
            tm, tlo, thi = _band(t)
            for d in range(days):
                metrics.append([label, d + 1, vid] + [_fmt(x) for x in
                               (lm[d], llo[d], lhi[d], tm[d], tlo[d], thi[d])])
        for j in ok:
            final.append([label, run.seeds[j], _fmt(run.loss[j][-1].sum()),
                          _fmt(_total_tail(run.tail[j][-1]))])
        fl = L[:, -1].sum(axis=1)
        summary["policies"][label].update(
            final_loss_mean=float(fl.mean()),
            final_loss_se=float(fl.std(ddof=1) / np.sqrt(len(fl))) if len(fl) > 1 else 0.0)
        if run.proportions[ok[0]] is not None:
            prop = np.mean([run.proportions[j] for j in ok], axis=0)
            for d in range(days):
                alloc += [[label, d + 1, v, _fmt(prop[d, i])] for i, v in enumerate(ids)]
        if run.weights[ok[0]] is not None:
            W = np.stack([run.weights[j] for j in ok])
            wm, wlo, whi = _band(W)
            for d in range(days):
                wrows += [[label, d + 1, x, _fmt(wm[d, t]), _fmt(wlo[d, t]), _fmt(whi[d, t])]
                          for t, x in enumerate(types)]

    def finals(label):
        run = runs[label]
        return {run.seeds[j]: float(run.loss[j][-1].sum()) for j in run.ok}

    order = [p for p in ("risk", "heuristic", "random", "baseline") if p in runs]
    for a, b in zip(order, order[1:]):
        fa, fb = finals(a), finals(b)
        common = sorted(set(fa) & set(fb))
        summary["tests"][f"{a}<{b}"] = paired_test([fa[s] for s in common], [fb[s] for s in common])
    if phl_ablation:
        fa, fb = finals("risk"), finals("risk_nophl")
        common = sorted(set(fa) & set(fb))
        summary["tests"]["risk<=risk_nophl"] = paired_test([fa[s] for s in common],
                                                           [fb[s] for s in common])
        _write_csv(out / "phl_ablation.csv", ["seed", "loss_phl", "loss_nophl", "diff"],
                   [[s, _fmt(fa[s]), _fmt(fb[s]), _fmt(fa[s] - fb[s])] for s in common])

    _write_csv(out / "metrics.csv", ["policy", "day", "vuln_id", "loss_mean", "loss_lo",
                                     "loss_hi", "tail_mean", "tail_lo", "tail_hi"], metrics)
    _write_csv(out / "final.csv", ["policy", "seed", "loss", "tail"], final)
    _write_csv(out / "allocations.csv", ["policy", "day", "vuln_id", "proportion"], alloc)
    _write_csv(out / "weights.csv", ["policy", "day", "obs_type", "mean", "lo", "hi"], wrows)
    _write_csv(out / "failures.csv", ["policy", "seed", "day", "message"], frows)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")

    too_many = [lbl for lbl, r in runs.items() if len(r.failures) > MAX_FAILED_FRACTION * n_seeds]
    for lbl, r in runs.items():
        if r.failures:
            log.warning("%s: %d of %d seeds failed and were excluded", lbl, len(r.failures), n_seeds)
    if too_many:
        raise ExperimentError(f"more than {MAX_FAILED_FRACTION:.0%} of seeds failed for "
                              f"{', '.join(too_many)}")
    summary["runs"] = runs
    return summary
