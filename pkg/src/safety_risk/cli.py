"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .allocation import optimize_allocation
from .experiment import (POLICY_NAMES, REPORT_COLUMNS, CalibrationError, ExperimentConfig,
                         ExperimentError, calibrate_stream, config_to_dict, load_config,
                         make_policies, report_rows, run_policy_experiment)
from .fileio import (RecordParseError, SnapshotError, ingest_records, load_snapshot,
                     record_types, save_snapshot, write_records)
from .fitting import FitError
from .inference import UpdateError
from .model import ModelError, initial_state
from .policies import ObservationBudget, _plan_from_proportions
from .risk import MissingFitError, risk_reports
from .sampler import SamplerError
from .simulator import PolicyError, default_scenario, load_scenario, run_simulations

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, first_seed=args.seed, mcmc=replace(cfg.mcmc, seed=args.seed))
    if getattr(args, "no_phl", False):
        cfg = replace(cfg, use_phl=False)
    return cfg


def _scenario(args):
    return load_scenario(args.scenario) if args.scenario else default_scenario()


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    batches = ingest_records(args.records)
    if args.snapshot:
        state = load_snapshot(args.snapshot).state
    else:
        types = record_types(args.records)
        vids = sorted({r.vuln_id for _, recs in batches for r in recs})
        if not types or not vids:
            raise ModelError("record file has no observation types or no vulnerabilities; "
                             "pass --snapshot to start from an existing state")
        state = initial_state(vids, types, cfg.prior)
    out = _out_dir(args)
    fh = open(out / "reports.csv", "w", newline="")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    last = [state]

    def flush(st, reports):
        writer.writerows(report_rows(reports))
        fh.flush()
        last[0] = st

    try:
        state, _ = calibrate_stream(state, batches, cfg.mcmc, cfg.loss, cfg.use_phl, flush)
    except CalibrationError as exc:
        save_snapshot(last[0], out / "snapshot.json", {"seed": cfg.mcmc.seed})
        raise
    finally:
        fh.close()
    save_snapshot(state, out / "snapshot.json", {"seed": cfg.mcmc.seed})
    print(f"calibrated through day {state.day}; wrote {out / 'reports.csv'} and "
          f"{out / 'snapshot.json'}")
    return EXIT_OK


def cmd_risk(args) -> int:
    snap = load_snapshot(args.snapshot)
    cfg = _config(args)
    kw = {}
    if args.confidence is not None:
        kw = dict(confidence=args.confidence, n_draws=args.draws, seed=cfg.mcmc.seed)
    reports = risk_reports(snap.state, cfg.loss, **kw)
    header = list(REPORT_COLUMNS) + (["var", "cvar"] if kw else [])
    rows = []
    for r, row in zip(reports, report_rows(reports)):
        rows.append(row + ([repr(r.var_cvar[0]), repr(r.var_cvar[1])] if kw else []))
    if args.out:
        _write_rows(_out_dir(args) / "risk.csv", header, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return EXIT_OK


def cmd_allocate(args) -> int:
    snap = load_snapshot(args.snapshot)
    cfg = _config(args)
    state = snap.state
    if args.budget:
        budget = ObservationBudget(json.loads(args.budget))
    else:
        budget = _scenario(args).budget
    missing = set(budget.per_type) - set(state.obs_types)
    if missing:
        raise ModelError(f"budget names observation types not in the snapshot: {sorted(missing)}")
    res = optimize_allocation(state, cfg.loss, cfg.optimizer)
    r = [res.proportions[v] for v in state.vuln_ids]
    plan = _plan_from_proportions(state.vuln_ids, budget, r, res.converged)
    rows = [[state.day + 1, v, x, plan.get(x, v), repr(res.proportions[v])]
            for v in state.vuln_ids for x in budget.per_type]
    header = ["day", "vuln_id", "obs_type", "count", "proportion"]
    if args.out:
        _write_rows(_out_dir(args) / "plan.csv", header, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    if not res.converged:
        print("warning: allocation optimizer did not converge; using best iterate",
              file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    cfg = _config(args)
    seed = cfg.first_seed
    pol = make_policies(args.policy, sc, [seed], cfg)
    trace = run_simulations(sc, pol, args.days, [seed])[0]
    out = _out_dir(args)
    write_records(out / "records.csv", [r for day in trace.records for r in day], list(sc.obs_types))
    rows = []
    for d, (loss, tail, theta) in enumerate(zip(trace.expected_loss, trace.tail_probability,
                                                trace.theta)):
        for i, v in enumerate(sc.vuln_ids):
            rows.append([d + 1, v, repr(float(theta[i])), repr(float(loss[i])),
                         repr(float(tail[i]))])
    _write_rows(out / "truth.csv", ["day", "vuln_id", "theta", "expected_loss",
                                    "tail_probability"], rows)
    plan_rows = []
    for d, plan in enumerate(trace.plans):
        if plan is None:
            continue
        for (x, v), n in sorted(plan.counts.items()):
            plan_rows.append([d + 1, v, x, n])
    _write_rows(out / "plans.csv", ["day", "vuln_id", "obs_type", "count"], plan_rows)
    if trace.error is not None:
        raise trace.error
    print(f"simulated {len(trace)} days with the {args.policy} policy; wrote {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    sc = _scenario(args)
    cfg = _config(args)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    bad = set(policies) - set(POLICY_NAMES)
    if bad:
        raise UsageError(f"unknown policies: {sorted(bad)}")
    out = _out_dir(args)
    summary = run_policy_experiment(sc, policies, args.days, args.seeds, out, cfg,
                                    phl_ablation=args.phl_ablation)
    (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True) + "\n")
    for name, info in summary["policies"].items():
        if "final_loss_mean" in info:
            print(f"{name:12s} day-{args.days} expected loss {info['final_loss_mean']:.2f} "
                  f"(se {info['final_loss_se']:.2f}, failed seeds {info['failed_seeds']})")
    for name, t in summary["tests"].items():
        print(f"{name:22s} mean diff {t['mean_diff']:.2f}  one-sided p {t['p_value']:.3g}")
    return EXIT_OK


def _root_cause(exc):
    # wrapped update failures caused by invalid records are data errors
    while getattr(exc, "cause", None) is not None:
        exc = exc.cause
    return exc


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="safety-risk", description="Bayesian safety-risk calibration and "
                "observation allocation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, scenario=False):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", help="output directory")
        if scenario:
            sp.add_argument("--scenario", help="scenario JSON file (default: built-in)")

    sp = sub.add_parser("calibrate", help="ingest records, emit daily risk reports and a snapshot")
    sp.add_argument("records")
    sp.add_argument("--snapshot", help="starting snapshot (default: prior from --config)")
    sp.add_argument("--no-phl", action="store_true", help="skip the PHL pseudo-count update")
    common(sp)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("risk", help="risk report from a snapshot")
    sp.add_argument("snapshot")
    sp.add_argument("--confidence", type=float, help="also report VaR/CVaR at this level")
    sp.add_argument("--draws", type=int, default=100_000)
    common(sp)
    sp.set_defaults(func=cmd_risk)

    sp = sub.add_parser("allocate", help="next-day observation plan from a snapshot")
    sp.add_argument("snapshot")
    sp.add_argument("--budget", help='JSON map of daily budgets, e.g. \'{"SAO": 2}\'')
    common(sp, scenario=True)
    sp.set_defaults(func=cmd_allocate)

    sp = sub.add_parser("simulate", help="run one simulation with one policy")
    sp.add_argument("--policy", choices=POLICY_NAMES, default="risk")
    sp.add_argument("--days", type=int, default=365)
    sp.add_argument("--no-phl", action="store_true")
    common(sp, scenario=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("compare", help="multi-policy experiment over many seeds")
    sp.add_argument("--policies", default=",".join(POLICY_NAMES))
    sp.add_argument("--days", type=int, default=365)
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--no-phl", action="store_true")
    sp.add_argument("--phl-ablation", action="store_true",
                    help="add a risk-based run without PHL updates over the same seeds")
    common(sp, scenario=True)
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if getattr(args, "days", 1) < 1 or getattr(args, "seeds", 1) < 1:
            raise UsageError("--days and --seeds must be at least 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CalibrationError, UpdateError, SamplerError, FitError, ExperimentError,
            PolicyError) as exc:
        if isinstance(_root_cause(exc), ModelError):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RecordParseError, SnapshotError, MissingFitError, ModelError, ValueError,
            OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
