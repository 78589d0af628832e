import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from safety_risk import experiment
from safety_risk.experiment import (CalibrationError, ExperimentConfig, ExperimentError,
                                    calibrate_stream, config_from_dict, config_to_dict,
                                    paired_test, run_policy_experiment)
from safety_risk.inference import McmcConfig
from safety_risk.model import DailyRecord, initial_state
from safety_risk.policies import BaselinePolicy
from safety_risk.simulator import baseline_theta, default_scenario, run_simulation
from safety_risk.experiment import make_policies

SC = default_scenario()
FAST = McmcConfig(n_warmup=100, n_kept=150)
CFG = ExperimentConfig(mcmc=FAST)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def stream():
    trace = run_simulation(SC, make_policies("random", SC, [3], CFG)[0], 8, 3)
    return list(enumerate(trace.records, start=1))


def fresh():
    return initial_state(SC.vuln_ids, list(SC.obs_types))


def test_zero_day_stream():
    s = fresh()
    out, reports = calibrate_stream(s, [], FAST)
    assert out == s and reports == []


def test_stream_replay_and_causality(stream):
    _, full = calibrate_stream(fresh(), stream, FAST)
    _, again = calibrate_stream(fresh(), stream, FAST)
    assert full == again
    _, short = calibrate_stream(fresh(), stream[:5], FAST)
    assert short == full[:5 * len(SC.vuln_ids)]
    assert [r.day for r in full[::len(SC.vuln_ids)]] == list(range(1, 9))


def test_stream_callback_and_gaps(stream):
    seen = []
    _, reports = calibrate_stream(fresh(), [stream[0], stream[3]], FAST,
                                  on_day=lambda st, rep: seen.append((st.day, len(rep))))
    assert seen == [(d, len(SC.vuln_ids)) for d in range(1, 5)]
    with pytest.raises(ValueError, match="state is at day"):
        calibrate_stream(fresh(), [(0, [])], FAST)


def test_stream_failure_keeps_partial_output(stream):
    bad = [(1, stream[0][1]), (2, [DailyRecord("nope", 2, 0)])]
    with pytest.raises(CalibrationError) as e:
        calibrate_stream(fresh(), bad, FAST)
    assert e.value.day == 2 and e.value.state.day == 1
    assert len(e.value.reports) == len(SC.vuln_ids)


def test_near_miss_raises_risk():
    obs = {"WSO": (2, 0), "SAO": (2, 0), "BPO": (1, 0)}
    batches = [(d, [DailyRecord("A", d, 0, obs=obs), DailyRecord("B", d, 0, obs=obs)])
               for d in range(1, 31)]
    batches.append((31, [DailyRecord("A", 31, 1, (0,), (4,), obs),
                         DailyRecord("B", 31, 0, obs=obs)]))
    _, reports = calibrate_stream(initial_state(["A", "B"], list(SC.obs_types)), batches, FAST)
    a = [r.expected_loss for r in reports if r.vuln_id == "A"]
    b = [r.expected_loss for r in reports if r.vuln_id == "B"]
    assert a[30] > a[29]
    assert a[30] - a[29] > abs(b[30] - b[29])


def test_single_seed_single_day(tmp_path):
    out = tmp_path / "e"
    summary = run_policy_experiment(SC, ["risk", "random", "baseline"], 1, 1, out, CFG)
    rows = read_csv(out / "metrics.csv")
    assert len(rows) == 3 * (len(SC.vuln_ids) + 1)
    for r in rows:
        assert r["loss_lo"] == r["loss_mean"] == r["loss_hi"]
        assert r["tail_lo"] == r["tail_mean"] == r["tail_hi"]
    assert len(read_csv(out / "final.csv")) == 3
    assert all(np.isnan(t["p_value"]) for t in summary["tests"].values())


def test_baseline_rows_follow_recursion(tmp_path):
    days = 40
    run_policy_experiment(SC, ["baseline"], days, 3, tmp_path, CFG)
    th = baseline_theta(SC, days)[1:]
    c = np.asarray(SC.loss)
    for r in read_csv(tmp_path / "metrics.csv"):
        if r["vuln_id"] == "ALL":
            continue
        i = SC.vuln_ids.index(r["vuln_id"])
        vp = SC.vulns[r["vuln_id"]]
        exact = vp.lambda_star * vp.xi_base * th[int(r["day"]) - 1, i] * (c @ np.asarray(vp.p))
        assert float(r["loss_mean"]) == pytest.approx(exact, rel=1e-12)
        assert float(r["loss_hi"]) - float(r["loss_lo"]) < 1e-9 * max(exact, 1)


def test_outputs_and_determinism(tmp_path):
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        runs.append(run_policy_experiment(SC, ["risk", "heuristic", "random", "baseline"], 6,
                                          3, out, CFG, phl_ablation=True))
    names = ["metrics.csv", "final.csv", "allocations.csv", "weights.csv",
             "phl_ablation.csv", "failures.csv", "summary.json"]
    for n in names:
        assert (tmp_path / "run0" / n).read_bytes() == (tmp_path / "run1" / n).read_bytes(), n
    alloc = read_csv(tmp_path / "run0" / "allocations.csv")
    sums = {}
    for r in alloc:
        key = (r["policy"], r["day"])
        sums[key] = sums.get(key, 0.0) + float(r["proportion"])
    assert len(sums) == 4 * 6
    assert all(abs(s - 1) < 1e-9 for s in sums.values())
    w = read_csv(tmp_path / "run0" / "weights.csv")
    assert {r["policy"] for r in w} == {"risk", "risk_nophl"}
    for day in ("1", "6"):
        assert sum(float(r["mean"]) for r in w if r["day"] == day and r["policy"] == "risk") \
            == pytest.approx(1, abs=1e-12)
    summary = json.loads((tmp_path / "run0" / "summary.json").read_text())
    assert set(summary["tests"]) == {"risk<heuristic", "heuristic<random", "random<baseline",
                                     "risk<=risk_nophl"}
    assert len(read_csv(tmp_path / "run0" / "phl_ablation.csv")) == 3


class FlakyBaseline(BaselinePolicy):
    def __init__(self, fail):
        self.fail = fail

    def observe(self, records):
        if self.fail and records and records[0].day == 2:
            raise RuntimeError("synthetic failure")


def flaky(bad):
    def make(name, scenario, seeds, cfg, use_phl=None):
        return [FlakyBaseline(s in bad) for s in seeds]
    return make


def test_failed_seeds_excluded(tmp_path, monkeypatch, caplog):
    monkeypatch.setattr(experiment, "make_policies", flaky({4}))
    summary = run_policy_experiment(SC, ["baseline"], 3, 20, tmp_path, CFG)
    assert summary["policies"]["baseline"]["failed_seeds"] == 1
    f = read_csv(tmp_path / "failures.csv")
    assert [(r["seed"], r["day"]) for r in f] == [("4", "2")]
    assert len(read_csv(tmp_path / "final.csv")) == 19
    assert "1 of 20 seeds failed" in caplog.text


def test_too_many_failures(tmp_path, monkeypatch):
    monkeypatch.setattr(experiment, "make_policies", flaky({4, 9}))
    with pytest.raises(ExperimentError, match="5%"):
        run_policy_experiment(SC, ["baseline"], 3, 20, tmp_path, CFG)
    assert len(read_csv(tmp_path / "failures.csv")) == 2


def test_config_round_trip(tmp_path):
    cfg = replace(CFG, use_phl=False, first_seed=7, loss=(0, 1, 2, 3, 4, 5))
    d = json.loads(json.dumps(config_to_dict(cfg)))
    assert config_from_dict(d) == cfg
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict({"mcmc": {"n_burn": 3}})
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict({"extra": {}})


def test_paired_test():
    r = np.random.default_rng(0)
    b = r.normal(10, 1, 50)
    assert paired_test(b - 1, b + r.normal(0, 0.1, 50))["p_value"] < 1e-6
    assert paired_test(b + 1, b + r.normal(0, 0.1, 50))["p_value"] > 0.99
    assert np.isnan(paired_test([1, 2], [1, 2])["p_value"])
