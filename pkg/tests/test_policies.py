import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from safety_risk.allocation import OptConfig
from safety_risk.inference import McmcConfig
from safety_risk.model import DailyRecord, GlobalState, VulnerabilityState, initial_state
from safety_risk.policies import (AllocationPlan, HeuristicConfig, HeuristicPolicy,
                                  ObservationBudget, RandomPolicy, RiskBasedPolicy,
                                  heuristic_policy, heuristic_scores, largest_remainder,
                                  random_policy, risk_based_policy)

IDS = [f"v{i}" for i in range(7)]
BUDGET = ObservationBudget({"WSO": 5, "SAO": 2, "BPO": 2})


def check_budget(plan, budget, ids):
    for x, m in budget.per_type.items():
        assert plan.total(x) == m
        assert all(plan.get(x, v) >= 0 for v in ids)


def calibrated_state(rates, alpha=(1, 1, 1, 1, 1, 1)):
    vulns = {f"v{i}": VulnerabilityState(alpha, 1.0, 1.0, {"A": (1, 1)}, (1.0, r))
             for i, r in enumerate(rates)}
    return GlobalState(("A",), (1.0,), vulns)


def test_budget_validation():
    with pytest.raises(ValueError):
        ObservationBudget({"A": 0})
    with pytest.raises(ValueError):
        ObservationBudget({"A": -1, "B": 3})
    with pytest.raises(ValueError):
        HeuristicConfig(weights=(0, 0, 0, 0))


def test_largest_remainder_examples():
    assert largest_remainder([2, 1, 1], 4).tolist() == [2, 1, 1]
    assert largest_remainder([0, 0, 0], 4).tolist() == [2, 1, 1]
    # tie in remainders goes to the earlier identifier
    assert largest_remainder([1, 1], 1, order=["b", "a"]).tolist() == [0, 1]


@given(st.lists(st.floats(0, 100), min_size=1, max_size=10), st.integers(0, 50))
def test_largest_remainder_conserves_and_is_close(p, m):
    n = largest_remainder(p, m)
    assert n.sum() == m and np.all(n >= 0)
    r = np.asarray(p) / sum(p) if sum(p) > 0 else np.full(len(p), 1 / len(p))
    assert np.all(np.abs(n - m * r) < 1)


@given(st.lists(st.floats(0, 100), min_size=1, max_size=10), st.integers(0, 50))
def test_largest_remainder_monotone(p, m):
    n = largest_remainder(p, m)
    for i in range(len(p)):
        for j in range(len(p)):
            if p[i] > p[j]:
                assert n[i] >= n[j]


def test_random_policy():
    plan = random_policy(["only"], ObservationBudget({"X": 2}), 1)
    assert plan.get("X", "only") == 2
    for seed in range(20):
        check_budget(random_policy(IDS, BUDGET, seed), BUDGET, IDS)
    assert random_policy(IDS, BUDGET, 3) == random_policy(IDS, BUDGET, 3)
    with pytest.raises(ValueError):
        random_policy([], BUDGET, 0)


def test_random_policy_is_uniform():
    n_seeds = 100_000
    m = 5
    counts = np.zeros(7)
    b = ObservationBudget({"X": m})
    for seed in range(n_seeds):
        pl = random_policy(IDS, b, seed)
        counts += [pl.get("X", v) for v in IDS]
    mean = counts / n_seeds
    se = np.sqrt(m * (1 / 7) * (6 / 7) / n_seeds)
    assert np.all(np.abs(mean - m / 7) < 3 * se)


def history(recs):
    out = {}
    for r in recs:
        out.setdefault(r.vuln_id, []).append(r)
    return out


def test_heuristic_indicators():
    h = history([DailyRecord("a", 1, 2, (1, 2), (2, 2), {"X": (6, 2), "Y": (4, 1)}),
                 DailyRecord("a", 2, 1, (0,), (4,)),
                 DailyRecord("b", 2, 0)])
    cfg = HeuristicConfig(weights=(1, 0, 0, 0))
    assert heuristic_scores(h, cfg, 2)["a"] == pytest.approx(0.3)
    cfg = HeuristicConfig(weights=(0, 1, 0, 0))
    assert heuristic_scores(h, cfg, 2)["a"] == pytest.approx(0.6)
    cfg = HeuristicConfig(weights=(0, 0, 1, 0))
    assert heuristic_scores(h, cfg, 2)["a"] == pytest.approx(1 / 5)
    cfg = HeuristicConfig(weights=(0, 0, 0, 1))
    assert heuristic_scores(h, cfg, 2)["a"] == pytest.approx((8 / 3) / 5)
    assert heuristic_scores(h, HeuristicConfig(), 2)["b"] == 0.0


def test_heuristic_weighted_sum():
    # indicators (0.3, 0.6, 0.2, 0.4) with equal weights
    h = history([DailyRecord("a", 1, 3, (1, 1, 1), (2, 2, 2), {"X": (10, 3)})])
    s = heuristic_scores(h, HeuristicConfig(), 1)["a"]
    assert s == pytest.approx(0.25 * (0.3 + 0.6 + 0.2 + 0.4)) == pytest.approx(0.375)


def test_heuristic_saturates_and_windows():
    h = history([DailyRecord("a", d, 1, (0,), (0,)) for d in range(1, 41)])
    cfg = HeuristicConfig(weights=(0, 1, 0, 0), window=30)
    assert heuristic_scores(h, cfg, 40)["a"] == 1.0
    cfg = HeuristicConfig(weights=(0, 1, 0, 0), window=3)
    assert heuristic_scores(h, cfg, 40)["a"] == pytest.approx(0.6)
    # days beyond t are ignored, empty days contribute nothing
    assert heuristic_scores(h, cfg, 2)["a"] == pytest.approx(0.4)
    assert heuristic_scores(h, cfg, 100)["a"] == 0.0


def test_heuristic_policy_allocation():
    h = {v: [] for v in IDS}
    plan = heuristic_policy(h, HeuristicConfig(), BUDGET)
    check_budget(plan, BUDGET, IDS)
    assert sorted(plan.get("WSO", v) for v in IDS) == [0, 0, 1, 1, 1, 1, 1]
    h = {"a": [DailyRecord("a", 1, 4, (2,) * 4, (3,) * 4, {"X": (2, 2)})],
         "b": [DailyRecord("b", 1, 0, obs={"X": (2, 0)})]}
    plan = heuristic_policy(h, HeuristicConfig(), ObservationBudget({"X": 4}))
    assert plan.get("X", "a") == 4 and plan.get("X", "b") == 0


def test_risk_policy_identical_uniform():
    s = calibrated_state([2.0] * 7)
    plan = risk_based_policy(s, budget=ObservationBudget({"A": 14}))
    assert all(plan.get("A", v) == 2 for v in s.vuln_ids)
    plan = risk_based_policy(s, budget=BUDGET)
    check_budget(plan, BUDGET, s.vuln_ids)


def test_risk_policy_dominant():
    s = calibrated_state([100.0] + [1e-6] * 6)
    plan = risk_based_policy(s, budget=BUDGET)
    for x, m in BUDGET.per_type.items():
        assert plan.get(x, "v0") == m
    assert plan.converged


def test_risk_policy_flags_nonconvergence():
    s = calibrated_state([5.0, 3.0, 1.0, 0.5, 2.0, 4.0, 1.5])
    plan = risk_based_policy(s, budget=BUDGET, opt_cfg=OptConfig(max_iterations=1))
    assert not plan.converged
    check_budget(plan, BUDGET, s.vuln_ids)


def test_policy_objects():
    rp = RandomPolicy(IDS, BUDGET, 4)
    assert rp.plan(3) == rp.plan(3) and rp.plan(3) != rp.plan(4)
    hp = HeuristicPolicy(IDS, BUDGET)
    hp.observe([DailyRecord("v2", 1, 2, (1, 1), (1, 1), {"WSO": (1, 1)})])
    plan = hp.plan(2)
    assert plan.get("WSO", "v2") == 5
    state = initial_state(IDS, ["WSO", "SAO", "BPO"])
    risk = RiskBasedPolicy(state, BUDGET, McmcConfig(n_warmup=100, n_kept=100), seed=1)
    first = risk.plan(1)
    check_budget(first, BUDGET, IDS)
    risk.observe([DailyRecord(v, 1, 0) for v in IDS])
    assert risk.state.day == 1 and risk._ready()
    check_budget(risk.plan(2), BUDGET, IDS)


def test_plan_proportions():
    pl = AllocationPlan({("X", "a"): 3, ("X", "b"): 1, ("Y", "a"): 0, ("Y", "b"): 0})
    assert pl.proportions(["a", "b"]).tolist() == [0.75, 0.25]


budgets = st.dictionaries(st.sampled_from(["WSO", "SAO", "BPO"]), st.integers(0, 40),
                          min_size=1).filter(lambda d: any(d.values())).map(ObservationBudget)


@given(budgets, st.integers(0, 10_000))
def test_random_and_heuristic_conserve_budget(budget, seed):
    check_budget(random_policy(IDS, budget, seed), budget, IDS)
    rng = np.random.default_rng(seed)
    h = {}
    for v in IDS:
        n = int(rng.integers(0, 4))
        h[v] = [DailyRecord(v, 1, n, (1,) * n, (2,) * n, {"X": (3, int(rng.integers(0, 4)))})]
    check_budget(heuristic_policy(h, HeuristicConfig(), budget), budget, IDS)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=10), st.integers(1, 20))
def test_heuristic_empty_days_contribute_nothing(counts, pad):
    recs = [DailyRecord("a", d + 1, n, (1,) * n, (1,) * n) for d, n in enumerate(counts)]
    cfg = HeuristicConfig(window=len(counts) + pad)
    t = len(counts)
    base = heuristic_scores({"a": recs}, cfg, t)["a"]
    padded = recs + [DailyRecord("a", t + k + 1, 0) for k in range(pad)]
    # zero-incident days inside the window leave the score unchanged
    assert heuristic_scores({"a": padded}, cfg, t + pad)["a"] == pytest.approx(base)
