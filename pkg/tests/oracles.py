"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np

from safety_risk.inference import McmcConfig, build_problem, sample_posterior_batch
from safety_risk.model import DailyRecord, PriorConfig, initial_state
from safety_risk.sampler import mc_standard_error


def central_difference(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = h
        g.flat[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(g, ref):
    return float(np.linalg.norm(g - ref) / max(np.linalg.norm(ref), 1e-300))


def random_count_problem(seed, n=3, T=3):
    """A batched problem with random hyperparameters and counts, plus a state."""
    r = np.random.default_rng(seed)
    prior = PriorConfig(xi=r.uniform(0.5, 3), gamma_k=r.uniform(0.5, 4),
                        gamma_theta=r.uniform(0.1, 2), beta_a=r.uniform(0.5, 3),
                        beta_b=r.uniform(0.5, 3))
    types = [f"T{t}" for t in range(T)]
    state = initial_state([f"v{i}" for i in range(n)], types, prior)
    recs = []
    for i in range(n):
        obs = {}
        for x in types:
            tot = int(r.integers(0, 10))
            obs[x] = (tot, int(r.integers(0, tot + 1)))
        k = int(r.integers(0, 4))
        recs.append(DailyRecord(f"v{i}", 1, k, (0,) * k, (0,) * k, obs))
    return state, recs, build_problem([state], [recs])


def grid_search_simplex(objective, n, step=1e-3):
    """Brute-force minimizer over the 1- or 2-simplex at the given resolution."""
    m = int(round(1 / step))
    if n == 2:
        r1 = np.arange(m + 1) * step
        pts = np.stack([r1, 1 - r1], axis=1)
    elif n == 3:
        i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
        keep = i + j <= m
        i, j = i[keep], j[keep]
        pts = np.stack([i * step, j * step, (m - i - j) * step], axis=1)
    else:
        raise ValueError("grid search supports n = 2 or 3")
    vals = objective(pts)
    return pts[int(np.argmin(vals))]


def conjugate_cases(n_cases=20, seed=2024, cfg=McmcConfig(n_warmup=400, n_kept=2000)):
    """Posterior means from the sampler against Beta-Binomial and Gamma-Poisson closed forms.

    Returns a list of (kind, sampled mean, exact mean, MC standard error, exact sd,
    sampled sd).
    """
    r = np.random.default_rng(seed)
    out = []
    # kappa block: one type (w = 1), beta frozen, no incident count recorded
    states, recs, exact = [], [], []
    for c in range(n_cases):
        a, b = r.uniform(0.5, 5, 2)
        tot = int(r.integers(0, 40))
        neg = int(r.integers(0, tot + 1))
        st = initial_state(["v"], ["A"], PriorConfig(beta_a=a, beta_b=b))
        states.append(st)
        recs.append([DailyRecord("v", 1, None, obs={"A": (tot, neg)})])
        pa, pb = a + neg, b + tot - neg
        exact.append((pa / (pa + pb), np.sqrt(pa * pb / ((pa + pb) ** 2 * (pa + pb + 1)))))
    res = sample_posterior_batch(states, recs, cfg, list(range(n_cases)),
                                 fixed={"beta": np.array([1.0])})
    for ss, (mu, sd) in zip(res, exact):
        x = ss.kappa[:, 0, 0]
        out.append(("kappa", x.mean(), mu, float(mc_standard_error(x)), sd, x.std(ddof=1)))
    # beta block: kappa frozen at 1, Gamma(k, theta) prior, observed incidents
    states, recs, exact = [], [], []
    for c in range(n_cases):
        k, th = r.uniform(0.5, 5), r.uniform(0.1, 3)
        n_e = int(r.integers(0, 15))
        st = initial_state(["v"], ["A"], PriorConfig(gamma_k=k, gamma_theta=th))
        states.append(st)
        recs.append([DailyRecord("v", 1, n_e, (0,) * n_e, (0,) * n_e)])
        pk, pth = k + n_e, th / (1 + th)
        exact.append((pk * pth, np.sqrt(pk) * pth))
    res = sample_posterior_batch(states, recs, cfg, list(range(n_cases)),
                                 fixed={"kappa": np.array([[1.0]])})
    for ss, (mu, sd) in zip(res, exact):
        x = ss.beta[:, 0]
        out.append(("beta", x.mean(), mu, float(mc_standard_error(x)), sd, x.std(ddof=1)))
    return out
