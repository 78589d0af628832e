"""Daily recursive Bayesian update of the model hyperparameters.

The count block (w, beta, kappa) is sampled by HMC and its hyperparameters are
refitted by maximum likelihood to the draws.  The Hurt-level Dirichlet is
updated in closed form: AHL counts are added, then each PHL shifts mass within
the tail at or above its AHL while keeping the total pseudo-count fixed.

Everything that touches the sampler has a ``*_batch`` form that advances many
independent states at once; the single-state functions are thin wrappers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .fitting import FitError, fit_beta, fit_dirichlet, fit_gamma
from .model import (N_LEVELS, DailyRecord, GlobalState, LatentParams, ModelError,
                    VulnerabilityState, check_level)
from .sampler import CountProblem, SamplerError, run_hmc

log = logging.getLogger(__name__)

ACCEPT_RANGE = (0.1, 0.99)


@dataclass(frozen=True)
class McmcConfig:
    n_warmup: int = 300
    n_kept: int = 500
    target_acceptance: float = 0.8
    max_step_attempts: int = 3
    n_leapfrog: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.target_acceptance < 1:
            raise ValueError("target_acceptance must lie in (0, 1)")
        if self.n_kept < 100:
            raise ValueError("n_kept must be at least 100")
        if self.max_step_attempts < 1:
            raise ValueError("max_step_attempts must be positive")


@dataclass(frozen=True)
class SampleSet:
    """Posterior draws of the count block, stored as arrays.

    ``w`` is (N, T), ``beta`` (N, n) and ``kappa`` (N, n, T), with columns in
    ``obs_types`` / ``vuln_ids`` order.  ``fixed`` names blocks that were held
    constant while sampling.
    """

    obs_types: tuple
    vuln_ids: tuple
    w: np.ndarray
    beta: np.ndarray
    kappa: np.ndarray
    n_warmup: int
    n_kept: int
    acceptance_rate: float
    seed: int
    fixed: frozenset = frozenset()
    kappa_logit: Optional[np.ndarray] = None   # same shape as kappa, kept for stable Beta fits
    log_w: Optional[np.ndarray] = None         # same shape as w, kept for stable Dirichlet fits

    def __len__(self):
        return self.n_kept

    def draw(self, j: int) -> LatentParams:
        types, vids = self.obs_types, self.vuln_ids
        return LatentParams(
            w={x: float(self.w[j, t]) for t, x in enumerate(types)},
            beta={v: float(self.beta[j, i]) for i, v in enumerate(vids)},
            kappa={v: {x: float(self.kappa[j, i, t]) for t, x in enumerate(types)}
                   for i, v in enumerate(vids)},
        )

    @property
    def draws(self) -> list:
        return [self.draw(j) for j in range(self.n_kept)]

    def effective_kappa(self) -> np.ndarray:
        return np.einsum("nt,nit->ni", self.w, self.kappa)

    def rate_product(self) -> np.ndarray:
        return self.effective_kappa() * self.beta


class UpdateError(RuntimeError):
    """A daily update failed; ``state`` is the untouched input state."""

    def __init__(self, cause: Exception, state: GlobalState, day: Optional[int] = None):
        self.cause = cause
        self.state = state
        self.day = day
        where = f" on day {day}" if day is not None else ""
        super().__init__(f"daily update failed{where}: {cause}")


# -- problem assembly --------------------------------------------------------

def _check_records(state: GlobalState, records: Sequence[DailyRecord]):
    seen = set()
    for rec in records:
        if rec.vuln_id not in state.vulns:
            raise ModelError(f"record for unknown vulnerability {rec.vuln_id!r}")
        if rec.vuln_id in seen:
            raise ModelError(f"more than one record for {rec.vuln_id!r} on one day")
        seen.add(rec.vuln_id)
        extra = set(rec.obs) - set(state.obs_types)
        if extra:
            raise ModelError(f"dimension mismatch: observation types {sorted(extra)} "
                             f"not in {list(state.obs_types)}")


def build_problem(states: Sequence[GlobalState], records_list: Sequence[Sequence[DailyRecord]],
                  fixed: Optional[Mapping[str, np.ndarray]] = None) -> CountProblem:
    """Stack states and their day's records into one batched sampling problem.

    ``fixed`` optionally holds blocks constant: ``"w"`` (T,), ``"beta"`` (n,),
    ``"kappa"`` (n, T), in state order; the same values apply to every problem.
    """
    ref = states[0]
    types, vids = ref.obs_types, ref.vuln_ids
    S, n, T = len(states), len(vids), len(types)
    for st in states:
        if st.obs_types != types or st.vuln_ids != vids:
            raise ModelError("dimension mismatch: batched states must share vulnerabilities "
                             "and observation types")
    xi = np.array([st.xi for st in states])
    gk = np.array([[st.vulns[v].gamma_k for v in vids] for st in states])
    gth = np.array([[st.vulns[v].gamma_theta for v in vids] for st in states])
    ab = np.array([[[st.vulns[v].beta_ab[x] for x in types] for v in vids] for st in states])
    n_tot = np.zeros((S, n, T))
    n_neg = np.zeros((S, n, T))
    n_e = np.zeros((S, n))
    has_e = np.zeros((S, n))
    index = {v: i for i, v in enumerate(vids)}
    for s, (st, recs) in enumerate(zip(states, records_list)):
        _check_records(st, recs)
        for rec in recs:
            i = index[rec.vuln_id]
            n_tot[s, i], n_neg[s, i] = rec.counts(types)
            if rec.n_e is not None:
                n_e[s, i] = rec.n_e
                has_e[s, i] = 1.0
    fixed = dict(fixed or {})
    unknown = set(fixed) - {"w", "beta", "kappa"}
    if unknown:
        raise ValueError(f"unknown fixed blocks {sorted(unknown)}")

    def tile(key, shape):
        if key not in fixed:
            return None
        arr = np.asarray(fixed[key], dtype=float)
        if arr.shape != shape:
            raise ModelError(f"fixed {key} must have shape {shape}, got {arr.shape}")
        return np.broadcast_to(arr, (S,) + shape).copy()

    fixed_w = tile("w", (T,))
    if T == 1 and fixed_w is None:
        fixed_w = np.ones((S, 1))
    return CountProblem(
        xi=xi, gamma_k=gk, gamma_theta=gth, beta_a=ab[..., 0], beta_b=ab[..., 1],
        n_total=n_tot, n_neg=n_neg, n_e=n_e, has_e=has_e,
        fixed_w=fixed_w, fixed_beta=tile("beta", (n,)), fixed_kappa=tile("kappa", (n, T)),
    )


def _fixed_names(problem: CountProblem) -> frozenset:
    names = set()
    if problem.fixed_w is not None:
        names.add("w")
    if problem.fixed_beta is not None:
        names.add("beta")
    if problem.fixed_kappa is not None:
        names.add("kappa")
    return frozenset(names)


def _day_rng(seed: int, day: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(day)])


# -- sampling ----------------------------------------------------------------

def sample_posterior_batch(states, records_list, cfg: McmcConfig, seeds: Sequence[int],
                           fixed=None) -> list:
    """Sample every problem of a batch; failed problems yield a ``SamplerError``."""
    problem = build_problem(states, records_list, fixed)
    S = len(states)
    out: list = [None] * S
    pending = list(range(S))
    attempt = 0
    fixed_names = _fixed_names(problem)
    while pending:
        sub = problem.take(np.array(pending))
        n_warm = cfg.n_warmup * 2 ** attempt
        rngs = [_day_rng(seeds[s] + 7919 * attempt, states[s].day + 1) for s in pending]
        res = run_hmc(sub, rngs, n_warm, cfg.n_kept, cfg.n_leapfrog, cfg.target_acceptance)
        w, beta, kappa = sub.constrain(res.draws)
        z = res.draws[..., sub.slices()[2]].reshape(kappa.shape)
        logw = sub.log_weights(res.draws)
        retry = []
        for j, s in enumerate(pending):
            rate = float(res.accept_rate[j])
            lo, hi = ACCEPT_RANGE
            if (lo <= rate <= hi) or problem.free_mask().sum() == 0:
                out[s] = SampleSet(
                    obs_types=states[s].obs_types, vuln_ids=states[s].vuln_ids,
                    w=np.array(w[:, j]), beta=np.array(beta[:, j]), kappa=np.array(kappa[:, j]),
                    n_warmup=n_warm, n_kept=cfg.n_kept, acceptance_rate=rate,
                    seed=int(seeds[s]), fixed=fixed_names, kappa_logit=np.array(z[:, j]),
                    log_w=np.array(logw[:, j]),
                )
            elif attempt + 1 < cfg.max_step_attempts:
                log.debug("problem %d: acceptance %.3f, retrying with longer warmup", s, rate)
                retry.append(s)
            else:
                out[s] = SamplerError(
                    f"acceptance rate {rate:.3f} outside [{lo}, {hi}] after "
                    f"{cfg.max_step_attempts} warmup attempts")
        pending = retry
        attempt += 1
    return out


def sample_posterior(state: GlobalState, records: Sequence[DailyRecord], cfg: McmcConfig,
                     fixed: Optional[Mapping[str, np.ndarray]] = None) -> SampleSet:
    """Draw from the posterior of (w, beta, kappa) given one day of counts."""
    res = sample_posterior_batch([state], [records], cfg, [cfg.seed], fixed)[0]
    if isinstance(res, Exception):
        raise res
    return res


# -- hyperparameter refit ----------------------------------------------------

def _apply_fit(old: GlobalState, samples: SampleSet, xi, gk, gth, ba, bb, kb, tb) -> GlobalState:
    vulns = {}
    for i, vid in enumerate(old.vuln_ids):
        vs = old.vulns[vid]
        kw = {}
        if gk is not None:
            kw["gamma_k"], kw["gamma_theta"] = float(gk[i]), float(gth[i])
        if ba is not None:
            kw["beta_ab"] = {x: (float(ba[i, t]), float(bb[i, t])) for t, x in enumerate(old.obs_types)}
        kw["rate_product"] = (float(kb[i]), float(tb[i]))
        vulns[vid] = replace(vs, **kw)
    new_xi = old.xi if xi is None else tuple(float(v) for v in xi)
    return replace(old, xi=new_xi, vulns=vulns)


def _fit_arrays(w, beta, kappa, rate, fixed, T, kappa_logit=None, log_w=None):
    """Fit every family to draws with the sample axis first (any batch axes after)."""
    xi = None if ("w" in fixed or T == 1) else fit_dirichlet(w, "xi", logx=log_w)
    gk = gth = ba = bb = None
    if "beta" not in fixed:
        gk, gth = fit_gamma(beta, "gamma_k/gamma_theta")
    if "kappa" not in fixed:
        ba, bb = fit_beta(kappa, "beta_ab", logit=kappa_logit)
    kb, tb = fit_gamma(rate, "rate_product")
    return xi, gk, gth, ba, bb, kb, tb


def refit_hyperparameters(samples: SampleSet, old: GlobalState) -> GlobalState:
    """ML refit of xi, (k, theta), (a, b) and the rate-product Gamma to the draws.

    Dirichlet pseudo-counts ``alpha`` pass through unchanged.
    """
    if samples.n_kept == 0:
        raise ModelError("empty sample set")
    if samples.vuln_ids != old.vuln_ids or samples.obs_types != old.obs_types:
        raise ModelError("sample set does not match the state's structure")
    fits = _fit_arrays(samples.w, samples.beta, samples.kappa, samples.rate_product(),
                       samples.fixed, len(old.obs_types), samples.kappa_logit, samples.log_w)
    return _apply_fit(old, samples, *fits)


def refit_batch(sample_sets: Sequence[SampleSet], olds: Sequence[GlobalState]) -> list:
    """Refit many sample sets at once; falls back to one-by-one to isolate failures."""
    if not sample_sets:
        return []
    fixed = sample_sets[0].fixed
    same = all(s.fixed == fixed and s.n_kept == sample_sets[0].n_kept for s in sample_sets)
    if same:
        try:
            w = np.stack([s.w for s in sample_sets], axis=1)
            beta = np.stack([s.beta for s in sample_sets], axis=1)
            kappa = np.stack([s.kappa for s in sample_sets], axis=1)
            rate = np.stack([s.rate_product() for s in sample_sets], axis=1)
            logit = None
            if all(s.kappa_logit is not None for s in sample_sets):
                logit = np.stack([s.kappa_logit for s in sample_sets], axis=1)
            log_w = None
            if all(s.log_w is not None for s in sample_sets):
                log_w = np.stack([s.log_w for s in sample_sets], axis=1)
            fits = _fit_arrays(w, beta, kappa, rate, fixed, len(olds[0].obs_types), logit, log_w)
            return [_apply_fit(old, ss, *(None if f is None else f[j] for f in fits))
                    for j, (ss, old) in enumerate(zip(sample_sets, olds))]
        except FitError:
            pass
    out = []
    for ss, old in zip(sample_sets, olds):
        try:
            out.append(refit_hyperparameters(ss, old))
        except FitError as exc:
            out.append(exc)
    return out


# -- Hurt-level Dirichlet -----------------------------------------------------

def update_hurt_dirichlet(alpha, ahl) -> np.ndarray:
    """Add the per-level counts of the AHL values to the pseudo-counts."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (N_LEVELS,) or np.any(alpha <= 0):
        raise ModelError(f"alpha must be {N_LEVELS} positive pseudo-counts")
    levels = [check_level(a) for a in ahl]
    return alpha + np.bincount(np.asarray(levels, dtype=int), minlength=N_LEVELS)


def update_hurt_phl(alpha_hat, a, p) -> np.ndarray:
    """Shift pseudo-count mass within the tail ``j >= a`` towards the PHL level ``p``.

    Entries below ``a`` are untouched; the tail is rescaled by
    ``rho / (rho + 1)`` after adding one to level ``p``, where ``rho`` is the
    tail mass, so the total pseudo-count is preserved.
    """
    alpha_hat = np.asarray(alpha_hat, dtype=float)
    if alpha_hat.shape != (N_LEVELS,) or np.any(alpha_hat <= 0):
        raise ModelError(f"alpha must be {N_LEVELS} positive pseudo-counts")
    a, p = check_level(a), check_level(p)
    if p < a:
        raise ModelError(f"PHL {p} is below AHL {a}")
    out = alpha_hat.copy()
    tail = out[a:]
    rho = tail.sum()
    scale = rho / (rho + 1.0)
    tail[p - a] += 1.0
    tail *= scale
    # the rescaled tail must carry exactly the old tail mass
    tail[p - a] += rho - tail.sum()
    return out


def update_hurt_state(alpha, ahl, phl, use_phl: bool = True) -> np.ndarray:
    """AHL counts in one step, then one PHL update per incident in record order."""
    out = update_hurt_dirichlet(alpha, ahl)
    if use_phl:
        for a, p in zip(ahl, phl):
            out = update_hurt_phl(out, a, p)
    return out


def _update_alphas(state: GlobalState, records, use_phl) -> GlobalState:
    vulns = dict(state.vulns)
    for rec in records:
        vs = vulns[rec.vuln_id]
        if rec.ahl:
            vulns[rec.vuln_id] = vs.with_alpha(update_hurt_state(vs.alpha, rec.ahl, rec.phl, use_phl))
    return replace(state, vulns=vulns, day=state.day + 1)


# -- daily update ---------------------------------------------------------------

def _check_day(state: GlobalState, records):
    for rec in records:
        if rec.day != state.day + 1:
            raise ModelError(f"record for {rec.vuln_id} carries day {rec.day}, "
                             f"expected {state.day + 1}")


def daily_update_batch(states: Sequence[GlobalState], records_list, cfg: McmcConfig,
                       seeds: Sequence[int], use_phl: bool = True) -> list:
    """Advance many independent states by one day.

    Each entry of the result is either the successor state or an
    ``UpdateError`` holding the unmodified input state.
    """
    out: list = [None] * len(states)
    ok = []
    for s, (st, recs) in enumerate(zip(states, records_list)):
        try:
            _check_day(st, recs)
            _check_records(st, recs)
            ok.append(s)
        except ModelError as exc:
            out[s] = UpdateError(exc, st, st.day + 1)
    if not ok:
        return out
    samples = sample_posterior_batch([states[s] for s in ok], [records_list[s] for s in ok],
                                     cfg, [seeds[s] for s in ok])
    good = [(s, ss) for s, ss in zip(ok, samples) if not isinstance(ss, Exception)]
    for s, ss in zip(ok, samples):
        if isinstance(ss, Exception):
            out[s] = UpdateError(ss, states[s], states[s].day + 1)
    refits = refit_batch([ss for _, ss in good], [states[s] for s, _ in good])
    for (s, _), new in zip(good, refits):
        if isinstance(new, Exception):
            out[s] = UpdateError(new, states[s], states[s].day + 1)
        else:
            out[s] = _update_alphas(new, records_list[s], use_phl)
    return out


def daily_update(state: GlobalState, records: Sequence[DailyRecord], cfg: McmcConfig,
                 use_phl: bool = True) -> GlobalState:
    """One step of the recursion: today's posterior becomes tomorrow's prior.

    Raises ``UpdateError`` (carrying the unmodified input state) on failure.
    """
    res = daily_update_batch([state], [records], cfg, [cfg.seed], use_phl)[0]
    if isinstance(res, UpdateError):
        raise res
    return res
