"""Domain types and log-densities of the hierarchical safety-data model.

Each vulnerability ``i`` has per-observation-type unsafe proportions
``kappa[i, X]``, a residual incident-rate factor ``beta[i]`` and a Hurt-level
distribution ``p[i]``.  Observation types share a weight vector ``w``; the
effective unsafe proportion ``sum_X w[X] * kappa[i, X]`` scales the Poisson
incident rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import betaln, gammaln, xlog1py, xlogy

N_LEVELS = 6
MAX_LEVEL = N_LEVELS - 1
SCHEMA_VERSION = 1

DEFAULT_LOSS = (0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0)


class ModelError(ValueError):
    """Invalid model input (violated invariant or mismatched structure)."""


class BoundaryError(ModelError):
    """A density was evaluated on the boundary of its support."""


def check_level(level) -> int:
    lvl = int(level)
    if lvl != level or not 0 <= lvl <= MAX_LEVEL:
        raise ModelError(f"Hurt level must be an integer in 0..{MAX_LEVEL}, got {level!r}")
    return lvl


@dataclass(frozen=True)
class DailyRecord:
    """One day of safety data for one vulnerability.

    ``n_e`` is ``None`` when the incident count was not recorded, in which
    case the incident (Poisson) term drops out of the likelihood.
    ``obs`` maps observation type to ``(n_total, n_neg)``.
    """

    vuln_id: str
    day: int
    n_e: Optional[int] = 0
    ahl: tuple = ()
    phl: tuple = ()
    obs: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        ahl = tuple(check_level(a) for a in self.ahl)
        phl = tuple(check_level(p) for p in self.phl)
        object.__setattr__(self, "ahl", ahl)
        object.__setattr__(self, "phl", phl)
        n_inc = 0 if self.n_e is None else int(self.n_e)
        if n_inc < 0:
            raise ModelError(f"negative incident count for {self.vuln_id}")
        if len(ahl) != n_inc or len(phl) != n_inc:
            raise ModelError(
                f"{self.vuln_id} day {self.day}: expected {n_inc} AHL/PHL values, "
                f"got {len(ahl)}/{len(phl)}"
            )
        for j, (a, p) in enumerate(zip(ahl, phl)):
            if p < a:
                raise ModelError(
                    f"{self.vuln_id} day {self.day}, incident {j}: PHL {p} < AHL {a} "
                    "(PHL must be >= AHL)"
                )
        obs = {}
        for x, (tot, neg) in self.obs.items():
            tot, neg = int(tot), int(neg)
            if tot < 0 or neg < 0 or neg > tot:
                raise ModelError(
                    f"{self.vuln_id} day {self.day}, type {x}: need 0 <= n_neg <= n_total, "
                    f"got n_neg={neg}, n_total={tot}"
                )
            obs[x] = (tot, neg)
        object.__setattr__(self, "obs", obs)

    def counts(self, obs_types: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        tot = np.array([self.obs.get(x, (0, 0))[0] for x in obs_types], dtype=float)
        neg = np.array([self.obs.get(x, (0, 0))[1] for x in obs_types], dtype=float)
        return tot, neg


@dataclass(frozen=True)
class LatentParams:
    """A point in parameter space for every vulnerability at once.

    ``p`` may be omitted when only the count block is of interest.
    """

    w: Mapping[str, float]
    beta: Mapping[str, float]
    kappa: Mapping[str, Mapping[str, float]]
    p: Optional[Mapping[str, Sequence[float]]] = None

    def effective_kappa(self, vuln_id: str) -> float:
        k = self.kappa[vuln_id]
        return float(sum(self.w[x] * k[x] for x in self.w))


@dataclass(frozen=True)
class VulnerabilityState:
    """Hyperparameters describing the current belief about one vulnerability."""

    alpha: tuple
    gamma_k: float
    gamma_theta: float
    beta_ab: Mapping[str, tuple]
    rate_product: Optional[tuple] = None

    def __post_init__(self):
        alpha = tuple(float(a) for a in self.alpha)
        if len(alpha) != N_LEVELS:
            raise ModelError(f"alpha must have {N_LEVELS} entries, got {len(alpha)}")
        if not all(a > 0 for a in alpha):
            raise ModelError("alpha entries must be strictly positive")
        object.__setattr__(self, "alpha", alpha)
        if not (self.gamma_k > 0 and self.gamma_theta > 0):
            raise ModelError("Gamma hyperparameters must be positive")
        ab = {x: (float(a), float(b)) for x, (a, b) in self.beta_ab.items()}
        if not all(a > 0 and b > 0 for a, b in ab.values()):
            raise ModelError("Beta hyperparameters must be positive")
        object.__setattr__(self, "beta_ab", ab)
        if self.rate_product is not None:
            kb, tb = (float(v) for v in self.rate_product)
            if not (kb > 0 and tb > 0):
                raise ModelError("rate-product Gamma parameters must be positive")
            object.__setattr__(self, "rate_product", (kb, tb))

    def with_alpha(self, alpha) -> "VulnerabilityState":
        return replace(self, alpha=tuple(alpha))


@dataclass(frozen=True)
class GlobalState:
    obs_types: tuple
    xi: tuple
    vulns: Mapping[str, VulnerabilityState]
    day: int = 0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        types = tuple(self.obs_types)
        xi = tuple(float(v) for v in self.xi)
        if len(types) != len(xi) or not types:
            raise ModelError("xi must have one entry per observation type")
        if not all(v > 0 for v in xi):
            raise ModelError("xi entries must be strictly positive")
        for vid, vs in self.vulns.items():
            if set(vs.beta_ab) != set(types):
                raise ModelError(f"vulnerability {vid} has observation types "
                                 f"{sorted(vs.beta_ab)}, expected {sorted(types)}")
        object.__setattr__(self, "obs_types", types)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "vulns", dict(self.vulns))

    @property
    def vuln_ids(self) -> tuple:
        return tuple(self.vulns)


@dataclass(frozen=True)
class PriorConfig:
    """Initial hyperparameters used at t = 0 for every vulnerability."""

    xi: float = 1.0
    alpha: float = 1.0
    gamma_k: float = 1.0
    gamma_theta: float = 0.1
    beta_a: float = 1.0
    beta_b: float = 1.0


def initial_state(vuln_ids: Sequence[str], obs_types: Sequence[str],
                  prior: PriorConfig = PriorConfig()) -> GlobalState:
    vulns = {
        vid: VulnerabilityState(
            alpha=(prior.alpha,) * N_LEVELS,
            gamma_k=prior.gamma_k,
            gamma_theta=prior.gamma_theta,
            beta_ab={x: (prior.beta_a, prior.beta_b) for x in obs_types},
        )
        for vid in vuln_ids
    }
    return GlobalState(obs_types=tuple(obs_types), xi=(prior.xi,) * len(obs_types), vulns=vulns)


def loss_vector(c: Sequence[float] = DEFAULT_LOSS) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.shape != (N_LEVELS,):
        raise ModelError(f"loss vector must have {N_LEVELS} entries")
    if c[0] != 0 or np.any(np.diff(c) < 0):
        raise ModelError("loss vector must start at 0 and be non-decreasing")
    return c


# -- log densities ----------------------------------------------------------

def _log_binom_pmf(k, n, p) -> float:
    return float(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
                 + xlogy(k, p) + xlog1py(n - k, -p))


def _log_poisson_pmf(k, rate) -> float:
    return float(xlogy(k, rate) - rate - gammaln(k + 1))


def log_counts_likelihood(record: DailyRecord, params: LatentParams) -> float:
    """Binomial observation terms plus the Poisson incident term."""
    vid = record.vuln_id
    if vid not in params.kappa or vid not in params.beta:
        raise ModelError(f"no parameters for vulnerability {vid}")
    kap = params.kappa[vid]
    unknown = set(record.obs) - set(params.w)
    if unknown or set(kap) != set(params.w):
        raise ModelError(f"observation types do not match the parameter set: {sorted(unknown)}")
    total = 0.0
    for x, (tot, neg) in record.obs.items():
        total += _log_binom_pmf(neg, tot, kap[x])
    if record.n_e is not None:
        total += _log_poisson_pmf(record.n_e, params.effective_kappa(vid) * params.beta[vid])
    if not np.isfinite(total):
        raise BoundaryError(f"count likelihood not finite for {vid} (parameters on the boundary)")
    return total


def log_hurt_likelihood(record: DailyRecord, p: Sequence[float]) -> float:
    """Multinomial AHL term plus one tail-renormalised categorical term per PHL."""
    p = np.asarray(p, dtype=float)
    if p.shape != (N_LEVELS,):
        raise ModelError(f"p must have {N_LEVELS} entries")
    ahl = np.asarray(record.ahl, dtype=int)
    if ahl.size == 0:
        return 0.0
    counts = np.bincount(ahl, minlength=N_LEVELS)
    if np.any((p <= 0) & (counts > 0)) or np.any(p[np.asarray(record.phl, dtype=int)] <= 0):
        raise BoundaryError("zero Hurt-level probability where a count is positive")
    ll = gammaln(ahl.size + 1) - gammaln(counts + 1).sum() + xlogy(counts, p).sum()
    tails = np.cumsum(p[::-1])[::-1]  # tails[a] = sum_{l >= a} p[l]
    for a, ph in zip(record.ahl, record.phl):
        ll += np.log(p[ph]) - np.log(tails[a])
    return float(ll)


def log_dirichlet_pdf(x, conc) -> float:
    x = np.asarray(x, dtype=float)
    conc = np.asarray(conc, dtype=float)
    norm = gammaln(conc.sum()) - gammaln(conc).sum()
    return float(norm + xlogy(conc - 1, x).sum())


def log_gamma_pdf(x, k, theta) -> float:
    """Gamma density in the shape/scale parameterisation."""
    return float(xlogy(k - 1, x) - x / theta - gammaln(k) - k * np.log(theta))


def log_beta_pdf(x, a, b) -> float:
    return float(xlogy(a - 1, x) + xlog1py(b - 1, -x) - betaln(a, b))


def log_prior(params: LatentParams, state: GlobalState) -> float:
    """Prior log-density of the count block (w, beta, kappa).

    The Hurt-level Dirichlet is conjugate and handled analytically, so it is
    not part of this density.
    """
    if set(params.w) != set(state.obs_types):
        raise ModelError("weight vector does not match the state's observation types")
    w = [params.w[x] for x in state.obs_types]
    total = log_dirichlet_pdf(w, state.xi)
    for vid, vs in state.vulns.items():
        if vid not in params.beta:
            continue
        total += log_gamma_pdf(params.beta[vid], vs.gamma_k, vs.gamma_theta)
        for x in state.obs_types:
            a, b = vs.beta_ab[x]
            total += log_beta_pdf(params.kappa[vid][x], a, b)
    if not np.isfinite(total):
        raise BoundaryError("prior density evaluated on the boundary of its support")
    return float(total)
