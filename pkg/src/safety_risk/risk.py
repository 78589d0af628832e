"""Per-vulnerability risk metrics from a calibrated state."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import DEFAULT_LOSS, GlobalState, ModelError, VulnerabilityState, loss_vector


class MissingFitError(ModelError):
    """The rate-product Gamma has not been fitted yet."""


class InsufficientDrawsError(ValueError):
    pass


@dataclass(frozen=True)
class RiskReport:
    vuln_id: str
    day: int
    expected_loss: float
    tail_probability: float
    expected_hurt_counts: tuple
    var_cvar: Optional[tuple] = None   # (VaR, CVaR, confidence)


def _rate(state: VulnerabilityState) -> float:
    if state.rate_product is None:
        raise MissingFitError("rate_product has not been fitted for this vulnerability")
    kb, tb = state.rate_product
    return kb * tb


def hurt_mean(state: VulnerabilityState) -> np.ndarray:
    alpha = np.asarray(state.alpha)
    return alpha / alpha.sum()


def expected_hurt_counts(state: VulnerabilityState) -> np.ndarray:
    """Expected daily number of incidents at each Hurt level."""
    return _rate(state) * hurt_mean(state)


def expected_loss(state: VulnerabilityState, c: Sequence[float] = DEFAULT_LOSS) -> float:
    alpha = np.asarray(state.alpha)
    return float(_rate(state) * (loss_vector(c) @ alpha) / alpha.sum())


def tail_probability(state: VulnerabilityState, min_level: int = 4) -> float:
    """Probability of at least one incident at or above ``min_level`` in a day.

    The Gamma-distributed rate is integrated out exactly (the zero class of a
    negative binomial), with the Hurt distribution fixed at its posterior mean.
    """
    if state.rate_product is None:
        raise MissingFitError("rate_product has not been fitted for this vulnerability")
    kb, tb = state.rate_product
    q = float(hurt_mean(state)[min_level:].sum())
    return float(-np.expm1(-kb * np.log1p(tb * q)))


def sample_daily_loss(state: VulnerabilityState, c, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from the posterior predictive distribution of one day's loss."""
    if state.rate_product is None:
        raise MissingFitError("rate_product has not been fitted for this vulnerability")
    c = loss_vector(c)
    kb, tb = state.rate_product
    rate = rng.gamma(kb, tb, n_draws)
    p = rng.dirichlet(np.asarray(state.alpha), n_draws)
    n_e = rng.poisson(rate)
    counts = rng.multinomial(n_e, p)
    return counts @ c


def var_cvar(state: VulnerabilityState, c=DEFAULT_LOSS, confidence: float = 0.95,
             n_draws: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo value-at-risk and conditional value-at-risk of the daily loss."""
    if not 0.5 < confidence < 1:
        raise ValueError("confidence must lie in (0.5, 1)")
    if n_draws < 1000 or n_draws * (1 - confidence) < 10:
        raise InsufficientDrawsError(
            f"{n_draws} draws are too few to resolve the {confidence} quantile")
    losses = sample_daily_loss(state, c, n_draws, np.random.default_rng(seed))
    var = float(np.quantile(losses, confidence, method="inverted_cdf"))
    cvar = float(losses[losses >= var].mean())
    return var, cvar


def risk_report(state: GlobalState, vuln_id: str, c=DEFAULT_LOSS, min_level: int = 4,
                confidence: Optional[float] = None, n_draws: int = 100_000,
                seed: int = 0) -> RiskReport:
    vs = state.vulns[vuln_id]
    vc = None
    if confidence is not None:
        vc = var_cvar(vs, c, confidence, n_draws, seed) + (confidence,)
    return RiskReport(
        vuln_id=vuln_id, day=state.day, expected_loss=expected_loss(vs, c),
        tail_probability=tail_probability(vs, min_level),
        expected_hurt_counts=tuple(expected_hurt_counts(vs)), var_cvar=vc,
    )


def risk_reports(state: GlobalState, c=DEFAULT_LOSS, min_level: int = 4, **kw) -> list:
    return [risk_report(state, vid, c, min_level, **kw) for vid in state.vuln_ids]
