"""Bayesian safety-risk calibration from observations and incidents, with
loss-minimizing allocation of daily safety observations."""

from .allocation import (AllocationResult, OptConfig, conditional_expected_loss,
                         intervention_response, optimize_allocation)
from .inference import McmcConfig, SampleSet, UpdateError, daily_update, sample_posterior
from .model import (DEFAULT_LOSS, DailyRecord, GlobalState, LatentParams, PriorConfig,
                    VulnerabilityState, initial_state)
from .risk import RiskReport, expected_hurt_counts, expected_loss, tail_probability, var_cvar

__all__ = [
    "AllocationResult", "OptConfig", "conditional_expected_loss", "intervention_response",
    "optimize_allocation", "McmcConfig", "SampleSet", "UpdateError", "daily_update",
    "sample_posterior", "DEFAULT_LOSS", "DailyRecord", "GlobalState", "LatentParams",
    "PriorConfig", "VulnerabilityState", "initial_state", "RiskReport", "expected_hurt_counts",
    "expected_loss", "tail_probability", "var_cvar",
]
