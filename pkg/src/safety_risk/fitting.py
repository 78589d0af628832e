"""Maximum-likelihood fits of Gamma, Beta and Dirichlet distributions.

All fitters take draws along axis 0 and fit every remaining column
independently, so a whole batch of problems is fitted in one call.
"""

import numpy as np
from scipy.special import digamma, gammaln, log_expit, polygamma

MAX_ITER = 200
TOL = 1e-8
MIN_VARIANCE = 1e-12
_NOISE = 64 * np.finfo(float).eps


class FitError(RuntimeError):
    """An ML fit did not converge within the iteration budget."""

    def __init__(self, param, message=""):
        self.param = param
        super().__init__(f"ML fit of {param!r} did not converge" + (f": {message}" if message else ""))


class DegenerateSampleError(FitError):
    """Samples have (near) zero variance, so the ML fit is ill-posed."""

    def __init__(self, param):
        RuntimeError.__init__(self, f"samples of {param!r} have variance below {MIN_VARIANCE}")
        self.param = param


def trigamma(x):
    return polygamma(1, x)


def _check_variance(x, param):
    if x.shape[0] < 2 or np.any(np.var(x, axis=0) < MIN_VARIANCE):
        raise DegenerateSampleError(param)


def inv_digamma(y, n_iter=6):
    """Inverse of the digamma function (Newton from Minka's initialisation)."""
    y = np.asarray(y, dtype=float)
    x = np.where(y >= -2.22, np.exp(y) + 0.5, -1.0 / (y - digamma(1.0)))
    for _ in range(n_iter):
        x = x - (digamma(x) - y) / trigamma(x)
    return x


def fit_gamma(x, param="gamma"):
    """ML fit of a Gamma(shape k, scale theta) to positive samples along axis 0.

    Newton iteration on ``log k - digamma(k) = log mean(x) - mean(log x)``.
    """
    x = np.asarray(x, dtype=float)
    _check_variance(x, param)
    if np.any(x <= 0):
        raise FitError(param, "Gamma samples must be positive")
    mean = x.mean(axis=0)
    s = np.log(mean) - np.log(x).mean(axis=0)
    s = np.maximum(s, 1e-300)
    k = (3.0 - s + np.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
    # converged columns are frozen, so each column's result does not depend
    # on what else is in the batch
    done = np.zeros(np.shape(k), dtype=bool)
    for _ in range(MAX_ITER):
        f = np.log(k) - digamma(k) - s
        df = 1.0 / k - trigamma(k)
        step = f / df
        k_new = k - step
        k_new = np.where(k_new <= 0, k / 2, k_new)
        # at very large shapes f is pure rounding noise; accept once below it
        now = (np.abs(k_new - k) <= TOL * k_new) | (np.abs(f) <= _NOISE * (np.abs(np.log(k)) + 1))
        k = np.where(done, k, k_new)
        done = done | now
        if np.all(done):
            break
    else:
        raise FitError(param, "Newton iteration on the shape exceeded the budget")
    return k, mean / k


def fit_beta(x, param="beta", logit=None):
    """ML fit of a Beta(a, b) to samples in (0, 1) along axis 0.

    Method-of-moments start, then the guarded Newton solver shared with the
    Dirichlet fit (a Beta is a two-component Dirichlet).
    ``logit`` optionally holds the same samples on the logit scale; the
    sufficient statistics and the degeneracy check then use it, which keeps
    samples that round to 0 or 1 usable.
    """
    x = np.asarray(x, dtype=float)
    if logit is None:
        _check_variance(x, param)
        if np.any((x <= 0) | (x >= 1)):
            raise FitError(param, "Beta samples must lie strictly inside (0, 1)")
    else:
        logit = np.asarray(logit, dtype=float)
        _check_variance(logit, param)
    if logit is None:
        m = x.mean(axis=0)
        common = np.maximum(m * (1 - m) / x.var(axis=0) - 1.0, 1e-3)
        a, b = m * common, (1 - m) * common
        l1, l2 = np.log(x).mean(axis=0), np.log1p(-x).mean(axis=0)
    else:
        # logit-scale moments: mean ~ log(a / b), variance ~ 1/a + 1/b
        mz, vz = logit.mean(axis=0), logit.var(axis=0)
        with np.errstate(over="ignore"):
            a = (1.0 + np.exp(mz)) / vz
            b = (1.0 + np.exp(-mz)) / vz
        l1, l2 = log_expit(logit).mean(axis=0), log_expit(-logit).mean(axis=0)
    alpha = _dirichlet_mle(np.stack([a, b], axis=-1), np.stack([l1, l2], axis=-1), param)
    return alpha[..., 0], alpha[..., 1]


def fit_dirichlet(x, param="dirichlet", logx=None):
    """ML fit of a Dirichlet to simplex samples ``x`` of shape (N, ..., K).

    Guarded Newton iteration started from a moment estimate of the precision;
    the plain fixed-point update alone stalls once the precision reaches the tens.
    ``logx`` optionally holds ``log(x)`` computed without underflow; the
    sufficient statistics and the degeneracy check then use it.
    """
    x = np.asarray(x, dtype=float)
    if logx is None:
        _check_variance(x, param)
        if np.any(x <= 0):
            raise FitError(param, "Dirichlet samples must be positive")
        lx = np.log(x)
    else:
        lx = np.asarray(logx, dtype=float)
        _check_variance(lx, param)
        x = np.exp(lx)
    logx = lx.mean(axis=0)
    m = x.mean(axis=0)
    v = x.var(axis=0)
    # precision from the moments of every component, averaged in log space
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(v > 0, m * (1 - m) / v - 1.0, np.inf)
    prec = np.exp(np.mean(np.log(np.clip(ratio, 1e-3, 1e12)), axis=-1, keepdims=True))
    alpha = m * prec
    # components whose mean underflowed start from the log-variance instead (var log x ~ 1/alpha)
    alpha = np.where(alpha > 0, alpha, 1.0 / np.maximum(lx.var(axis=0), 1e-12))
    return _dirichlet_mle(alpha, logx, param)


def _loglik(alpha, logx):
    return (gammaln(alpha.sum(axis=-1)) - gammaln(alpha).sum(axis=-1)
            + ((alpha - 1.0) * logx).sum(axis=-1))


def _dirichlet_mle(alpha, logx, param):
    """Maximize the Dirichlet likelihood given the mean log-samples ``logx`` (..., K).

    Newton with the diagonal-plus-rank-one Hessian (Sherman-Morrison),
    backtracking on the concave log-likelihood; a Minka fixed-point step is
    taken whenever Newton makes no progress.  Rows converge independently
    and are then frozen.
    """
    alpha = np.array(alpha, dtype=float)
    # implausible starts (overflowed moments) make the Hessian lose all precision
    bad = np.any(~np.isfinite(alpha) | (alpha < 1e-10) | (alpha > 1e10), axis=-1, keepdims=True)
    alpha = np.where(bad, 1.0, alpha)
    done = np.zeros(alpha.shape[:-1] + (1,), dtype=bool)
    f = _loglik(alpha, logx)[..., None]
    for _ in range(MAX_ITER):
        s = alpha.sum(axis=-1, keepdims=True)
        g = digamma(s) - digamma(alpha) + logx
        q = -trigamma(alpha)
        z = trigamma(s)
        b = (g / q).sum(axis=-1, keepdims=True) / (1.0 / z + (1.0 / q).sum(axis=-1, keepdims=True))
        step = (g - b) / q
        t = np.ones_like(s)
        new = alpha - step
        f_new = np.full_like(f, -np.inf)
        slack = 1e-12 * (np.abs(f) + 1.0)
        for _ in range(60):
            ok = np.all(new > 0, axis=-1, keepdims=True)
            with np.errstate(invalid="ignore"):
                f_new = np.where(ok, _loglik(np.where(ok, new, 1.0), logx)[..., None], -np.inf)
            short = ~ok | (f_new < f - slack)
            if not np.any(short & ~done):
                break
            t = np.where(short, t / 2, t)
            new = alpha - t * step
        # no Newton progress: the fixed-point update never decreases the likelihood
        stuck = ~np.all(new > 0, axis=-1, keepdims=True) | (f_new < f - slack)
        if np.any(stuck & ~done):
            fp = inv_digamma(digamma(s) + logx)
            new = np.where(stuck, fp, new)
            f_new = np.where(stuck, _loglik(new, logx)[..., None], f_new)
        now = np.all(np.abs(new - alpha) <= TOL * new, axis=-1, keepdims=True)
        # at very large precisions the gradient is pure rounding noise; accept once below it
        now |= np.all(np.abs(g) <= _NOISE * (np.abs(digamma(s)) + 1), axis=-1, keepdims=True)
        alpha = np.where(done, alpha, new)
        f = np.where(done, f, f_new)
        done = done | now
        if np.all(done):
            break
    else:
        raise FitError(param, "Newton iteration exceeded the budget")
    return alpha
