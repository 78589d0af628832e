"""Batched Hamiltonian Monte Carlo over the count block of the model.

A batch holds ``S`` independent problems that share the number of
vulnerabilities ``n`` and observation types ``T``.  Each problem is sampled by
its own chain, with its own random stream, step size and diagonal metric, so
results for a problem do not depend on what else is in the batch.

Unconstrained coordinates, per problem::

    q = [ alr(w) (T-1) | log beta (n) | logit kappa (n*T, row-major) ]

``alr`` is the additive log-ratio against the last observation type.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import digamma, expit, logsumexp, xlogy

from ._kernels import lp_grad_batch, trajectories
from .fitting import trigamma


class SamplerError(RuntimeError):
    """The chain did not reach an acceptable acceptance rate."""


@dataclass
class CountProblem:
    """Prior hyperparameters and one day of counts for a batch of problems."""

    xi: np.ndarray        # (S, T)
    gamma_k: np.ndarray   # (S, n)
    gamma_theta: np.ndarray
    beta_a: np.ndarray    # (S, n, T)
    beta_b: np.ndarray
    n_total: np.ndarray   # (S, n, T)
    n_neg: np.ndarray
    n_e: np.ndarray       # (S, n)
    has_e: np.ndarray     # (S, n), 1.0 where the incident count was recorded
    fixed_w: Optional[np.ndarray] = None      # (S, T)
    fixed_beta: Optional[np.ndarray] = None   # (S, n)
    fixed_kappa: Optional[np.ndarray] = None  # (S, n, T)

    @property
    def shape(self):
        S, n, T = self.beta_a.shape
        return S, n, T

    @property
    def dim(self) -> int:
        S, n, T = self.shape
        return T - 1 + n + n * T

    def slices(self):
        S, n, T = self.shape
        return slice(0, T - 1), slice(T - 1, T - 1 + n), slice(T - 1 + n, T - 1 + n + n * T)

    def free_mask(self) -> np.ndarray:
        su, sb, sz = self.slices()
        mask = np.ones(self.dim, dtype=bool)
        if self.fixed_w is not None:
            mask[su] = False
        if self.fixed_beta is not None:
            mask[sb] = False
        if self.fixed_kappa is not None:
            mask[sz] = False
        return mask

    def take(self, idx) -> "CountProblem":
        """Sub-batch with the problems at ``idx``."""
        def pick(a):
            return None if a is None else a[idx]
        return CountProblem(*(pick(getattr(self, f)) for f in self.__dataclass_fields__))

    # -- transforms ---------------------------------------------------------

    def constrain(self, q):
        """Map unconstrained draws (..., D) to ``(w, beta, kappa)``."""
        S, n, T = self.shape
        su, sb, sz = self.slices()
        lead = q.shape[:-1]
        u = q[..., su]
        ext = np.concatenate([u, np.zeros(lead + (1,))], axis=-1)
        ext = ext - ext.max(axis=-1, keepdims=True)
        w = np.exp(ext)
        w /= w.sum(axis=-1, keepdims=True)
        beta = np.exp(q[..., sb])
        kappa = expit(q[..., sz].reshape(lead + (n, T)))
        if self.fixed_w is not None:
            w = np.broadcast_to(self.fixed_w, w.shape)
        if self.fixed_beta is not None:
            beta = np.broadcast_to(self.fixed_beta, beta.shape)
        if self.fixed_kappa is not None:
            kappa = np.broadcast_to(self.fixed_kappa, kappa.shape)
        return w, beta, kappa

    def log_weights(self, q):
        """log w for draws (..., D), computed in log space so tiny weights stay finite."""
        T = self.shape[2]
        if self.fixed_w is not None:
            return np.broadcast_to(np.log(self.fixed_w), q.shape[:-1] + (T,))
        u = q[..., self.slices()[0]]
        ext = np.concatenate([u, np.zeros(q.shape[:-1] + (1,))], axis=-1)
        return ext - logsumexp(ext, axis=-1, keepdims=True)

    def prior_moments(self):
        """Mean and variance of each unconstrained coordinate under the prior."""
        S, n, T = self.shape
        xi = self.xi
        mu_u = digamma(xi[:, :-1]) - digamma(xi[:, -1:])
        var_u = trigamma(xi[:, :-1]) + trigamma(xi[:, -1:])
        mu_b = digamma(self.gamma_k) + np.log(self.gamma_theta)
        var_b = trigamma(self.gamma_k)
        mu_z = digamma(self.beta_a) - digamma(self.beta_b)
        var_z = trigamma(self.beta_a) + trigamma(self.beta_b)
        mean = np.concatenate([mu_u, mu_b, mu_z.reshape(S, n * T)], axis=1)
        var = np.concatenate([var_u, var_b, var_z.reshape(S, n * T)], axis=1)
        return mean, var

    # -- density ------------------------------------------------------------

    def logp_grad(self, q, need_lp=True):
        """Unnormalised log posterior density in unconstrained space, with gradient.

        Includes the log-Jacobians of the transforms.  Blocks that are held
        fixed contribute neither prior terms nor gradient.  With
        ``need_lp=False`` only the gradient is computed (the density is 0).
        """
        S, n, T = self.shape
        c = self._cache()
        grad = np.empty_like(q)
        lp = np.zeros(S)
        nT = n * T
        gu = grad[:, : T - 1]
        gb = grad[:, T - 1 : T - 1 + n]
        gz = grad[:, T - 1 + n :].reshape(S, n, T)

        if self.fixed_w is None:
            ext = np.zeros((S, T))
            ext[:, :-1] = q[:, : T - 1]
            ext -= ext.max(axis=1, keepdims=True)
            ew = np.exp(ext)
            tot_w = ew.sum(axis=1, keepdims=True)
            w = ew / tot_w
            if need_lp:
                lp += (self.xi * (ext - np.log(tot_w))).sum(axis=1)
            gu[:] = (self.xi - w * c["xi_sum"])[:, :-1]
        else:
            w = self.fixed_w
            gu[:] = 0.0

        if self.fixed_beta is None:
            lb = q[:, T - 1 : T - 1 + n]
            beta = np.exp(lb)
            if need_lp:
                lp += (self.gamma_k * lb - beta * c["inv_theta"]).sum(axis=1)
            gb[:] = self.gamma_k - beta * c["inv_theta"]
        else:
            beta = self.fixed_beta
            gb[:] = 0.0

        if self.fixed_kappa is None:
            z = q[:, T - 1 + n :].reshape(S, n, T)
            if need_lp:
                # log sigmoid(+-z) = min(+-z, 0) - log1p(exp(-|z|))
                soft = np.log1p(np.exp(-np.abs(z)))
                lk = np.minimum(z, 0.0) - soft
                kappa = np.exp(lk)
                lp += (c["a"] * lk + c["b"] * (lk - z)).sum(axis=(1, 2))
            else:
                kappa = 1.0 / (1.0 + np.exp(-z))
            np.multiply(c["ab"], kappa, out=gz)
            np.subtract(c["a"], gz, out=gz)
        else:
            kappa = self.fixed_kappa
            if need_lp:
                lp += c["fixed_binom"]
            gz[:] = 0.0

        kbar = np.einsum("st,snt->sn", w, kappa)
        rate = kbar * beta
        he = self.has_e
        if need_lp:
            lp += (he * (xlogy(self.n_e, rate) - rate)).sum(axis=1)
        if self.fixed_beta is None:
            gb += he * (self.n_e - rate)
        d = he * (self.n_e / kbar - beta)
        if self.fixed_kappa is None:
            gz += (d[:, :, None] * w[:, None, :]) * (kappa - kappa * kappa)
        if self.fixed_w is None:
            gw = np.einsum("sn,snt->st", d, kappa - kbar[:, :, None]) * w
            gu += gw[:, :-1]
        return lp, grad

    def kernel_args(self):
        """Arguments for the compiled kernels in :mod:`safety_risk._kernels`."""
        S, n, T = self.shape
        c = self._cache()
        f = np.ascontiguousarray
        wfix = f(self.fixed_w) if self.fixed_w is not None else np.zeros((S, T))
        bfix = f(self.fixed_beta) if self.fixed_beta is not None else np.zeros((S, n))
        kfix = f(self.fixed_kappa) if self.fixed_kappa is not None else np.zeros((S, n, T))
        binfix = c.get("fixed_binom", np.zeros(S))
        return (n, T, f(self.xi, dtype=float), f(c["xi_sum"][:, 0]), f(self.gamma_k, dtype=float),
                f(c["inv_theta"]), f(c["a"]), f(c["b"]), f(c["ab"]), f(self.n_e, dtype=float),
                f(self.has_e, dtype=float), self.fixed_w is not None, self.fixed_beta is not None,
                self.fixed_kappa is not None, wfix, bfix, kfix, binfix)

    def fast_logp_grad(self, q):
        """Compiled equivalent of :meth:`logp_grad`."""
        return lp_grad_batch(np.ascontiguousarray(q, dtype=float), *self.kernel_args())

    def _cache(self):
        c = self.__dict__.get("_c")
        if c is None:
            neg, tot = self.n_neg, self.n_total
            a = self.beta_a + neg
            b = self.beta_b + tot - neg
            c = {"a": a, "b": b, "ab": a + b, "xi_sum": self.xi.sum(axis=1, keepdims=True),
                 "inv_theta": 1.0 / self.gamma_theta}
            if self.fixed_kappa is not None:
                k = self.fixed_kappa
                c["fixed_binom"] = (xlogy(neg, k) + xlogy(tot - neg, 1 - k)).sum(axis=(1, 2))
            self.__dict__["_c"] = c
        return c


# -- HMC --------------------------------------------------------------------

@dataclass
class ChainResult:
    draws: np.ndarray         # (n_kept, S, D)
    accept_rate: np.ndarray   # (S,) mean acceptance probability after warmup
    step_size: np.ndarray     # (S,)
    inv_metric: np.ndarray    # (S, D)


class _DualAveraging:
    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10 * eps0)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.hbar = np.zeros_like(eps0)
        self.log_eps = np.log(eps0)
        self.log_eps_bar = np.zeros_like(eps0)
        self.m = 0

    def update(self, accept):
        self.m += 1
        eta = 1.0 / (self.m + self.t0)
        self.hbar = (1 - eta) * self.hbar + eta * (self.target - accept)
        self.log_eps = self.mu - np.sqrt(self.m) / self.gamma * self.hbar
        wt = self.m ** (-self.kappa)
        self.log_eps_bar = wt * self.log_eps + (1 - wt) * self.log_eps_bar
        return np.exp(self.log_eps)

    @property
    def final(self):
        return np.exp(self.log_eps_bar)


def run_hmc(problem: CountProblem, rngs: Sequence[np.random.Generator], n_warmup: int,
            n_kept: int, n_leapfrog: int = 8, target_accept: float = 0.8,
            init: Optional[np.ndarray] = None) -> ChainResult:
    """Run one HMC chain per problem.

    Warmup adapts the step size by dual averaging.  The diagonal metric starts
    at the prior variances of the unconstrained coordinates and is re-estimated
    once from the middle part of warmup, after which dual averaging restarts.
    """
    S = problem.shape[0]
    D = problem.dim
    if len(rngs) != S:
        raise ValueError("need one random generator per problem")
    mask = problem.free_mask().astype(float)
    n_iter = n_warmup + n_kept

    # all randomness is drawn up front, per problem, from its own stream
    mom = np.empty((n_iter, S, D))
    unif = np.empty((n_iter, S))
    jitter = np.empty((n_iter, S))
    steps = np.empty((n_iter, S), dtype=np.int64)
    lo, hi = max(1, n_leapfrog // 2), n_leapfrog + n_leapfrog // 2
    for s, rng in enumerate(rngs):
        mom[:, s, :] = rng.standard_normal((n_iter, D))
        unif[:, s] = rng.random(n_iter)
        jitter[:, s] = rng.uniform(0.9, 1.1, n_iter)
        steps[:, s] = rng.integers(lo, hi + 1, n_iter)

    prior_mean, prior_var = problem.prior_moments()
    q = prior_mean.copy() if init is None else np.array(init, dtype=float)
    inv_metric = np.clip(prior_var, 1e-10, 1e4)
    inv_metric0 = inv_metric
    args = problem.kernel_args()
    lp, grad = lp_grad_batch(q, *args)

    eps0 = np.full(S, 0.5 / max(1.0, mask.sum()) ** 0.25)
    da = _DualAveraging(eps0, target_accept)
    eps = eps0.copy()
    buf_end = int(0.15 * n_warmup)
    slow_end = int(0.75 * n_warmup)
    window = []

    kept = np.empty((n_kept, S, D))
    accept_sum = np.zeros(S)
    if mask.sum() == 0:
        kept[:] = q
        return ChainResult(kept, np.ones(S), eps, inv_metric)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for it in range(n_iter):
            warm = it < n_warmup
            h = eps if warm else eps * jitter[it]
            p = mom[it] / np.sqrt(inv_metric) * mask
            h0 = -lp + 0.5 * (inv_metric * p * p).sum(axis=1)
            q1, g1, l1, kin = trajectories(q, grad, p, h, inv_metric, mask, steps[it], *args)
            h1 = -l1 + kin
            acc = np.exp(np.minimum(0.0, h0 - h1))
            acc = np.where(np.isfinite(acc), acc, 0.0)
            take = unif[it] < acc
            q = np.where(take[:, None], q1, q)
            lp = np.where(take, l1, lp)
            grad = np.where(take[:, None], g1, grad)

            if warm:
                eps = da.update(acc)
                if buf_end <= it < slow_end:
                    window.append(q)
                if it == slow_end - 1 and len(window) > 10:
                    w = np.asarray(window)
                    nw = w.shape[0]
                    var = w.var(axis=0)
                    # shrink towards the prior-based metric
                    inv_metric = (nw / (nw + 5.0)) * var + (5.0 / (nw + 5.0)) * inv_metric0
                    inv_metric = np.where(mask > 0, np.clip(inv_metric, 1e-10, 1e4), 1.0)
                    da = _DualAveraging(eps, target_accept)
                    window = []
                if it == n_warmup - 1:
                    eps = da.final
            else:
                kept[it - n_warmup] = q
                accept_sum += acc
    return ChainResult(kept, accept_sum / max(n_kept, 1), eps, inv_metric)


def effective_sample_size(x) -> np.ndarray:
    """ESS of a chain along axis 0 (Geyer's initial monotone sequence)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=nfft, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=nfft, axis=0)[:n] / n
    var = acov[0]
    rho = np.where(var > 0, acov / np.where(var > 0, var, 1.0), 0.0)
    npairs = n // 2
    pairs = rho[: 2 * npairs].reshape((npairs, 2) + rho.shape[1:]).sum(axis=1)
    # truncate at the first non-positive pair, then enforce monotonicity
    positive = np.cumprod(pairs > 0, axis=0).astype(bool)
    pairs = np.where(positive, pairs, 0.0)
    pairs = np.minimum.accumulate(np.where(positive, pairs, np.inf), axis=0)
    pairs = np.where(positive, pairs, 0.0)
    tau = -1.0 + 2.0 * pairs.sum(axis=0)
    tau = np.maximum(tau, 1.0 / np.log10(max(n, 10)))
    return n / tau


def mc_standard_error(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.std(axis=0, ddof=1) / np.sqrt(effective_sample_size(x))
