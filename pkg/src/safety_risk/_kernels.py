"""Compiled leapfrog kernel for :mod:`safety_risk.sampler`.

Computes the same density and gradient as ``CountProblem.logp_grad``, one
problem at a time, which removes NumPy's per-call overhead on the small arrays
involved.  The two implementations are cross-checked in the test suite.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, error_model="numpy")
def _lp_grad(s, q, g, need_lp, n, T, xi, xi_sum, gk, inv_th, a, b, ab, ne, he,
             fw, fb, fk, wfix, bfix, kfix, binfix, w, kap):
    lp = 0.0
    if fw:
        for t in range(T):
            w[t] = wfix[s, t]
        for t in range(T - 1):
            g[t] = 0.0
    else:
        mx = 0.0
        for t in range(T - 1):
            if q[t] > mx:
                mx = q[t]
        tot = 0.0
        for t in range(T):
            u = q[t] if t < T - 1 else 0.0
            w[t] = math.exp(u - mx)
            tot += w[t]
        lt = math.log(tot)
        for t in range(T):
            if need_lp:
                u = q[t] if t < T - 1 else 0.0
                lp += xi[s, t] * (u - mx - lt)
            w[t] /= tot
        for t in range(T - 1):
            g[t] = xi[s, t] - w[t] * xi_sum[s]
    ob = T - 1
    oz = T - 1 + n
    for i in range(n):
        if fb:
            beta = bfix[s, i]
            g[ob + i] = 0.0
        else:
            lb = q[ob + i]
            beta = math.exp(lb)
            if need_lp:
                lp += gk[s, i] * lb - beta * inv_th[s, i]
            g[ob + i] = gk[s, i] - beta * inv_th[s, i]
        kbar = 0.0
        for t in range(T):
            j = oz + i * T + t
            if fk:
                k = kfix[s, i, t]
                g[j] = 0.0
            else:
                z = q[j]
                if need_lp:
                    soft = math.log1p(math.exp(-abs(z)))
                    lk = min(z, 0.0) - soft
                    k = math.exp(lk)
                    lp += a[s, i, t] * lk + b[s, i, t] * (lk - z)
                else:
                    k = 1.0 / (1.0 + math.exp(-z))
                g[j] = a[s, i, t] - ab[s, i, t] * k
            kap[t] = k
            kbar += w[t] * k
        if he[s, i] > 0:
            rate = kbar * beta
            y = ne[s, i]
            if need_lp:
                lp -= rate
                if y > 0:
                    lp += y * math.log(rate)
            if not fb:
                g[ob + i] += y - rate
            d = y / kbar - beta
            if not fk:
                for t in range(T):
                    g[oz + i * T + t] += d * w[t] * kap[t] * (1.0 - kap[t])
            if not fw:
                for t in range(T - 1):
                    g[t] += d * w[t] * (kap[t] - kbar)
    if fk and need_lp:
        lp += binfix[s]
    return lp


@njit(cache=True, error_model="numpy")
def lp_grad_batch(q, n, T, xi, xi_sum, gk, inv_th, a, b, ab, ne, he,
                  fw, fb, fk, wfix, bfix, kfix, binfix):
    S, D = q.shape
    lp = np.empty(S)
    g = np.empty((S, D))
    w = np.empty(T)
    kap = np.empty(T)
    for s in range(S):
        lp[s] = _lp_grad(s, q[s], g[s], True, n, T, xi, xi_sum, gk, inv_th, a, b, ab, ne, he,
                         fw, fb, fk, wfix, bfix, kfix, binfix, w, kap)
    return lp, g


@njit(cache=True, error_model="numpy")
def trajectories(q, grad, mom, eps, inv_metric, mask, n_steps, n, T, xi, xi_sum, gk,
                 inv_th, a, b, ab, ne, he, fw, fb, fk, wfix, bfix, kfix, binfix):
    """Leapfrog every problem's trajectory; returns end point, gradient, density, kinetic energy.

    ``n_steps[s]`` is the number of leapfrog steps for problem ``s``.
    """
    S, D = q.shape
    q1 = q.copy()
    g1 = grad.copy()
    lp1 = np.empty(S)
    kin = np.empty(S)
    p = np.empty(D)
    w = np.empty(T)
    kap = np.empty(T)
    for s in range(S):
        h = eps[s]
        qs = q1[s]
        gs = g1[s]
        for d in range(D):
            p[d] = mom[s, d] + 0.5 * h * gs[d] * mask[d]
        lp = 0.0
        n_leapfrog = n_steps[s]
        for step in range(n_leapfrog):
            for d in range(D):
                qs[d] += h * inv_metric[s, d] * p[d]
            last = step == n_leapfrog - 1
            lp = _lp_grad(s, qs, gs, last, n, T, xi, xi_sum, gk, inv_th, a, b, ab, ne, he,
                          fw, fb, fk, wfix, bfix, kfix, binfix, w, kap)
            scale = 0.5 * h if last else h
            for d in range(D):
                p[d] += scale * gs[d] * mask[d]
        e = 0.0
        for d in range(D):
            e += inv_metric[s, d] * p[d] * p[d]
        lp1[s] = lp
        kin[s] = 0.5 * e
    return q1, g1, lp1, kin


@njit(cache=True)
def _alloc_eval(L, v, eps, k, m, bound_share, r, gr, gv):
    n = L.shape[0]
    mx = v[0]
    for i in range(1, n):
        if v[i] > mx:
            mx = v[i]
    tot = 0.0
    for i in range(n):
        r[i] = math.exp(v[i] - mx)
        tot += r[i]
    f = 0.0
    dot = 0.0
    for i in range(n):
        sm = r[i] / tot
        r[i] = sm
        x = eps + (1.0 - n * eps) * sm
        h = 1.0 / (1.0 + math.exp(-k * (x - m)))
        f += L[i] * (1.0 - h)
        gr[i] = -L[i] * k * h * (1.0 - h)
        dot += sm * gr[i]
    for i in range(n):
        gv[i] = (1.0 - n * eps) * r[i] * (gr[i] - dot)
    # KKT residual of the simplex problem in the proportions
    lam = 0.0
    nfree = 0
    thr = max(eps, bound_share)
    for i in range(n):
        if r[i] > thr:
            lam += gr[i]
            nfree += 1
    if nfree > 0:
        lam /= nfree
    res = 0.0
    for i in range(n):
        d = gr[i] - lam
        if r[i] <= thr and d > 0.0:
            d = 0.0
        res += d * d
    return f, math.sqrt(res)


@njit(cache=True)
def _descend(L, v, eps, k, m, bound_share, max_iter, tol, r, gr, g, gn, cand):
    f, res = _alloc_eval(L, v, eps, k, m, bound_share, r, gr, g)
    n = L.shape[0]
    step = 1.0
    it = 0
    while res >= tol and it < max_iter:
        gg = 0.0
        for i in range(n):
            gg += g[i] * g[i]
        t = step
        ok = False
        for _ in range(60):
            for i in range(n):
                cand[i] = v[i] - t * g[i]
            fc, rc = _alloc_eval(L, cand, eps, k, m, bound_share, r, gr, gn)
            if fc <= f - 1e-4 * t * gg:
                ok = True
                break
            t *= 0.5
        if not ok:
            break
        sy = 0.0
        ss = 0.0
        for i in range(n):
            ds = cand[i] - v[i]
            sy += ds * (gn[i] - g[i])
            ss += ds * ds
            v[i] = cand[i]
            g[i] = gn[i]
        step = ss / sy if sy > 1e-300 else 2.0 * t
        step = min(max(step, 1e-6), 1e6)
        f = fc
        res = rc
        it += 1
    return f, res, it


@njit(cache=True)
def _snap_bound(L, v, eps, k, m, bound_share, r, gr, g):
    """Send shares that sit at the floor exactly onto it; True if any moved."""
    _alloc_eval(L, v, eps, k, m, bound_share, r, gr, g)
    n = L.shape[0]
    thr = max(eps, bound_share)
    lam = 0.0
    nfree = 0
    mx = v[0]
    for i in range(n):
        if r[i] > thr:
            lam += gr[i]
            nfree += 1
        if v[i] > mx:
            mx = v[i]
    if nfree == 0:
        return False
    lam /= nfree
    moved = False
    for i in range(n):
        if r[i] <= thr and gr[i] - lam > 0.0 and v[i] > mx - 60.0:
            v[i] = mx - 60.0
            moved = True
    return moved


@njit(cache=True)
def _rearrange(L, v):
    """Give larger logits to larger losses when the order is violated.

    Swapping the shares of a larger and a smaller loss into loss order always
    lowers the objective, so this only ever improves an iterate.
    """
    n = L.shape[0]
    bad = False
    for i in range(n):
        for j in range(n):
            if L[i] > L[j] and v[i] < v[j] - 1e-9:
                bad = True
    if not bad:
        return False
    order = np.argsort(L, kind="mergesort")
    vs = np.sort(v)
    # equal losses share the mean of their slots, keeping ties symmetric
    q = 0
    while q < n:
        e = q
        while e + 1 < n and L[order[e + 1]] == L[order[q]]:
            e += 1
        mean = 0.0
        for u in range(q, e + 1):
            mean += vs[u]
        mean /= e - q + 1
        for u in range(q, e + 1):
            v[order[u]] = mean
        q = e + 1
    return True


@njit(cache=True)
def optimize_simplex(L, v0, eps, k, m, bound_share, max_iter, tol):
    """Gradient descent in softmax logits with Armijo backtracking and
    Barzilai-Borwein steps, one problem per row of ``L``.

    Once converged, shares resting at the floor are moved onto it exactly, and
    shares out of loss order are rearranged; either way the descent resumes
    with the remaining iterations.

    Returns logits, objective, iterations, final KKT residual.
    """
    S, n = L.shape
    V = v0.copy()
    F = np.empty(S)
    IT = np.zeros(S, dtype=np.int64)
    RES = np.empty(S)
    r = np.empty(n)
    gr = np.empty(n)
    g = np.empty(n)
    gn = np.empty(n)
    cand = np.empty(n)
    for s in range(S):
        v = V[s]
        f, res, it = _descend(L[s], v, eps, k, m, bound_share, max_iter, tol, r, gr, g, gn, cand)
        for _ in range(5):
            changed = False
            if res < tol and _snap_bound(L[s], v, eps, k, m, bound_share, r, gr, g):
                changed = True
            if _rearrange(L[s], v):
                changed = True
            if not changed:
                break
            f, res, more = _descend(L[s], v, eps, k, m, bound_share, max_iter - it, tol,
                                    r, gr, g, gn, cand)
            it += more
        F[s] = f
        IT[s] = it
        RES[s] = res
    return V, F, IT, RES
