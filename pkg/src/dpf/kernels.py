"""Compiled per-block L-BFGS for the Gaussian/Poisson block objective.

Same algorithm as :func:`dpf.optimize.lbfgs_batch` (two-loop recursion,
Armijo backtracking, curvature-guarded memory updates), specialized to the
closed-form block objective so a whole family of blocks is solved without
Python overhead.  Functions release the GIL; rows are independent, so
splitting a family across threads does not change any result.
"""

from __future__ import annotations

import math

import numba
import numpy as np

_OPTS = dict(cache=True, nogil=True)


@numba.njit(**_OPTS)
def neg_block_row(x, prev, nxt, has_next, n_var_terms, prec, coef, weight, grad):
    """Negated block objective of one row; writes the gradient into ``grad``."""
    K = coef.shape[0]
    f = 0.0
    for k in range(K):
        mean = x[k]
        log_sd = x[K + k]
        var = math.exp(2.0 * log_sd)
        rate = math.exp(mean + 0.5 * var) * weight[k]
        d_prev = mean - prev[k]
        d_next = (nxt[k] - mean) * has_next
        f += (0.5 * prec * (d_prev * d_prev + d_next * (nxt[k] - mean) + n_var_terms * var)
              - coef[k] * mean + rate - log_sd)
        grad[k] = prec * d_prev - prec * d_next - coef[k] + rate
        grad[K + k] = prec * n_var_terms * var + rate * var - 1.0
    return f


@numba.njit(**_OPTS)
def _all_finite(v):
    for i in range(v.shape[0]):
        if not math.isfinite(v[i]):
            return False
    return True


@numba.njit(**_OPTS)
def _max_abs(v):
    m = 0.0
    for i in range(v.shape[0]):
        a = abs(v[i])
        if a > m:
            m = a
    return m


@numba.njit(**_OPTS)
def _lbfgs_row(x, prev, nxt, has_next, nv, prec, coef, weight, max_iters, memory,
               c1, max_backtracks, gtol, ftol, S, Y, rho, alpha, g, gn, xn, q, d):
    """Minimize one block in place. Returns False if the start is not finite."""
    n = x.shape[0]
    f = neg_block_row(x, prev, nxt, has_next, nv, prec, coef, weight, g)
    if not (math.isfinite(f) and _all_finite(g)):
        return False
    if _max_abs(g) <= gtol:
        return True
    gamma = 1.0
    for i in range(memory):
        rho[i] = 0.0
    for it in range(max_iters):
        nslots = min(it, memory)
        for i in range(n):
            q[i] = g[i]
        for j in range(nslots):
            s = (it - 1 - j) % memory
            a = 0.0
            for i in range(n):
                a += S[s, i] * q[i]
            a *= rho[s]
            alpha[j] = a
            for i in range(n):
                q[i] -= a * Y[s, i]
        for i in range(n):
            q[i] *= gamma
        for j in range(nslots - 1, -1, -1):
            s = (it - 1 - j) % memory
            b = 0.0
            for i in range(n):
                b += Y[s, i] * q[i]
            b *= rho[s]
            for i in range(n):
                q[i] += S[s, i] * (alpha[j] - b)
        slope = 0.0
        for i in range(n):
            d[i] = -q[i]
            slope += d[i] * g[i]
        if not slope < 0.0:
            slope = 0.0
            for i in range(n):
                d[i] = -g[i]
                slope -= g[i] * g[i]

        step = 1.0
        accepted = False
        fn = f
        for _ in range(max_backtracks):
            for i in range(n):
                xn[i] = x[i] + step * d[i]
            fn = neg_block_row(xn, prev, nxt, has_next, nv, prec, coef, weight, gn)
            if math.isfinite(fn) and _all_finite(gn) and fn <= f + c1 * step * slope:
                accepted = True
                break
            step *= 0.5

        slot = it % memory
        rho[slot] = 0.0
        if not accepted:
            return True
        sy = 0.0
        yy = 0.0
        ss = 0.0
        for i in range(n):
            si = xn[i] - x[i]
            yi = gn[i] - g[i]
            S[slot, i] = si
            Y[slot, i] = yi
            sy += si * yi
            yy += yi * yi
            ss += si * si
        if sy > 1e-12 * math.sqrt(ss * yy):
            rho[slot] = 1.0 / sy
            gamma = sy / yy
        decrease = f - fn
        for i in range(n):
            x[i] = xn[i]
            g[i] = gn[i]
        f = fn
        if _max_abs(g) <= gtol or not decrease > ftol * max(1.0, abs(fn)):
            return True
    return True


@numba.njit(**_OPTS)
def solve_blocks(X, prev, nxt, has_next, n_var_terms, prec, coef, weight,
                 max_iters, memory, c1, max_backtracks, gtol, ftol):
    """Solve every row of ``X`` in place; returns the number of rows whose
    starting point was not finite (those rows are left untouched)."""
    B, n = X.shape
    S = np.zeros((memory, n))
    Y = np.zeros((memory, n))
    rho = np.zeros(memory)
    alpha = np.zeros(memory)
    g = np.zeros(n)
    gn = np.zeros(n)
    xn = np.zeros(n)
    q = np.zeros(n)
    d = np.zeros(n)
    bad = 0
    for b in range(B):
        ok = _lbfgs_row(X[b], prev[b], nxt[b], has_next, n_var_terms, prec, coef[b], weight[b],
                        max_iters, memory, c1, max_backtracks, gtol, ftol,
                        S, Y, rho, alpha, g, gn, xn, q, d)
        if not ok:
            bad += 1
    return bad
