"""Limited-memory BFGS with backtracking (Armijo) line search.

The solver is written for a *batch* of independent problems of equal
dimension: row ``i`` of ``x`` is its own minimization with its own history,
step length and stopping state.  Batching only shares the numpy calls; no
information flows between rows, so the result for a row does not depend on
which other rows are in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

BatchObjective = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass
class BatchResult:
    x: np.ndarray
    fun: np.ndarray
    nit: int
    failed: np.ndarray  # rows whose last line search found no acceptable step


def _finite_rows(f: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.isfinite(f) & np.isfinite(g).all(axis=1)


def lbfgs_batch(fun: BatchObjective, x0: np.ndarray, max_iters: int = 15, memory: int = 5,
                c1: float = 1e-4, max_backtracks: int = 40, gtol: float = 1e-10,
                ftol: float = 0.0, callback: Callable | None = None) -> BatchResult:
    """Minimize ``B`` independent objectives simultaneously.

    ``fun(x, rows)`` evaluates the objectives of the batch rows ``rows`` at
    ``x`` (shape ``(len(rows), d)``) and returns values and gradients.
    A row stops when its gradient max-norm drops below ``gtol``, its
    relative decrease falls below ``ftol``, or its line search fails; the
    returned point of every row is never worse than its start.
    """
    x = np.array(x0, dtype=float, copy=True)
    B, d = x.shape
    rows = np.arange(B)
    with np.errstate(over="ignore", invalid="ignore"):
        f, g = fun(x, rows)
    f = np.array(f, dtype=float)
    g = np.array(g, dtype=float)
    if not _finite_rows(f, g).all():
        raise FloatingPointError("objective not finite at the starting point")

    S = np.zeros((memory, B, d))
    Y = np.zeros((memory, B, d))
    rho = np.zeros((memory, B))
    gamma = np.ones(B)
    failed = np.zeros(B, dtype=bool)
    active = rows[np.abs(g).max(axis=1) > gtol]
    nit = 0

    for it in range(max_iters):
        if len(active) == 0:
            break
        nit = it + 1
        slots = [(it - 1 - j) % memory for j in range(min(it, memory))]  # newest first

        q = g[active].copy()
        alphas = []
        for s in slots:
            a = rho[s, active] * np.einsum("ij,ij->i", S[s, active], q)
            q -= a[:, None] * Y[s, active]
            alphas.append(a)
        r = gamma[active, None] * q
        for s, a in zip(reversed(slots), reversed(alphas)):
            b = rho[s, active] * np.einsum("ij,ij->i", Y[s, active], r)
            r += S[s, active] * (a - b)[:, None]
        direction = -r
        slope = np.einsum("ij,ij->i", direction, g[active])
        uphill = ~(slope < 0)
        if uphill.any():
            direction[uphill] = -g[active][uphill]
            slope[uphill] = -np.einsum("ij,ij->i", g[active][uphill], g[active][uphill])

        # backtracking over the still-pending subset of rows
        step = np.ones(len(active))
        pending = np.arange(len(active))
        new_x = x[active].copy()
        new_f = f[active].copy()
        new_g = g[active].copy()
        accepted = np.zeros(len(active), dtype=bool)
        for _ in range(max_backtracks):
            if len(pending) == 0:
                break
            idx = active[pending]
            trial = x[idx] + step[pending, None] * direction[pending]
            with np.errstate(over="ignore", invalid="ignore"):
                ft, gt = fun(trial, idx)
            ok = _finite_rows(ft, gt) & (ft <= f[idx] + c1 * step[pending] * slope[pending])
            hit = pending[ok]
            new_x[hit] = trial[ok]
            new_f[hit] = ft[ok]
            new_g[hit] = gt[ok]
            accepted[hit] = True
            pending = pending[~ok]
            step[pending] *= 0.5

        slot = it % memory
        rho[slot] = 0.0
        moved = active[accepted]
        s_vec = new_x[accepted] - x[moved]
        y_vec = new_g[accepted] - g[moved]
        sy = np.einsum("ij,ij->i", s_vec, y_vec)
        yy = np.einsum("ij,ij->i", y_vec, y_vec)
        curv = sy > 1e-12 * np.sqrt(np.einsum("ij,ij->i", s_vec, s_vec) * yy)
        S[slot, moved] = s_vec
        Y[slot, moved] = y_vec
        rho[slot, moved[curv]] = 1.0 / sy[curv]
        gamma[moved[curv]] = sy[curv] / yy[curv]

        decrease = f[moved] - new_f[accepted]
        x[moved] = new_x[accepted]
        f[moved] = new_f[accepted]
        g[moved] = new_g[accepted]

        failed[active[~accepted]] = True
        still = accepted.copy()
        still[accepted] = (np.abs(new_g[accepted]).max(axis=1) > gtol) & (
            decrease > ftol * np.maximum(1.0, np.abs(new_f[accepted])))
        active = active[still]
        if callback is not None:
            callback(x, f)

    return BatchResult(x=x, fun=f, nit=nit, failed=failed)


def quasi_newton_minimize(objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
                          x0, max_iters: int = 100, memory: int = 5, gtol: float = 1e-10,
                          callback: Callable[[np.ndarray, float], None] | None = None
                          ) -> np.ndarray:
    """Minimize a single smooth function with L-BFGS.

    ``objective(x)`` returns ``(value, gradient)``; ``callback(x, value)``
    runs after every iteration with the current iterate.
    """
    x0 = np.asarray(x0, dtype=float).ravel()

    def batch_fun(X, rows):
        f, grad = objective(X[0])
        return np.array([f], dtype=float), np.asarray(grad, dtype=float)[None, :]

    hook = None if callback is None else (lambda X, F: callback(X[0].copy(), float(F[0])))
    return lbfgs_batch(batch_fun, x0[None, :], max_iters=max_iters, memory=memory,
                       gtol=gtol, callback=hook).x[0]
