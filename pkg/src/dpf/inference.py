"""Mean-field variational inference for dynamic Poisson factorization.

Every latent coordinate gets an independent Gaussian ``q`` parameterized by
a mean and a log standard deviation.  The log of the Poisson rate of each
nonzero cell is lower-bounded with per-observation simplex weights ``phi``;
zero cells enter only through ``E_q[rate]``, which factorizes as

    sum_{n,m} E_q[rate(n, m, t)] = sum_k A[t, k] * B[t, k]

with ``A`` the summed user log-normal moments and ``B`` the item ones.  That
identity keeps one sweep at O(T (R + N K + M K)).

A sweep updates, for each step in order, all user blocks, all item blocks
and then the ``phi`` of that step's observations; afterwards the global user
factors and then the global item factors.  Each block is a 2K-dimensional
L-BFGS problem over (means, log-stddevs) of one entity at one step.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln, xlogy

from .data import InteractionTensor
from .model import Hyperparams, LatentState
from .kernels import solve_blocks

logger = logging.getLogger(__name__)

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)


class DivergenceError(FloatingPointError):
    """The ELBO or a block update became non-finite."""


@dataclass
class VariationalState:
    """Gaussian variational parameters.

    Dynamic arrays are ``(entities, T, K)``, global arrays ``(entities, K)``.
    Standard deviations are stored as their logarithm.
    """

    mu_u: np.ndarray
    log_sd_u: np.ndarray
    mu_v: np.ndarray
    log_sd_v: np.ndarray
    mu_ubar: np.ndarray
    log_sd_ubar: np.ndarray
    mu_vbar: np.ndarray
    log_sd_vbar: np.ndarray

    ARRAYS = ("mu_u", "log_sd_u", "mu_v", "log_sd_v",
              "mu_ubar", "log_sd_ubar", "mu_vbar", "log_sd_vbar")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        N, T, K = self.mu_u.shape
        return N, self.mu_v.shape[0], T, K

    def copy(self) -> "VariationalState":
        return VariationalState(*(getattr(self, a).copy() for a in self.ARRAYS))

    def swapped(self) -> "VariationalState":
        """The same posterior with user and item roles exchanged."""
        return VariationalState(self.mu_v, self.log_sd_v, self.mu_u, self.log_sd_u,
                                self.mu_vbar, self.log_sd_vbar, self.mu_ubar, self.log_sd_ubar)

    def is_finite(self) -> bool:
        return all(np.isfinite(getattr(self, a)).all() for a in self.ARRAYS)

    # log E_q[exp(x)] = mean + var / 2 for each factor
    def user_log_moment(self) -> np.ndarray:
        return self.mu_u + 0.5 * np.exp(2 * self.log_sd_u)

    def item_log_moment(self) -> np.ndarray:
        return self.mu_v + 0.5 * np.exp(2 * self.log_sd_v)

    def ubar_log_moment(self) -> np.ndarray:
        return self.mu_ubar + 0.5 * np.exp(2 * self.log_sd_ubar)

    def vbar_log_moment(self) -> np.ndarray:
        return self.mu_vbar + 0.5 * np.exp(2 * self.log_sd_vbar)

    def user_expression(self) -> np.ndarray:
        """Posterior mean of ``u[n,t,k] + ubar[n,k]``."""
        return self.mu_u + self.mu_ubar[:, None, :]

    def item_expression(self) -> np.ndarray:
        return self.mu_v + self.mu_vbar[:, None, :]

    @classmethod
    def from_latent(cls, latent: LatentState, sd: float = 1e-8) -> "VariationalState":
        """A near-point-mass posterior centred on ``latent``."""
        ls = math.log(sd)
        return cls(latent.u.copy(), np.full(latent.u.shape, ls),
                   latent.v.copy(), np.full(latent.v.shape, ls),
                   latent.ubar.copy(), np.full(latent.ubar.shape, ls),
                   latent.vbar.copy(), np.full(latent.vbar.shape, ls))


@dataclass(frozen=True)
class FitConfig:
    max_sweeps: int = 500
    tol: float = 1e-6
    min_sweeps: int = 1
    inner_iters: int = 15
    memory: int = 5
    init_scale: float = 0.01
    init_sd: float = 0.1
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.threads < 1 or self.inner_iters < 1:
            raise ValueError("threads and inner_iters must be >= 1")
        if self.init_sd <= 0 or self.init_scale < 0:
            raise ValueError("init_sd must be positive and init_scale nonnegative")


def init_variational(hp: Hyperparams, N: int, M: int, T: int, seed: int = 0,
                     scale: float = 0.01, sd: float = 0.1) -> VariationalState:
    """Small uniform random means, identical across time steps."""
    if min(N, M, T) < 1:
        raise ValueError("dimensions must be positive")
    K = hp.K
    rng = np.random.default_rng(seed)
    base_u = rng.uniform(-scale, scale, size=(N, K))
    base_v = rng.uniform(-scale, scale, size=(M, K))
    ubar = rng.uniform(-scale, scale, size=(N, K))
    vbar = rng.uniform(-scale, scale, size=(M, K))
    ls = math.log(sd)
    return VariationalState(
        np.repeat(base_u[:, None, :], T, axis=1), np.full((N, T, K), ls),
        np.repeat(base_v[:, None, :], T, axis=1), np.full((M, T, K), ls),
        ubar, np.full((N, K), ls), vbar, np.full((M, K), ls),
    )


def update_phi(state: VariationalState, tensor: InteractionTensor,
               entries: slice | np.ndarray | None = None) -> np.ndarray:
    """Auxiliary weights: softmax over k of the summed variational means."""
    sel = slice(None) if entries is None else entries
    n, m, t = tensor.users[sel], tensor.items[sel], tensor.steps[sel]
    logits = (state.mu_u[n, t] + state.mu_ubar[n] + state.mu_v[m, t] + state.mu_vbar[m])
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w


def expected_sums(state: VariationalState) -> tuple[np.ndarray, np.ndarray]:
    """``A[t,k]`` (users) and ``B[t,k]`` (items): summed expected exp-factors."""
    eu = np.exp(state.user_log_moment() + state.ubar_log_moment()[:, None, :])
    ev = np.exp(state.item_log_moment() + state.vbar_log_moment()[:, None, :])
    return eu.sum(axis=0), ev.sum(axis=0)


def _gauss_cross_entropy(mean, log_sd, prior_mean, prior_sd) -> float:
    """sum E_q[log N(x; prior_mean, prior_sd^2)] over independent Gaussians."""
    var = np.exp(2 * log_sd)
    return float(np.sum(-((mean - prior_mean) ** 2 + var) / (2 * prior_sd ** 2))
                 - mean.size * (math.log(prior_sd) + _HALF_LOG_2PI))


def _chain_cross_entropy(mean, log_sd, mu0, sigma) -> float:
    first = _gauss_cross_entropy(mean[:, 0], log_sd[:, 0], mu0, sigma)
    if mean.shape[1] == 1:
        return first
    var = np.exp(2 * log_sd)
    d = mean[:, 1:] - mean[:, :-1]
    trans = np.sum(-(d ** 2 + var[:, 1:] + var[:, :-1]) / (2 * sigma ** 2))
    return first + float(trans) - d.size * (math.log(sigma) + _HALF_LOG_2PI)


def _entropy(*log_sds) -> float:
    return float(sum(np.sum(ls) + ls.size * _HALF_LOG_2PIE for ls in log_sds))


def elbo_terms(state: VariationalState, phi: np.ndarray, tensor: InteractionTensor,
               hp: Hyperparams) -> dict[str, float]:
    """The individual pieces of the auxiliary-variable lower bound."""
    n, m, t, y = tensor.users, tensor.items, tensor.steps, tensor.counts
    means = state.mu_u[n, t] + state.mu_ubar[n] + state.mu_v[m, t] + state.mu_vbar[m]
    linear = y * np.sum(phi * means - xlogy(phi, phi), axis=1)
    A, B = expected_sums(state)
    s = state
    return {
        "prior_ubar": _gauss_cross_entropy(s.mu_ubar, s.log_sd_ubar, hp.mu_ubar, hp.sigma_ubar),
        "prior_vbar": _gauss_cross_entropy(s.mu_vbar, s.log_sd_vbar, hp.mu_vbar, hp.sigma_vbar),
        "chain_u": _chain_cross_entropy(s.mu_u, s.log_sd_u, hp.mu_u, hp.sigma_u),
        "chain_v": _chain_cross_entropy(s.mu_v, s.log_sd_v, hp.mu_v, hp.sigma_v),
        "poisson_linear": float(np.sum(linear)),
        "poisson_rate": -float(np.sum(A * B)),
        "log_factorial": -float(np.sum(gammaln(y + 1.0))),
        "entropy": _entropy(s.log_sd_u, s.log_sd_v, s.log_sd_ubar, s.log_sd_vbar),
    }


def elbo(state: VariationalState, phi: np.ndarray, tensor: InteractionTensor,
         hp: Hyperparams) -> float:
    value = math.fsum(elbo_terms(state, phi, tensor, hp).values())
    if not math.isfinite(value):
        raise DivergenceError("ELBO is not finite")
    return value


# --------------------------------------------------------------------------
# block objectives

def _block(x, prev, nxt, has_next, n_var_terms, sigma, coef, weight):
    """Value and gradient of the ELBO terms owned by a batch of blocks.

    Rows of ``x`` are ``[means (K), log-stddevs (K)]``.  ``prev`` is the
    previous chain mean (or prior mean), ``nxt`` the next chain mean when
    ``has_next``; ``n_var_terms`` counts the Gaussian terms containing this
    block's variance; ``coef`` is sum(y * phi) over the block's observations
    and ``weight`` multiplies the block's log-normal moment in -E_q[rate].
    Terms that do not depend on the block are left out.
    """
    K = x.shape[1] // 2
    mean, log_sd = x[:, :K], x[:, K:]
    var = np.exp(2 * log_sd)
    prec = 1.0 / sigma ** 2
    rate = np.exp(mean + 0.5 * var) * weight
    d_prev = mean - prev
    d_next = (nxt - mean) * has_next
    value = (-0.5 * prec * (d_prev ** 2 + d_next * (nxt - mean) + n_var_terms * var)
             + coef * mean - rate + log_sd)
    grad_mean = -prec * d_prev + prec * d_next + coef - rate
    grad_log_sd = -prec * n_var_terms * var - rate * var + 1.0
    return value.sum(axis=1), np.hstack([grad_mean, grad_log_sd])


def _neg_block(*args):
    f, g = _block(*args)
    return -f, -g


def _dynamic_inputs(mu, t, mu0):
    """prev/next means, has_next flag and variance-term count for step t."""
    T = mu.shape[1]
    prev = mu[:, t - 1] if t > 0 else mu0
    if t < T - 1:
        return prev, mu[:, t + 1], 1.0, 2.0
    return prev, 0.0, 0.0, 1.0


def _coef(indices, steps, counts, phi, entity, t=None):
    mask = indices == entity
    if t is not None:
        mask &= steps == t
    return (counts[mask, None] * phi[mask]).sum(axis=0)


def block_objective_user(x, n: int, t: int, state: VariationalState, phi: np.ndarray,
                         tensor: InteractionTensor, item_sums: np.ndarray, hp: Hyperparams):
    """ELBO terms depending on ``(mu_u[n,t], log_sd_u[n,t])``; returns (value, grad)."""
    x = np.asarray(x, dtype=float)[None, :]
    prev, nxt, has_next, nv = _dynamic_inputs(state.mu_u[n:n + 1], t, hp.mu_u)
    coef = _coef(tensor.users, tensor.steps, tensor.counts, phi, n, t)
    weight = np.exp(state.ubar_log_moment()[n]) * item_sums[t]
    f, g = _block(x, prev, nxt, has_next, nv, hp.sigma_u, coef, weight)
    return float(f[0]), g[0]


def block_objective_item(x, m: int, t: int, state: VariationalState, phi: np.ndarray,
                         tensor: InteractionTensor, user_sums: np.ndarray, hp: Hyperparams):
    """Mirror of :func:`block_objective_user` for ``(mu_v[m,t], log_sd_v[m,t])``."""
    x = np.asarray(x, dtype=float)[None, :]
    prev, nxt, has_next, nv = _dynamic_inputs(state.mu_v[m:m + 1], t, hp.mu_v)
    coef = _coef(tensor.items, tensor.steps, tensor.counts, phi, m, t)
    weight = np.exp(state.vbar_log_moment()[m]) * user_sums[t]
    f, g = _block(x, prev, nxt, has_next, nv, hp.sigma_v, coef, weight)
    return float(f[0]), g[0]


def block_objective_global(x, kind: str, index: int, state: VariationalState, phi: np.ndarray,
                           tensor: InteractionTensor, other_sums: np.ndarray, hp: Hyperparams):
    """Terms depending on a global factor block; ``kind`` is "user" or "item".

    ``other_sums`` is ``B`` for a user block and ``A`` for an item block.
    """
    x = np.asarray(x, dtype=float)[None, :]
    if kind == "user":
        moments = np.exp(state.user_log_moment()[index])
        coef = _coef(tensor.users, tensor.steps, tensor.counts, phi, index)
        mu0, sigma = hp.mu_ubar, hp.sigma_ubar
    elif kind == "item":
        moments = np.exp(state.item_log_moment()[index])
        coef = _coef(tensor.items, tensor.steps, tensor.counts, phi, index)
        mu0, sigma = hp.mu_vbar, hp.sigma_vbar
    else:
        raise ValueError(f"kind must be 'user' or 'item', not {kind!r}")
    weight = np.sum(moments * other_sums, axis=0)
    f, g = _block(x, mu0, 0.0, 0.0, 1.0, sigma, coef, weight)
    return float(f[0]), g[0]


# --------------------------------------------------------------------------
# fitting

@dataclass
class FitResult:
    state: VariationalState
    phi: np.ndarray
    elbo_trace: list[float]
    converged: bool
    timings: list[dict[str, float]] = field(default_factory=list)


class _Incidence:
    """Sparse (entity x observation) matrices with counts, per step and overall."""

    def __init__(self, index: np.ndarray, counts: np.ndarray, n: int, offsets: np.ndarray):
        R = len(counts)
        y = counts.astype(float)
        self.full = sp.csr_matrix((y, (index, np.arange(R))), shape=(n, R))
        self.per_step = []
        for a, b in zip(offsets[:-1], offsets[1:]):
            self.per_step.append(sp.csr_matrix(
                (y[a:b], (index[a:b], np.arange(b - a))), shape=(n, b - a)))


class _Fitter:
    def __init__(self, tensor: InteractionTensor, hp: Hyperparams, config: FitConfig,
                 state: VariationalState):
        self.tensor = tensor
        self.hp = hp
        self.config = config
        self.state = state
        self.offsets = tensor.step_offsets
        self.users = _Incidence(tensor.users, tensor.counts, tensor.n_users, self.offsets)
        self.items = _Incidence(tensor.items, tensor.counts, tensor.n_items, self.offsets)
        self.phi = update_phi(state, tensor)
        self.pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    # moments -------------------------------------------------------------
    def _item_weights_at(self, t):
        s = self.state
        return np.exp(s.item_log_moment()[:, t] + s.vbar_log_moment())

    def _user_weights_at(self, t):
        s = self.state
        return np.exp(s.user_log_moment()[:, t] + s.ubar_log_moment())

    # block families ---------------------------------------------------------
    def _solve(self, x, prev, nxt, has_next, n_var_terms, sigma, coef, weight, label):
        """Solve a family of independent blocks in place, split across threads."""
        cfg = self.config
        prec = 1.0 / sigma ** 2

        def run(lo, hi):
            return solve_blocks(x[lo:hi], prev[lo:hi], nxt[lo:hi], has_next, n_var_terms, prec,
                                coef[lo:hi], weight[lo:hi], cfg.inner_iters, cfg.memory,
                                1e-4, 40, 1e-10, 1e-13)

        B = len(x)
        if self.pool is None or B < 2:
            bad = run(0, B)
        else:
            bounds = np.linspace(0, B, min(cfg.threads, B) + 1).astype(int)
            bad = sum(self.pool.map(lambda ab: run(*ab), zip(bounds[:-1], bounds[1:])))
        if bad:
            raise DivergenceError(f"{bad} non-finite block objectives in {label}")

    def _update_dynamic(self, mu, log_sd, t, mu0, sigma, coef, weight, label):
        prev, nxt, has_next, nv = _dynamic_inputs(mu, t, mu0)
        shape = mu[:, t].shape
        prev = np.ascontiguousarray(np.broadcast_to(prev, shape), dtype=float)
        nxt = np.ascontiguousarray(np.broadcast_to(nxt, shape), dtype=float)
        x = np.hstack([mu[:, t], log_sd[:, t]])
        self._solve(x, prev, nxt, has_next, nv, sigma, np.ascontiguousarray(coef),
                    np.ascontiguousarray(weight), label)
        K = mu.shape[2]
        self._check(x, label)
        mu[:, t] = x[:, :K]
        log_sd[:, t] = x[:, K:]

    def _update_global(self, mu, log_sd, mu0, sigma, coef, weight, label):
        x = np.hstack([mu, log_sd])
        prev = np.full(mu.shape, float(mu0))
        self._solve(x, prev, np.zeros(mu.shape), 0.0, 1.0, sigma, np.ascontiguousarray(coef),
                    np.ascontiguousarray(weight), label)
        K = mu.shape[1]
        self._check(x, label)
        mu[:] = x[:, :K]
        log_sd[:] = x[:, K:]

    @staticmethod
    def _check(x, label):
        if not np.isfinite(x).all():
            raise DivergenceError(f"non-finite parameters after updating {label}")

    # one sweep -------------------------------------------------------------
    def sweep(self) -> dict[str, float]:
        s, hp, tensor = self.state, self.hp, self.tensor
        T = tensor.n_steps
        clock = {"user_blocks": 0.0, "item_blocks": 0.0, "global_blocks": 0.0,
                 "observations": 0.0}

        def tick(key, start):
            now = time.perf_counter()
            clock[key] += now - start
            return now

        now = time.perf_counter()
        self.phi = update_phi(s, tensor)
        now = tick("observations", now)
        for t in range(T):
            sl = slice(int(self.offsets[t]), int(self.offsets[t + 1]))
            phi_t = self.phi[sl]
            coef_u = self.users.per_step[t] @ phi_t
            coef_v = self.items.per_step[t] @ phi_t
            now = tick("observations", now)

            B_t = self._item_weights_at(t).sum(axis=0)
            weight = np.exp(s.ubar_log_moment()) * B_t
            self._update_dynamic(s.mu_u, s.log_sd_u, t, hp.mu_u, hp.sigma_u, coef_u, weight,
                                 f"user blocks at step {t}")
            now = tick("user_blocks", now)

            A_t = self._user_weights_at(t).sum(axis=0)
            weight = np.exp(s.vbar_log_moment()) * A_t
            self._update_dynamic(s.mu_v, s.log_sd_v, t, hp.mu_v, hp.sigma_v, coef_v, weight,
                                 f"item blocks at step {t}")
            now = tick("item_blocks", now)

            self.phi[sl] = update_phi(s, tensor, sl)
            now = tick("observations", now)

        coef_ubar = self.users.full @ self.phi
        coef_vbar = self.items.full @ self.phi
        now = tick("observations", now)

        eu = np.exp(s.user_log_moment())
        _, B = expected_sums(s)
        weight = np.einsum("ntk,tk->nk", eu, B)
        self._update_global(s.mu_ubar, s.log_sd_ubar, hp.mu_ubar, hp.sigma_ubar, coef_ubar,
                            weight, "global user blocks")
        A, _ = expected_sums(s)
        weight = np.einsum("mtk,tk->mk", np.exp(s.item_log_moment()), A)
        self._update_global(s.mu_vbar, s.log_sd_vbar, hp.mu_vbar, hp.sigma_vbar, coef_vbar,
                            weight, "global item blocks")
        tick("global_blocks", now)
        return clock


def fit(tensor: InteractionTensor, hp: Hyperparams, config: FitConfig = FitConfig(),
        init: VariationalState | None = None) -> FitResult:
    """Coordinate ascent on the ELBO until the relative change drops below
    ``config.tol`` (after at least ``min_sweeps``) or ``max_sweeps`` is hit."""
    if tensor.nnz == 0:
        raise ValueError("cannot fit an empty tensor")
    N, M, T = tensor.n_users, tensor.n_items, tensor.n_steps
    if init is None:
        state = init_variational(hp, N, M, T, config.seed, config.init_scale, config.init_sd)
    else:
        if init.shape != (N, M, T, hp.K):
            raise ValueError("initial state does not match tensor and K")
        state = init.copy()
    fitter = _Fitter(tensor, hp, config, state)
    trace: list[float] = []
    timings = []
    converged = False
    try:
        for sweep in range(config.max_sweeps):
            start = time.perf_counter()
            clock = fitter.sweep()
            t0 = time.perf_counter()
            value = elbo(state, fitter.phi, tensor, hp)
            clock["elbo"] = time.perf_counter() - t0
            clock["total"] = time.perf_counter() - start
            timings.append(clock)
            trace.append(value)
            logger.debug("sweep %d elbo %.6f (%.3fs)", sweep + 1, value, clock["total"])
            if len(trace) >= 2 and len(trace) >= config.min_sweeps:
                rel = abs(trace[-1] - trace[-2]) / max(abs(trace[-2]), 1e-300)
                if rel < config.tol:
                    converged = True
                    break
    except DivergenceError as exc:
        raise DivergenceError(f"sweep {len(trace) + 1}: {exc}") from None
    finally:
        fitter.close()
    return FitResult(state=state, phi=fitter.phi, elbo_trace=trace, converged=converged,
                     timings=timings)
