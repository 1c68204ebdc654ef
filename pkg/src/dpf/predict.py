"""Posterior-mean click scores and per-user rankings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .inference import VariationalState
from .model import Hyperparams


@dataclass
class ScoredList:
    user: int
    step: int
    items: np.ndarray   # candidate item indices, best first
    scores: np.ndarray  # aligned with ``items``; nonincreasing

    def rank_of(self, item: int) -> int:
        """1-based rank of ``item``; raises KeyError if it was not a candidate."""
        pos = np.flatnonzero(self.items == item)
        if len(pos) == 0:
            raise KeyError(f"item {item} is not among the ranked candidates")
        return int(pos[0]) + 1


def _step_log_moments(mu, log_sd, t, sigma, extrapolate):
    """log E_q[exp(x_t)] for every entity at step ``t``.

    ``t`` equal to the number of fitted steps means one step ahead: the last
    mean is carried forward, and with ``extrapolate`` its variance grows by
    one random-walk step.
    """
    T = mu.shape[1]
    if 0 <= t < T:
        return mu[:, t] + 0.5 * np.exp(2 * log_sd[:, t])
    if t == T:
        var = np.exp(2 * log_sd[:, T - 1])
        if extrapolate:
            var = var + sigma ** 2
        return mu[:, T - 1] + 0.5 * var
    raise IndexError(f"step {t} outside fitted range [0, {T}]")


def user_factor_moments(state: VariationalState, hp: Hyperparams, t: int,
                        extrapolate: bool = True) -> np.ndarray:
    """``E_q[exp(u[n,t,k] + ubar[n,k])]`` as an ``(N, K)`` array."""
    return np.exp(_step_log_moments(state.mu_u, state.log_sd_u, t, hp.sigma_u, extrapolate)
                  + state.ubar_log_moment())


def item_factor_moments(state: VariationalState, hp: Hyperparams, t: int,
                        extrapolate: bool = True) -> np.ndarray:
    return np.exp(_step_log_moments(state.mu_v, state.log_sd_v, t, hp.sigma_v, extrapolate)
                  + state.vbar_log_moment())


def predict_score(state: VariationalState, hp: Hyperparams, n: int, m: int, t: int,
                  extrapolate: bool = True) -> float:
    """Posterior expected rate of cell (n, m, t)."""
    N, M, _, _ = state.shape
    if not (0 <= n < N and 0 <= m < M):
        raise IndexError(f"(n={n}, m={m}) outside ({N}, {M})")
    lu = _step_log_moments(state.mu_u[n:n + 1], state.log_sd_u[n:n + 1], t, hp.sigma_u,
                           extrapolate)[0]
    lv = _step_log_moments(state.mu_v[m:m + 1], state.log_sd_v[m:m + 1], t, hp.sigma_v,
                           extrapolate)[0]
    return float(np.exp(lu + state.ubar_log_moment()[n] + lv + state.vbar_log_moment()[m]).sum())


def score_matrix(state: VariationalState, hp: Hyperparams, t: int,
                 users: np.ndarray | None = None, extrapolate: bool = True) -> np.ndarray:
    """Scores of all items for the given users (default all) at step ``t``."""
    eu = user_factor_moments(state, hp, t, extrapolate)
    if users is not None:
        eu = eu[users]
    return eu @ item_factor_moments(state, hp, t, extrapolate).T


def log_score_matrix(state: VariationalState, hp: Hyperparams, t: int,
                     users: np.ndarray | None = None, extrapolate: bool = True) -> np.ndarray:
    """``log`` of :func:`score_matrix`, computed without overflow."""
    lu = (_step_log_moments(state.mu_u, state.log_sd_u, t, hp.sigma_u, extrapolate)
          + state.ubar_log_moment())
    if users is not None:
        lu = lu[users]
    lv = (_step_log_moments(state.mu_v, state.log_sd_v, t, hp.sigma_v, extrapolate)
          + state.vbar_log_moment())
    su = lu.max(axis=1, keepdims=True)
    sv = lv.max(axis=1, keepdims=True)
    return su + sv.T + np.log(np.exp(lu - su) @ np.exp(lv - sv).T)


def rank_scores(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Order ``candidates`` by descending score, ties by ascending index."""
    candidates = np.asarray(candidates, dtype=np.int64)
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order]


def rank_items(state: VariationalState, hp: Hyperparams, n: int, t: int,
               candidates: Iterable[int] | None = None, exclude: Iterable[int] = (),
               extrapolate: bool = True) -> ScoredList:
    M = state.shape[1]
    cand = np.arange(M) if candidates is None else np.unique(np.fromiter(candidates, np.int64))
    if len(cand) and (cand.min() < 0 or cand.max() >= M):
        raise IndexError("candidate item index out of range")
    excl = np.fromiter(exclude, np.int64)
    cand = np.setdiff1d(cand, excl)
    if len(cand) == 0:
        raise ValueError("no candidate items left to rank")
    scores = score_matrix(state, hp, t, users=np.array([n]), extrapolate=extrapolate)[0]
    ranked = rank_scores(scores, cand)
    return ScoredList(user=n, step=t, items=ranked, scores=scores[ranked])
