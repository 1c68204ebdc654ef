"""Dynamic Poisson factorization: hyperparameters, latent state and simulator.

Each user has a static (global) log-factor ``ubar[n, k]`` and a Gaussian
random walk of corrections ``u[n, t, k]``; items are symmetric.  Clicks are

    y[n, m, t] ~ Poisson(sum_k exp(u[n,t,k] + ubar[n,k]) * exp(v[m,t,k] + vbar[m,k]))
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .data import InteractionTensor

DEFAULT_SIGMA = math.sqrt(10.0)


@dataclass(frozen=True)
class Hyperparams:
    """Prior means and standard deviations.

    ``sigma_u`` is both the stddev of the first correction factor around
    ``mu_u`` and the random-walk step size; same for ``sigma_v``.
    """

    K: int = 20
    mu_u: float = 0.0
    mu_v: float = 0.0
    sigma_u: float = DEFAULT_SIGMA
    sigma_v: float = DEFAULT_SIGMA
    mu_ubar: float = 0.0
    mu_vbar: float = 0.0
    sigma_ubar: float = DEFAULT_SIGMA
    sigma_vbar: float = DEFAULT_SIGMA

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        for name in ("sigma_u", "sigma_v", "sigma_ubar", "sigma_vbar"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def with_variance(self, variance: float) -> "Hyperparams":
        """Same model with every prior variance set to ``variance``."""
        s = math.sqrt(variance)
        return replace(self, sigma_u=s, sigma_v=s, sigma_ubar=s, sigma_vbar=s)

    def swapped(self) -> "Hyperparams":
        """Hyperparameters with the user and item roles exchanged."""
        return replace(self, mu_u=self.mu_v, mu_v=self.mu_u, sigma_u=self.sigma_v,
                       sigma_v=self.sigma_u, mu_ubar=self.mu_vbar, mu_vbar=self.mu_ubar,
                       sigma_ubar=self.sigma_vbar, sigma_vbar=self.sigma_ubar)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        names = {f.name for f in fields(cls)}
        return cls(**{k: (int(v) if k == "K" else float(v)) for k, v in d.items() if k in names})


@dataclass
class LatentState:
    """Point values of all latent factors.

    Arrays are laid out ``u[n, t, k]``, ``v[m, t, k]``, ``ubar[n, k]``,
    ``vbar[m, k]``.
    """

    u: np.ndarray
    v: np.ndarray
    ubar: np.ndarray
    vbar: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int, int]:
        N, T, K = self.u.shape
        return N, self.v.shape[0], T, K

    def user_expression(self) -> np.ndarray:
        return self.u + self.ubar[:, None, :]

    def item_expression(self) -> np.ndarray:
        return self.v + self.vbar[:, None, :]

    def rates(self) -> np.ndarray:
        """Dense ``(N, M, T)`` Poisson rates."""
        eu = np.exp(self.user_expression())
        ev = np.exp(self.item_expression())
        return np.einsum("ntk,mtk->nmt", eu, ev)


def rate(state: LatentState, n: int, m: int, t: int) -> float:
    N, M, T, _ = state.shape
    if not (0 <= n < N and 0 <= m < M and 0 <= t < T):
        raise IndexError(f"(n={n}, m={m}, t={t}) outside ({N}, {M}, {T})")
    log_terms = state.u[n, t] + state.ubar[n] + state.v[m, t] + state.vbar[m]
    return float(np.exp(log_terms).sum())


def _walk(rng: np.random.Generator, mu: float, sigma: float, T: int, K: int) -> np.ndarray:
    steps = rng.normal(0.0, 1.0, size=(T, K)) * sigma
    steps[0] += mu
    return np.cumsum(steps, axis=0)


def simulate(hp: Hyperparams, N: int, M: int, T: int, seed: int = 0
             ) -> tuple[InteractionTensor, LatentState]:
    """Draw latent factors and clicks from the generative model.

    Every user and item gets its own spawned random stream, and each user's
    row of clicks another, so results do not depend on iteration order.
    """
    if min(N, M, T) < 1:
        raise ValueError("N, M and T must be positive")
    K = hp.K
    root = np.random.SeedSequence(seed)
    user_ss, item_ss, click_ss = root.spawn(3)
    user_rngs = [np.random.default_rng(s) for s in user_ss.spawn(N)]
    item_rngs = [np.random.default_rng(s) for s in item_ss.spawn(M)]

    ubar = np.empty((N, K))
    u = np.empty((N, T, K))
    for n, rng in enumerate(user_rngs):
        ubar[n] = rng.normal(hp.mu_ubar, hp.sigma_ubar, size=K)
        u[n] = _walk(rng, hp.mu_u, hp.sigma_u, T, K)
    vbar = np.empty((M, K))
    v = np.empty((M, T, K))
    for m, rng in enumerate(item_rngs):
        vbar[m] = rng.normal(hp.mu_vbar, hp.sigma_vbar, size=K)
        v[m] = _walk(rng, hp.mu_v, hp.sigma_v, T, K)
    state = LatentState(u, v, ubar, vbar)

    ev = np.exp(state.item_expression())
    eu = np.exp(state.user_expression())
    users, items, steps, counts = [], [], [], []
    for n, ss in enumerate(click_ss.spawn(N)):
        rates_n = np.einsum("tk,mtk->mt", eu[n], ev)
        y = np.random.default_rng(ss).poisson(rates_n)
        mm, tt = np.nonzero(y)
        users.append(np.full(len(mm), n))
        items.append(mm)
        steps.append(tt)
        counts.append(y[mm, tt])
    tensor = InteractionTensor(N, M, T, np.concatenate(users), np.concatenate(items),
                               np.concatenate(steps), np.concatenate(counts))
    return tensor, state


def save_latent(state: LatentState, path):
    with open(path, "wb") as fh:
        np.savez(fh, u=state.u, v=state.v, ubar=state.ubar, vbar=state.vbar)


def load_latent(path) -> LatentState:
    with np.load(path) as z:
        return LatentState(z["u"], z["v"], z["ubar"], z["vbar"])
