import math

import numpy as np
import pytest
from scipy import integrate, stats

from dpf.data import InteractionTensor
from dpf.inference import (DivergenceError, FitConfig, VariationalState, block_objective_global,
                           block_objective_item, block_objective_user, elbo, elbo_terms,
                           expected_sums, fit, init_variational, update_phi)
from dpf.model import Hyperparams, simulate
from dpf.optimize import quasi_newton_minimize
from oracles import central_diff, mc_elbo, random_state, random_tensor


class TestInit:
    def test_constant_across_time(self):
        s = init_variational(Hyperparams(K=4), 5, 6, 7, seed=3)
        assert np.all(s.mu_u == s.mu_u[:, :1])
        assert np.all(s.mu_v == s.mu_v[:, :1])
        assert np.abs(s.mu_u).max() <= 0.01
        np.testing.assert_allclose(np.exp(s.log_sd_ubar), 0.1)

    def test_zero_scale(self):
        s = init_variational(Hyperparams(K=2), 3, 3, 2, scale=0.0)
        for name in ("mu_u", "mu_v", "mu_ubar", "mu_vbar"):
            assert not getattr(s, name).any()

    def test_deterministic(self):
        a = init_variational(Hyperparams(K=3), 4, 5, 2, seed=9)
        b = init_variational(Hyperparams(K=3), 4, 5, 2, seed=9)
        for name in VariationalState.ARRAYS:
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


class TestPhi:
    def _one_cell(self, summed):
        K = len(summed)
        s = init_variational(Hyperparams(K=K), 1, 1, 1, scale=0.0)
        s.mu_ubar[0] = summed
        return s, InteractionTensor(1, 1, 1, [0], [0], [0], [1])

    def test_uniform(self):
        s, t = self._one_cell(np.zeros(4))
        np.testing.assert_allclose(update_phi(s, t), [[0.25] * 4])

    def test_hand_value(self):
        s, t = self._one_cell(np.array([math.log(3), 0.0]))
        np.testing.assert_allclose(update_phi(s, t), [[0.75, 0.25]])

    def test_shift_invariant_and_simplex(self):
        rng = np.random.default_rng(0)
        s = random_state(rng, 4, 5, 3, 6, spread=20)
        t = random_tensor(rng, 4, 5, 3)
        phi = update_phi(s, t)
        np.testing.assert_allclose(phi.sum(axis=1), 1.0, atol=1e-12)
        assert (phi >= 0).all()
        s.mu_vbar += 7.5
        np.testing.assert_allclose(update_phi(s, t), phi, rtol=1e-12)


class TestMoments:
    def test_expected_sums_brute_force(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            N, M, T, K = rng.integers(1, 11), rng.integers(1, 11), rng.integers(1, 4), rng.integers(1, 4)
            s = random_state(rng, N, M, T, K)
            A, B = expected_sums(s)
            for t in range(T):
                brute = 0.0
                for n in range(N):
                    for m in range(M):
                        for k in range(K):
                            brute += math.exp(
                                s.mu_u[n, t, k] + 0.5 * math.exp(2 * s.log_sd_u[n, t, k])
                                + s.mu_ubar[n, k] + 0.5 * math.exp(2 * s.log_sd_ubar[n, k])
                                + s.mu_v[m, t, k] + 0.5 * math.exp(2 * s.log_sd_v[m, t, k])
                                + s.mu_vbar[m, k] + 0.5 * math.exp(2 * s.log_sd_vbar[m, k]))
                assert np.sum(A[t] * B[t]) == pytest.approx(brute, rel=1e-10)

    @pytest.mark.parametrize("mean,sd", [(0.0, 1.0), (-1.3, 0.4), (2.0, 0.05), (0.5, 1.7)])
    def test_lognormal_moment_by_quadrature(self, mean, sd):
        s = init_variational(Hyperparams(K=1), 1, 1, 1, scale=0.0)
        s.mu_ubar[:] = mean
        s.log_sd_ubar[:] = math.log(sd)
        got = math.exp(s.ubar_log_moment()[0, 0])
        ref, _ = integrate.quad(lambda z: math.exp(z) * stats.norm.pdf(z, mean, sd),
                                mean - 12 * sd, mean + 12 * sd, epsabs=0, epsrel=1e-12)
        assert got == pytest.approx(ref, rel=1e-9)


class TestElbo:
    def test_zero_cell_data_term(self):
        s = init_variational(Hyperparams(K=1), 1, 1, 1, scale=0.0, sd=1e-12)
        empty = InteractionTensor(1, 1, 1, [], [], [], [])
        terms = elbo_terms(s, np.zeros((0, 1)), empty, Hyperparams(K=1))
        assert terms["poisson_rate"] == pytest.approx(-1.0, rel=1e-12)
        assert terms["poisson_linear"] == 0.0

    def test_log_factorial_of_two(self):
        hp = Hyperparams(K=1)
        s = init_variational(hp, 1, 1, 1, scale=0.0)
        one = InteractionTensor(1, 1, 1, [0], [0], [0], [1])
        two = InteractionTensor(1, 1, 1, [0], [0], [0], [2])
        phi = np.ones((1, 1))
        assert elbo(s, phi, two, hp) - elbo(s, phi, one, hp) == pytest.approx(-math.log(2))

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(7)
        hp = Hyperparams(K=2, mu_ubar=-0.3, sigma_u=0.8, sigma_v=1.2)
        s = random_state(rng, 2, 2, 2, 2, spread=0.4)
        t = InteractionTensor(2, 2, 2, [0, 1, 1], [0, 0, 1], [0, 1, 1], [1, 3, 2])
        phi = update_phi(s, t)
        est, se = mc_elbo(s, phi, t, hp, 100_000, np.random.default_rng(0))
        assert abs(elbo(s, phi, t, hp) - est) < 3 * se

    def test_nonfinite_raises(self):
        hp = Hyperparams(K=1)
        s = init_variational(hp, 1, 1, 1)
        s.mu_u[0, 0, 0] = np.nan
        with pytest.raises(DivergenceError):
            elbo(s, np.ones((0, 1)), InteractionTensor(1, 1, 1, [], [], [], []), hp)


def _setup(seed, N=4, M=5, T=3, K=3):
    rng = np.random.default_rng(seed)
    hp = Hyperparams(K=K, mu_u=rng.normal(), sigma_u=rng.uniform(0.3, 3),
                     sigma_v=rng.uniform(0.3, 3), mu_vbar=rng.normal(),
                     sigma_ubar=rng.uniform(0.3, 3), sigma_vbar=rng.uniform(0.3, 3))
    s = random_state(rng, N, M, T, K)
    t = random_tensor(rng, N, M, T)
    return rng, hp, s, t, update_phi(s, t)


def _set_block(state, kind, index, t, x):
    K = len(x) // 2
    if kind == "user":
        state.mu_u[index, t], state.log_sd_u[index, t] = x[:K], x[K:]
    elif kind == "item":
        state.mu_v[index, t], state.log_sd_v[index, t] = x[:K], x[K:]
    elif kind == "ubar":
        state.mu_ubar[index], state.log_sd_ubar[index] = x[:K], x[K:]
    else:
        state.mu_vbar[index], state.log_sd_vbar[index] = x[:K], x[K:]


def _objective(kind, index, t, state, phi, tensor, hp):
    A, B = expected_sums(state)
    if kind == "user":
        return lambda x: block_objective_user(x, index, t, state, phi, tensor, B, hp)
    if kind == "item":
        return lambda x: block_objective_item(x, index, t, state, phi, tensor, A, hp)
    other = B if kind == "ubar" else A
    name = "user" if kind == "ubar" else "item"
    return lambda x: block_objective_global(x, name, index, state, phi, tensor, other, hp)


class TestBlockObjectives:
    @pytest.mark.parametrize("kind", ["user", "item", "ubar", "vbar"])
    def test_gradient_finite_differences(self, kind):
        for seed in range(15):
            rng, hp, s, t, phi = _setup(seed)
            index = int(rng.integers(0, 4))
            step = int(rng.integers(0, 3))
            f = _objective(kind, index, step, s, phi, t, hp)
            x = np.concatenate([rng.normal(0, 0.7, 3), rng.uniform(-1.5, 0.3, 3)])
            _, g = f(x)
            fd = central_diff(lambda z: f(z)[0], x)
            np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-6)

    @pytest.mark.parametrize("kind", ["user", "item", "ubar", "vbar"])
    def test_value_change_equals_elbo_change(self, kind):
        rng, hp, s, t, phi = _setup(11)
        index, step = 2, 1
        f = _objective(kind, index, step, s, phi, t, hp)
        x0 = {"user": np.r_[s.mu_u[index, step], s.log_sd_u[index, step]],
              "item": np.r_[s.mu_v[index, step], s.log_sd_v[index, step]],
              "ubar": np.r_[s.mu_ubar[index], s.log_sd_ubar[index]],
              "vbar": np.r_[s.mu_vbar[index], s.log_sd_vbar[index]]}[kind]
        x1 = x0 + rng.normal(0, 0.3, x0.shape)
        e0 = elbo(s, phi, t, hp)
        v0, v1 = f(x0)[0], f(x1)[0]
        moved = s.copy()
        _set_block(moved, kind, index, step, x1)
        assert elbo(moved, phi, t, hp) - e0 == pytest.approx(v1 - v0, rel=1e-9, abs=1e-9)

    def test_user_item_symmetry(self):
        rng, hp, s, t, phi = _setup(5)
        A, B = expected_sums(s)
        x = rng.normal(0, 0.5, 6)
        fu = block_objective_user(x, 1, 2, s, phi, t, B, hp)
        tt = t.transpose()
        fi = block_objective_item(x, 1, 2, s.swapped(), update_phi(s.swapped(), tt), tt, B,
                                  hp.swapped())
        assert fu[0] == pytest.approx(fi[0], rel=1e-13)
        np.testing.assert_allclose(fu[1], fi[1], rtol=1e-13)

    def test_three_node_chain_optimum(self):
        # no clicks and a vanishing rate term leave only the Gaussian chain:
        # the middle node's optimum is the neighbour average with variance sigma^2 / 2
        hp = Hyperparams(K=2, sigma_u=1.7, mu_vbar=-60.0)
        s = init_variational(hp, 1, 1, 3, scale=0.0)
        s.mu_u[0, 0] = [0.4, -1.0]
        s.mu_u[0, 2] = [1.6, 2.0]
        s.mu_vbar[:] = -60.0
        empty = InteractionTensor(1, 1, 3, [], [], [], [])
        f = _objective("user", 0, 1, s, np.zeros((0, 2)), empty, hp)
        x = quasi_newton_minimize(lambda z: tuple(-np.asarray(v) for v in f(z)), np.zeros(4),
                                  max_iters=200)
        np.testing.assert_allclose(x[:2], [1.0, 0.5], atol=1e-6)
        np.testing.assert_allclose(np.exp(2 * x[2:]), 1.7 ** 2 / 2, rtol=1e-6)

    def test_item_chain_end_optimum(self):
        # last step: a single neighbour, so mean = neighbour, variance = sigma^2
        hp = Hyperparams(K=1, sigma_v=0.6)
        s = init_variational(hp, 1, 1, 2, scale=0.0)
        s.mu_v[0, 0] = 0.9
        s.mu_ubar[:] = -60.0
        f = _objective("item", 0, 1, s, np.zeros((0, 1)), InteractionTensor(1, 1, 2, [], [], [], []), hp)
        x = quasi_newton_minimize(lambda z: tuple(-np.asarray(v) for v in f(z)), np.zeros(2),
                                  max_iters=200)
        np.testing.assert_allclose(x, [0.9, math.log(0.6)], atol=1e-6)

    def test_global_without_data_returns_prior(self):
        hp = Hyperparams(K=3, mu_ubar=-0.7, sigma_ubar=2.5, mu_v=-60.0)
        s = init_variational(hp, 1, 1, 2, scale=0.0)
        s.mu_v[:] = -60.0
        f = _objective("ubar", 0, 0, s, np.zeros((0, 3)), InteractionTensor(1, 1, 2, [], [], [], []), hp)
        x = quasi_newton_minimize(lambda z: tuple(-np.asarray(v) for v in f(z)), np.zeros(6),
                                  max_iters=200)
        np.testing.assert_allclose(x[:3], -0.7, atol=1e-6)
        np.testing.assert_allclose(np.exp(x[3:]), 2.5, rtol=1e-6)

    def test_entropy_gradient_is_one(self):
        hp = Hyperparams(K=2, sigma_u=1e8, mu_vbar=-60.0)
        s = init_variational(hp, 1, 1, 1, scale=0.0)
        s.mu_vbar[:] = -60.0
        f = _objective("user", 0, 0, s, np.zeros((0, 2)), InteractionTensor(1, 1, 1, [], [], [], []), hp)
        _, g = f(np.array([0.0, 0.0, -0.5, 0.2]))
        np.testing.assert_allclose(g[2:], 1.0, atol=1e-12)

    def test_global_sign_flip_symmetry(self):
        hp = Hyperparams(K=2, mu_u=-60.0)
        s = init_variational(hp, 1, 1, 1, scale=0.0)
        s.mu_u[:] = -60.0
        f = _objective("ubar", 0, 0, s, np.zeros((0, 2)), InteractionTensor(1, 1, 1, [], [], [], []), hp)
        x = np.array([0.8, -1.1, -0.3, 0.1])
        assert f(x)[0] == pytest.approx(f(x * [-1, -1, 1, 1])[0], rel=1e-12)


class TestFit:
    def _data(self, seed=0):
        hp = Hyperparams(K=3, mu_ubar=-1.0, mu_vbar=-1.0).with_variance(0.3)
        tensor, _ = simulate(hp, 20, 20, 5, seed=seed)
        return tensor, Hyperparams(K=3, mu_ubar=-1.0, mu_vbar=-1.0)

    def test_monotone(self):
        tensor, hp = self._data()
        res = fit(tensor, hp, FitConfig(max_sweeps=40, min_sweeps=40, tol=1e-300))
        tr = np.array(res.elbo_trace)
        assert len(tr) == 40
        assert np.all(np.diff(tr) >= -1e-9 * np.abs(tr[:-1]))
        assert res.state.is_finite()

    def test_phi_simplex_after_fit(self):
        tensor, hp = self._data(1)
        res = fit(tensor, hp, FitConfig(max_sweeps=5))
        np.testing.assert_allclose(res.phi.sum(axis=1), 1.0, atol=1e-12)

    def test_converges_and_stops(self):
        tensor, hp = self._data(2)
        res = fit(tensor, hp, FitConfig(max_sweeps=500, tol=1e-4))
        assert res.converged
        assert len(res.elbo_trace) < 500
        tr = res.elbo_trace
        assert abs(tr[-1] - tr[-2]) / abs(tr[-2]) < 1e-4

    def test_deterministic(self):
        tensor, hp = self._data(3)
        a = fit(tensor, hp, FitConfig(max_sweeps=6, seed=4))
        b = fit(tensor, hp, FitConfig(max_sweeps=6, seed=4))
        assert a.elbo_trace == b.elbo_trace
        np.testing.assert_array_equal(a.state.mu_u, b.state.mu_u)

    def test_threads_agree(self):
        tensor, hp = self._data(4)
        a = fit(tensor, hp, FitConfig(max_sweeps=6, threads=1))
        b = fit(tensor, hp, FitConfig(max_sweeps=6, threads=3))
        np.testing.assert_allclose(b.elbo_trace, a.elbo_trace, rtol=1e-10)

    def test_timings_recorded(self):
        tensor, hp = self._data(5)
        res = fit(tensor, hp, FitConfig(max_sweeps=3, min_sweeps=3, tol=1e-300))
        assert len(res.timings) == 3
        assert {"user_blocks", "item_blocks", "global_blocks", "observations", "elbo",
                "total"} <= set(res.timings[0])

    def test_empty_tensor(self):
        with pytest.raises(ValueError):
            fit(InteractionTensor(2, 2, 2, [], [], [], []), Hyperparams(K=2))

    def test_init_shape_checked(self):
        tensor, hp = self._data()
        with pytest.raises(ValueError):
            fit(tensor, hp, init=init_variational(hp, 3, 3, 3))

    def test_user_without_clicks_gets_lowest_rate(self):
        tensor, hp = self._data(6)
        tensor = tensor.select(tensor.users != 0)
        res = fit(tensor, hp, FitConfig(max_sweeps=30))
        s = res.state
        activity = np.exp(s.user_log_moment() + s.ubar_log_moment()[:, None, :]).sum(axis=2)
        assert np.all(activity[0] < activity[1:].min(axis=0))
        assert s.is_finite()
