import math

import numpy as np
import pytest
from scipy import integrate, stats

from rsjd.dynamics import zero_beta
from rsjd.errors import PolicyInfeasible
from rsjd.hjb import Grid, PolicyGrid
from rsjd.jumps import JumpMeasure
from rsjd.model import MarketModel
from rsjd.sim import (GridPolicy, ShiftedPolicy, compare_J, criterion_from_logV, doleans, estimate_I_tilde,
                      estimate_J, log_mean_exp, mesh, simulate_batch, simulate_path, transition,
                      wealth_positivity)

from conftest import diffusion_model, jump_model


def jump_only_model(in_z0=False, weight=3.0, gamma=-0.2):
    atoms = [{"gamma": [gamma], "weight": weight, "in_z0": in_z0}]
    return MarketModel(b=[0.0], B=[[-1.0]], Lambda=[[0.0]], a0=0.01, A0=[0.0], a=[0.03], A=[[0.0]],
                       Sigma=[[0.0]], theta=1.0, T=1.0, v=1.0, jumps=JumpMeasure.from_atoms(atoms))


def gaussian_logv_moments(model, h, x0):
    """Mean and variance of ln V_T for constant h without jumps, by quadrature (n = 1, b = 0)."""
    B = float(model.B[0, 0])
    T = model.T
    c = float(h @ model.A_hat[:, 0])
    hs = h @ model.Sigma
    lam = model.Lambda[0]
    base = model.a0 + h @ model.a_hat - 0.5 * h @ model.SigmaSigmaT @ h
    mean_int, _ = integrate.quad(lambda t: math.exp(B * t) * x0, 0.0, T)
    mean = math.log(model.v) + base * T + c * mean_int

    def integrand(s):
        psi = (math.exp(B * (T - s)) - 1.0) / B
        load = c * psi * lam + hs
        return float(load @ load)

    var, _ = integrate.quad(integrand, 0.0, T)
    return mean, var


class TestTransition:
    def test_scalar_ou(self):
        B, lam, dt = -0.7, np.array([[0.3, 0.1]]), 0.05
        tr = transition(np.array([[B]]), lam, dt)
        assert tr.E[0, 0] == pytest.approx(math.exp(B * dt), rel=1e-14)
        assert tr.F[0, 0] == pytest.approx((math.exp(B * dt) - 1.0) / B, rel=1e-13)
        total = tr.K @ tr.K.T * dt + tr.L @ tr.L.T
        s2 = float(np.sum(lam ** 2))
        assert total[0, 0] == pytest.approx(s2 * (math.exp(2 * B * dt) - 1.0) / (2 * B), rel=1e-12)
        # covariance with the Brownian increment
        np.testing.assert_allclose(tr.K * dt, lam * (math.exp(B * dt) - 1.0) / B, rtol=1e-12)

    def test_mesh(self):
        t = mesh(1.0, 0.3)
        assert t.size == 5 and t[-1] == 1.0


class TestWealth:
    def test_money_market_only(self, jmodel):
        res = simulate_batch(jmodel, np.zeros(2), 50, 0.01, seed=3, record=True)
        expect = math.log(jmodel.v) + jmodel.a0 * res.times
        np.testing.assert_allclose(res.paths["logV"], np.broadcast_to(expect, (50, res.times.size)), atol=1e-13)

    def test_gaussian_moments_without_jumps(self, dmodel):
        h, x0 = np.array([0.6, -0.3]), 0.5
        res = simulate_batch(dmodel, h, 100_000, 0.01, seed=11, x0=[x0])
        mean, var = gaussian_logv_moments(dmodel, h, x0)
        N = res.n_paths
        assert abs(res.logV.mean() - mean) <= 3 * math.sqrt(var / N)
        assert abs(res.logV.var(ddof=1) - var) <= 3 * var * math.sqrt(2.0 / (N - 1))

    def test_jump_only_counts_are_poisson(self):
        m = jump_only_model()
        h = np.array([0.5])
        res = simulate_batch(m, h, 20_000, 0.01, seed=0, record=True)
        N = res.paths["counts"].sum(axis=(1, 2))
        drift = m.a0 + float(h @ m.a_hat)
        np.testing.assert_allclose(res.logV, math.log(m.v) + drift * m.T + N * math.log(1 - 0.1), atol=1e-11)
        lam = 3.0 * m.T
        edges = np.arange(0, 9)
        obs = np.array([np.sum(N == k) for k in edges[:-1]] + [np.sum(N >= edges[-1])])
        p = np.append(stats.poisson.pmf(edges[:-1], lam), stats.poisson.sf(edges[-2], lam))
        assert stats.chisquare(obs, p * N.size).pvalue > 0.01

    def test_positive_under_aggressive_policy(self, jmodel):
        aset = jmodel.admissible
        h = np.array([6.0, -0.5])
        assert aset.contains_strict(h)
        res = simulate_batch(jmodel, h, 2000, 0.01, seed=2)
        rep = wealth_positivity(res)
        assert rep["violations"] == 0 and rep["min_V"] > 0 and rep["min_jump_factor"] > 0

    def test_infeasible_policy_aborts(self, jmodel):
        with pytest.raises(PolicyInfeasible) as err:
            simulate_batch(jmodel, ShiftedPolicy(lambda t, X: np.zeros((X.shape[0], 2)), [0.0, 20.0]), 10, 0.1)
        assert err.value.time == 0.0


class TestDoleans:
    def test_zero_policy(self, jmodel):
        res = simulate_batch(jmodel, np.zeros(2), 100, 0.02, seed=1)
        np.testing.assert_array_equal(res.log_chi, 0.0)

    def test_girsanov_mean_one(self, dmodel):
        res = simulate_batch(dmodel, np.array([0.8, -0.4]), 100_000, 0.01, seed=4)
        est = np.exp(res.log_chi)
        assert abs(est.mean() - 1.0) <= 3 * est.std(ddof=1) / math.sqrt(est.size)

    def test_pure_jump_mean_one(self):
        m = jump_only_model(weight=2.0, gamma=0.3, in_z0=True)
        res = simulate_batch(m, np.array([1.5]), 100_000, 0.01, seed=8)
        est = np.exp(res.log_chi)
        assert abs(est.mean() - 1.0) <= 3 * est.std(ddof=1) / math.sqrt(est.size)

    def test_recomputed_along_path(self, jmodel):
        p = simulate_path(jmodel, np.array([0.4, 0.2]), seed=7, dt=0.01)
        np.testing.assert_allclose(doleans(jmodel, None, p), p.chi, rtol=1e-12)
        np.testing.assert_allclose(doleans(jmodel, [0.4, 0.2], p), p.chi, rtol=1e-12)

    def test_pathwise_identity(self, jmodel):
        # V_T^(-theta) = v^(-theta) exp(theta int g) chi_T on every path
        res = simulate_batch(jmodel, np.array([0.5, 0.3]), 200, 0.01, seed=9)
        th = jmodel.theta
        lhs = -th * res.logV
        rhs = -th * math.log(jmodel.v) + th * res.int_g + res.log_chi
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_measure_change_on_factor(self, dmodel):
        h = np.array([0.8, -0.4])
        P = simulate_batch(dmodel, h, 100_000, 0.01, seed=12, x0=[0.2])
        Q = simulate_batch(dmodel, h, 100_000, 0.01, seed=13, x0=[0.2], measure="Ph")
        z = P.X_T[:, 0] * np.exp(P.log_chi)
        se = math.hypot(z.std(ddof=1), Q.X_T[:, 0].std(ddof=1)) / math.sqrt(100_000)
        assert abs(z.mean() - Q.X_T[:, 0].mean()) <= 3 * se


class TestEstimators:
    def test_log_mean_exp_stable(self):
        val, _ = log_mean_exp([1000.0, 1000.0])
        assert val == pytest.approx(1000.0)

    def test_money_market_criterion(self, jmodel):
        est = estimate_J(jmodel, np.zeros(2), 200, seed=0)
        assert est.mean == pytest.approx(math.log(jmodel.v) + jmodel.a0 * jmodel.T, abs=1e-13)
        assert est.se == pytest.approx(0.0, abs=1e-15)

    def test_small_theta_mean_variance(self):
        m = diffusion_model(theta=0.01)
        res = simulate_batch(m, np.array([0.8, -0.4]), 100_000, 0.01, seed=6)
        est = criterion_from_logV(res.logV, m.theta)
        approx = est.extra["mean_logV"] - 0.5 * m.theta * est.extra["var_logV"]
        assert abs(est.mean - approx) <= 3 * est.se + m.theta ** 2

    def test_zero_beta_transformed_criterion_exact(self):
        m = jump_model(A0=[-0.2])
        zb = zero_beta(m)
        est = estimate_I_tilde(m, zb.h, [0.3], 500, seed=1)
        expect = m.v ** (-m.theta) * math.exp(m.theta * zb.g * m.T)
        assert est.mean == pytest.approx(expect, rel=1e-12)
        assert est.se <= 1e-12 * expect

    def test_two_measures_agree(self, jmodel):
        h = np.array([0.7, 0.4])
        J = estimate_J(jmodel, h, 100_000, seed=21, x0=[0.3])
        I = estimate_I_tilde(jmodel, h, [0.3], 100_000, seed=22)
        J2 = -math.log(I.mean) / jmodel.theta
        se = math.hypot(J.se, I.se / (jmodel.theta * I.mean))
        assert abs(J.mean - J2) <= 3 * se

    def test_compare_is_paired(self, dmodel):
        h = np.array([0.5, 0.2])
        d = compare_J(dmodel, h, h, 5000, seed=3)
        assert d.mean == 0.0 and d.se == 0.0


class TestReproducibility:
    def test_seed_repeat_bitwise(self, jmodel):
        a = simulate_batch(jmodel, np.array([0.3, 0.1]), 3000, 0.02, seed=99, block_size=1000)
        b = simulate_batch(jmodel, np.array([0.3, 0.1]), 3000, 0.02, seed=99, block_size=1000)
        assert np.array_equal(a.logV, b.logV) and np.array_equal(a.log_chi, b.log_chi)

    def test_threads_do_not_change_results(self, jmodel):
        a = simulate_batch(jmodel, np.array([0.3, 0.1]), 3000, 0.02, seed=99, block_size=500)
        b = simulate_batch(jmodel, np.array([0.3, 0.1]), 3000, 0.02, seed=99, block_size=500, threads=4)
        assert np.array_equal(a.logV, b.logV) and np.array_equal(a.X_T, b.X_T)

    def test_brownian_draws_ignore_jumps(self, dmodel, jmodel):
        a = simulate_batch(dmodel, np.zeros(2), 500, 0.02, seed=4)
        b = simulate_batch(jmodel, np.zeros(2), 500, 0.02, seed=4)
        assert np.array_equal(a.X_T, b.X_T)


class TestGridPolicy:
    def test_constant_grid(self, jmodel):
        g = Grid(2.0, 21, 0.1, 1.0)
        pol = GridPolicy(PolicyGrid.constant([0.3, -0.2], g), model=jmodel)
        H = pol(0.37, np.array([[0.1], [-1.9], [1.2]]))
        np.testing.assert_allclose(H, np.tile([0.3, -0.2], (3, 1)), atol=1e-15)

    def test_outside_box_is_zero_beta(self):
        m = jump_model(A0=[-0.2])
        g = Grid(2.0, 21, 0.1, 1.0)
        pol = GridPolicy(PolicyGrid.constant([0.3, -0.2], g), model=m)
        np.testing.assert_allclose(pol(0.0, np.array([[2.5]]))[0], zero_beta(m).h)

    def test_linear_in_x(self, jmodel):
        g = Grid(2.0, 21, 0.1, 1.0)
        H = np.broadcast_to(np.stack([g.axes[0], -g.axes[0]], axis=-1), (g.nt + 1, 21, 2)).copy()
        pol = GridPolicy(PolicyGrid(H, g), model=jmodel)
        np.testing.assert_allclose(pol(0.55, np.array([[0.33]]))[0], [0.33, -0.33], atol=1e-14)
