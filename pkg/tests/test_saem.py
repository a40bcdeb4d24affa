import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from saemvs.errors import ConfigError, Diverged
from saemvs.model import DesignMatrices, HyperParams, PopulationParams, linear_growth
from saemvs.saem import (LatentState, SaemSchedule, SuffStats, _anneal, coefficient_mask, d_star,
                         expfam_objective, laplace_approximation, m_step, p_star, q1_tilde,
                         run_map, run_mle, s_step, sa_step, solve_beta_tilde, step_sizes,
                         suff_stats)

import oracles
from conftest import linear_dataset


class TestSchedule:
    def test_step_sizes(self):
        g = step_sizes(10, 4, 2.0 / 3.0)
        assert_array_equal(g[:4], 1.0)
        assert_allclose(g[4:], np.arange(1, 7) ** (-2.0 / 3.0))

    @pytest.mark.parametrize("kw", [dict(K=10, n_burnin=10), dict(gamma_exp=0.5), dict(h=0),
                                    dict(anneal_decay=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            SaemSchedule(**kw)


class TestSpikeSlabExpectations:
    @given(st.floats(-50, 50), st.floats(1e-3, 1 - 1e-3), st.floats(1e-4, 1.0),
           st.floats(2.0, 1e4))
    @settings(max_examples=200, deadline=None)
    def test_p_star_matches_density_ratio(self, beta, alpha, nu0, ratio):
        nu1 = nu0 * ratio
        ref = oracles.spike_slab_pstar(beta, alpha, nu0, nu1)
        got = p_star(np.array([[beta]]), [alpha], nu0, nu1)[0, 0]
        if np.isfinite(ref):
            assert_allclose(got, ref, rtol=1e-9, atol=1e-300)
        assert 0.0 <= got <= 1.0

    def test_p_star_extremes(self):
        got = p_star(np.array([[1e6], [0.0]]), [0.0], 0.01, 100.0)
        assert_array_equal(got, [[0.0], [0.0]])
        got = p_star(np.array([[1e6]]), [0.5], 0.01, 100.0)
        assert got[0, 0] == 1.0

    def test_d_star_layout(self):
        ps = np.array([[0.0, 1.0], [0.5, 0.25]])
        d = d_star(ps, nu0=0.1, nu1=10.0, sigma2_mu=4.0, sigma2_lambda=2.0, p_f=1)
        assert d.shape == (4, 2)
        assert_allclose(d[0], 0.25)
        assert_allclose(d[1], 0.5)
        assert_allclose(d[2], [10.0, 0.1])
        assert_allclose(d[3], [0.5 * 10 + 0.5 * 0.1, 0.75 * 10 + 0.25 * 0.1])


class TestCoefficientSolve:
    @pytest.mark.parametrize("q, n, P", [(1, 20, 8), (2, 10, 30), (3, 6, 25), (2, 40, 5)])
    def test_primal_dual_dense_agree(self, rng, q, n, P):
        Vt = np.column_stack([np.ones(n), rng.standard_normal((n, P - 1))])
        A = rng.standard_normal((q, q))
        Gamma = A @ A.T + 0.5 * np.eye(q)
        dmat = rng.uniform(0.01, 100.0, (P, q))
        free = rng.uniform(size=(P, q)) < 0.8
        free[0] = True
        s3 = rng.standard_normal((n, q))
        gram = Vt.T @ Vt
        ref = oracles.dense_coefficient_solve(Vt, Gamma, dmat, free, s3)
        for method in ("primal", "dual"):
            got = solve_beta_tilde(Vt, gram, Gamma, dmat, free, s3, method=method)
            assert_allclose(got, ref, rtol=1e-7, atol=1e-9)
            assert_array_equal(got[~free], 0.0)

    def test_zero_precision_uses_primal(self, rng):
        # the MLE has d = 0 and must not take the Woodbury route
        Vt = np.column_stack([np.ones(30), rng.standard_normal((30, 3))])
        free = np.ones((4, 1), bool)
        s3 = rng.standard_normal((30, 1))
        got = solve_beta_tilde(Vt, Vt.T @ Vt, np.eye(1), np.zeros((4, 1)), free, s3)
        assert_allclose(got, np.linalg.lstsq(Vt, s3, rcond=None)[0], atol=1e-10)

    def test_coefficient_mask(self):
        design = DesignMatrices.from_raw(np.arange(12.0).reshape(4, 3) ** 1.5, forced=[1, 0, 2, 5])
        from saemvs.model import logistic_growth_fixed_asymptote
        model = logistic_growth_fixed_asymptote()
        mask = coefficient_mask(design, model)
        assert_array_equal(mask[:, 1], [True, False, False, False, False])
        assert mask[:, 0].all()
        mask = coefficient_mask(design, model, support=[(2, 0)])
        assert_array_equal(mask[:, 0], [True, True, False, False, True])
        with pytest.raises(ConfigError):
            coefficient_mask(design, model, support=[(3, 0)])


class TestMStep:
    def test_closed_forms(self, linear_problem, rng):
        obs, design, model, hyper, theta = linear_problem
        hyper = hyper.resolved(1, 0, design.p)
        phi = rng.standard_normal((obs.n, 1)) + 2.0
        S = suff_stats(obs, model, phi, [])
        ps = p_star(theta.beta, theta.alpha, hyper.nu0, hyper.nu1)
        free = coefficient_mask(design, model)
        new = m_step(S, theta, ps, hyper, design, obs.n_tot, free)
        assert_allclose(new.sigma2, (1.0 * 1.0 + S.s1) / (obs.n_tot + 3.0))
        assert_allclose(new.alpha, (ps.sum() + 0.0) / (design.p + design.p - 1.0))
        B = design.augmented @ new.beta_tilde
        R = np.sum((phi - B) ** 2)
        assert_allclose(new.Gamma[0, 0], (0.1 + R) / (obs.n + 1.0 + 2.0))

    def test_mle_mode_has_no_prior(self, linear_problem, rng):
        obs, design, model, hyper, theta = linear_problem
        phi = rng.standard_normal((obs.n, 1))
        S = suff_stats(obs, model, phi, [])
        free = coefficient_mask(design, model, support=[(0, 0)])
        new = m_step(S, theta, None, hyper.resolved(1, 0, design.p), design, obs.n_tot, free,
                     mode="mle")
        X = design.augmented[:, :2]
        coef = np.linalg.lstsq(X, phi, rcond=None)[0]
        assert_allclose(new.beta_tilde[:2], coef, atol=1e-10)
        assert_array_equal(new.beta[1:], 0.0)
        assert_allclose(new.sigma2, S.s1 / obs.n_tot)
        assert_allclose(new.Gamma[0, 0], np.sum((phi - X @ coef) ** 2) / obs.n)

    def test_mle_objective_identity(self, linear_problem, rng):
        obs, design, model, hyper, theta = linear_problem
        hyper = hyper.resolved(1, 0, design.p)
        phi = rng.standard_normal((obs.n, 1))
        S = suff_stats(obs, model, phi, [])
        direct = q1_tilde(obs, design, model, phi, [], theta, None, hyper, mode="mle")
        via = expfam_objective(S, design, theta, None, hyper, obs.n_tot, mode="mle")
        assert_allclose(direct, via, rtol=1e-10)


class TestStochasticApproximation:
    def test_sa_step(self):
        a = SuffStats(1.0, np.eye(1), np.zeros((2, 1)), np.zeros(0), np.zeros(0))
        b = SuffStats(3.0, 3 * np.eye(1), np.ones((2, 1)), np.zeros(0), np.zeros(0))
        assert sa_step(a, b, 1.0).s1 == 3.0
        assert sa_step(a, b, 0.0).s1 == 1.0
        assert_allclose(sa_step(a, b, 0.25).s3, 0.25)
        with pytest.raises(ConfigError):
            sa_step(a, b, 1.5)


class TestAnneal:
    def test_floor_and_correlation(self):
        old = np.array([[4.0, 1.0], [1.0, 2.0]])
        new = np.array([[1.0, 0.3], [0.3, 1.9]])
        out = _anneal(new, old, 0.9)
        assert_allclose(np.diag(out), [3.6, 1.9])
        corr = lambda G: G[0, 1] / np.sqrt(G[0, 0] * G[1, 1])  # noqa: E731
        assert_allclose(corr(out), corr(new))

    def test_no_change_above_floor(self):
        G = np.array([[2.0]])
        assert _anneal(G, np.array([[1.0]]), 0.9) is G


class TestSimulationStep:
    """The S-step leaves the exact conditional posterior of the linear model invariant."""

    def _chain(self, laplace, independent, sweeps=6000):
        obs, design, model = linear_dataset(n=4, p=2, n_i=3, sigma2=0.5, seed=7)
        theta = PopulationParams.initial(1, 2, mu=1.5, Gamma=0.8, sigma2=0.5, beta=[[0.3], [-0.2]])
        rng = np.random.default_rng(2)
        state = LatentState.initial(np.zeros((obs.n, 1)), [])
        draws = np.empty((sweeps, obs.n))
        for k in range(sweeps):
            state = s_step(state, obs, design, model, theta, 1, rng, independent=independent,
                           laplace=laplace)
            draws[k] = state.phi[:, 0]
        mean, var = oracles.linear_posterior(obs, design, theta)
        return draws[500:], mean, var

    @pytest.mark.parametrize("laplace, independent", [(False, True), (False, False), (True, True)])
    def test_posterior_moments(self, laplace, independent):
        draws, mean, var = self._chain(laplace, independent)
        # batch-means standard errors of the chain mean
        batches = draws.reshape(11, -1, draws.shape[1]).mean(axis=1)
        se = batches.std(axis=0, ddof=1) / np.sqrt(batches.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 5 * se + 1e-3)
        assert_allclose(draws.var(axis=0), var, rtol=0.15)

    def test_identical_proposal_always_accepted(self):
        obs, design, model = linear_dataset(n=3, p=1, seed=1)
        theta = PopulationParams.initial(1, 1, mu=1.0, Gamma=1.0, sigma2=1.0)
        state = LatentState.initial(np.ones((3, 1)), [])
        state.scale_phi[:] = 0.0
        out = s_step(state, obs, design, model, theta, 2, np.random.default_rng(0),
                     independent=False)
        assert_array_equal(out.accepted_phi, out.tried_phi)

    def test_laplace_is_exact_for_linear_model(self):
        obs, design, model = linear_dataset(n=6, p=2, seed=4)
        theta = PopulationParams.initial(1, 2, mu=1.0, Gamma=0.5, sigma2=0.2, beta=[[0.1], [0.4]])
        means = design.augmented @ theta.beta_tilde
        mode, prec = laplace_approximation(obs, model, np.zeros(0), means, theta.Gamma, theta.sigma2)
        mean, var = oracles.linear_posterior(obs, design, theta)
        assert_allclose(mode[:, 0], mean, rtol=1e-6)
        assert_allclose(1.0 / prec[:, 0, 0], var, rtol=1e-5)


class TestDrivers:
    def test_deterministic(self, linear_problem):
        obs, design, model, hyper, theta0 = linear_problem
        sched = SaemSchedule(K=40, n_burnin=20)
        a = run_map(obs, design, model, hyper, sched, theta0, seed=5)
        b = run_map(obs, design, model, hyper, sched, theta0, seed=5)
        assert_array_equal(a.traces, b.traces)
        assert a.traces.shape == (41, len(a.trace_names))

    def test_divergence_bound(self, linear_problem):
        obs, design, model, hyper, theta0 = linear_problem
        with pytest.raises(Diverged):
            run_map(obs, design, model, hyper, SaemSchedule(K=5, n_burnin=2), theta0, seed=0,
                    divergence_bound=1e-3)

    def test_dimension_mismatch(self, linear_problem):
        obs, design, model, hyper, _ = linear_problem
        bad = PopulationParams.initial(1, design.p + 1, mu=1.0, Gamma=1.0, sigma2=1.0)
        with pytest.raises(ConfigError):
            run_map(obs, design, model, hyper, SaemSchedule(K=5, n_burnin=2), bad, seed=0)

    def test_mle_keeps_support(self, linear_problem):
        obs, design, model, _, theta0 = linear_problem
        res = run_mle(obs, design, model, [(0, 0), (1, 0)], SaemSchedule(K=80, n_burnin=40),
                      theta0, seed=3)
        th = res.theta_hat
        assert_array_equal(th.beta[2:], 0.0)
        assert_allclose(th.beta[:2, 0], [1.0, -0.5], atol=0.25)
        assert_allclose(th.mu, 2.0, atol=0.25)

    def test_fixed_effects_move_toward_truth(self):
        from saemvs.simulation import gen_dataset, logistic_scenario
        spec = logistic_scenario(n=40, p=8, base_seed=2)
        obs, design, _ = gen_dataset(spec)
        model = spec.model
        hyper = HyperParams(nu0=0.5, nu1=12000.0, sigma2_mu=3000.0 ** 2, nu_Gamma=1.0,
                            lambda_Gamma=1.0, rho2=1200.0, Omega0=20.0)
        beta0 = np.full((8, 1), 100.0)
        theta0 = PopulationParams.initial(1, 8, mu=1400.0, Gamma=5000.0, sigma2=100.0, beta=beta0,
                                          eta=(400.0, 400.0))
        res = run_map(obs, design, model, hyper,
                      SaemSchedule(K=200, n_burnin=140, anneal_decay=0.98, anneal_iters=140),
                      theta0, seed=0)
        assert_allclose(res.theta_hat.eta, [200.0, 300.0], rtol=0.1)
        assert 0.0 < res.acceptance_psi.min() and res.acceptance_psi.max() < 1.0
