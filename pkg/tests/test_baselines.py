import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from sklearn.linear_model import Lasso, MultiTaskLasso

from saemvs.baselines import (cross_validate, default_lambda_grid, fit_individual, fold_ids,
                              lambda_max, lasso_multivariate, lasso_univariate, two_step_select)
from saemvs.errors import ConfigError, ShapeMismatch, TooFewConverged
from saemvs.model import one_compartment_pk
from saemvs.simulation import gen_dataset, pk_scenario

import oracles


def _sparse_problem(rng, n=60, p=25, q=1, noise=0.5):
    X = rng.standard_normal((n, p))
    B = np.zeros((p, q))
    B[:3] = rng.uniform(1, 3, (3, q)) * rng.choice([-1, 1], (3, q))
    Y = 1.5 + X @ B + noise * rng.standard_normal((n, q))
    return X, Y


class TestLassoPath:
    def test_matches_sklearn(self, rng):
        X, Y = _sparse_problem(rng)
        lams = default_lambda_grid(Y, X, count=15, ratio=0.02)
        path = lasso_univariate(Y[:, 0], X, lams, tol=1e-12)
        for k in (0, 4, 9, 14):
            ref = Lasso(alpha=lams[k], tol=1e-12, max_iter=100_000).fit(X, Y[:, 0])
            # the two solvers stop on different criteria
            assert_allclose(path.coefs[k], ref.coef_, atol=1e-5)
            assert_allclose(path.intercepts[k], ref.intercept_, atol=1e-5)

    def test_group_matches_sklearn(self, rng):
        X, Y = _sparse_problem(rng, q=2)
        lams = default_lambda_grid(Y, X, count=10, ratio=0.05)
        path = lasso_multivariate(Y, X, lams, tol=1e-12)
        for k in (0, 5, 9):
            ref = MultiTaskLasso(alpha=lams[k], tol=1e-12, max_iter=100_000).fit(X, Y)
            assert_allclose(path.coefs[k], ref.coef_.T, atol=1e-5)

    def test_lambda_max_is_first_zero(self, rng):
        X, Y = _sparse_problem(rng)
        lmax = lambda_max(Y, X)
        path = lasso_univariate(Y[:, 0], X, [lmax, 0.99 * lmax])
        assert_array_equal(path.coefs[0], 0.0)
        assert np.count_nonzero(path.coefs[1]) >= 1

    def test_default_ratio(self, rng):
        wide = default_lambda_grid(rng.standard_normal(10), rng.standard_normal((10, 20)))
        tall = default_lambda_grid(rng.standard_normal(30), rng.standard_normal((30, 20)))
        assert len(wide) == 100
        assert_allclose(wide[-1] / wide[0], 1e-2)
        assert_allclose(tall[-1] / tall[0], 1e-4)

    def test_orthonormal_soft_threshold(self, rng):
        X = oracles.orthonormal_design(50, 8, rng)
        y = X @ rng.standard_normal(8) + rng.standard_normal(50)
        lam = 0.4
        path = lasso_univariate(y, X, [lam], tol=1e-14)
        assert_allclose(path.coefs[0], oracles.soft_threshold(X.T @ (y - y.mean()) / 50, lam),
                        atol=1e-8)

    @pytest.mark.parametrize("grid", [[0.1, 0.2], [-1.0], [0.3, 0.3]])
    def test_bad_grid(self, rng, grid):
        with pytest.raises(ConfigError):
            lasso_univariate(rng.standard_normal(10), rng.standard_normal((10, 3)), grid)

    def test_row_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            lasso_univariate(rng.standard_normal(9), rng.standard_normal((10, 3)))


class TestCrossValidation:
    def test_one_standard_error_rule(self, rng):
        X, Y = _sparse_problem(rng, n=80)
        path = cross_validate(Y[:, 0], X, folds=5, seed=3)
        lams, mse, se = path.lambda_values, path.cv_mse, path.cv_se
        i_min = int(np.argmin(mse))
        assert path.lambda_min == lams[i_min]
        ok = mse <= mse[i_min] + se[i_min]
        # largest lambda (first on the decreasing grid) inside the band
        assert path.lambda_1se == lams[np.flatnonzero(ok)[0]]
        assert path.lambda_1se >= path.lambda_min
        assert path.coefs.shape == (100, X.shape[1])
        assert set(np.flatnonzero(path.coefs[path.index_1se])) >= {0, 1, 2}

    def test_leave_one_out(self, rng):
        X, Y = _sparse_problem(rng, n=12, p=4)
        y = Y[:, 0]
        lams = default_lambda_grid(y, X, count=6, ratio=0.05)
        path = cross_validate(y, X, folds=12, lambda_grid=lams, tol=1e-12)
        errs = np.empty((12, 6))
        for i in range(12):
            keep = np.arange(12) != i
            for k, lam in enumerate(lams):
                fit = Lasso(alpha=lam, tol=1e-12, max_iter=100_000).fit(X[keep], y[keep])
                errs[i, k] = (y[i] - fit.predict(X[i:i + 1])[0]) ** 2
        assert_allclose(path.cv_mse, errs.mean(axis=0), rtol=1e-4)
        assert_allclose(path.cv_se, errs.std(axis=0, ddof=1) / np.sqrt(12), rtol=1e-4)

    def test_fold_ids(self):
        ids = fold_ids(23, 5, seed=1)
        assert_array_equal(np.bincount(ids), [5, 5, 5, 4, 4])
        assert_array_equal(ids, fold_ids(23, 5, seed=1))
        with pytest.raises(ConfigError):
            fold_ids(4, 5)


class TestIndividualFit:
    def test_noise_free_pk(self):
        model = one_compartment_pk()
        t = np.array([0.05, 0.15, 0.25, 0.4, 0.5, 0.8, 1.0, 2.0, 7.0, 12.0, 24.0, 40.0])
        truth = np.array([1.5, 2.4])
        y = model.eval(np.tile(truth, (len(t), 1)), np.zeros(0), t)
        fit = fit_individual(y, t, model, phi_init=[1.0, 3.0])
        assert fit.converged
        assert_allclose(fit.phi_hat, truth, rtol=1e-6)
        assert fit.residual_ss < 1e-12

    def test_too_few_points(self):
        with pytest.raises(ShapeMismatch):
            fit_individual([1.0], [1.0], one_compartment_pk(), [1.0, 1.0])


class TestTwoStep:
    @pytest.fixture(scope="class")
    @classmethod
    def pk_data(cls):
        spec = pk_scenario(n=80, p=20, base_seed=5)
        return spec, gen_dataset(spec)

    @pytest.mark.parametrize("variant", ["gaussian", "mgaussian"])
    def test_recovers_strong_effects(self, pk_data, variant):
        spec, (obs, design, truth) = pk_data
        res = two_step_select(obs, design, spec.model, variant, phi_init=spec.true_mu, seed=1)
        assert res.n_converged == obs.n
        assert_allclose(res.phi_hat, truth.phi, rtol=0.1)
        sel = res.support.as_mask(20, 2)
        assert sel[[0, 1], 0].all() and sel[[2, 3], 1].all()
        if variant == "mgaussian":
            assert_array_equal(sel[:, 0], sel[:, 1])

    def test_unknown_variant(self, pk_data):
        spec, (obs, design, _) = pk_data
        with pytest.raises(ConfigError):
            two_step_select(obs, design, spec.model, "ridge", phi_init=spec.true_mu)

    def test_too_few_converged(self, pk_data, monkeypatch):
        from saemvs import baselines
        spec, (obs, design, _) = pk_data

        def failing(y, t, model, phi_init, psi=None, max_nfev=2000):
            raise baselines.NotConverged("forced")

        monkeypatch.setattr(baselines, "fit_individual", failing)
        with warnings.catch_warnings(), pytest.raises(TooFewConverged):
            warnings.simplefilter("ignore")
            two_step_select(obs, design, spec.model, phi_init=spec.true_mu)
