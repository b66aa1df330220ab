from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import integrate, stats

from conftest import random_groups
from distbart.data import from_arrays
from distbart.sampler import (
    BackfittingSampler,
    PosteriorChain,
    SamplerConfig,
    default_sigma_rate,
    integrated_log_likelihood,
    leaf_posterior,
    posterior_predict,
    run_backfitting,
    sample_leaf_values,
    simulate_outcomes,
    update_sigma2,
)
from distbart.treeprior import DecisionTree, TreePriorConfig, sample_tree_from_prior


def _dense_loglik(R, Phi, sigma2, sigma_mu2, T, eta=1.0):
    cov = (sigma_mu2 / T) * Phi @ Phi.T + (sigma2 / eta) * np.eye(len(R))
    return stats.multivariate_normal(np.zeros(len(R)), cov).logpdf(R)


def _tiny_chain(rng, **kw):
    data = from_arrays(random_groups(rng, 20, 8, 2), y=rng.standard_normal(20))
    cfg = SamplerConfig(n_iter=30, burn_in=10, n_trees=5, seed=11, **kw)
    return data, run_backfitting(data, cfg)


class TestIntegratedLikelihood:
    def test_one_dimensional_closed_form(self):
        val = integrated_log_likelihood(np.zeros(1), np.ones((1, 1)), 1.0, 1.0, 1)
        assert val == pytest.approx(-0.5 * math.log(2 * math.pi * 2), abs=1e-14)

    def test_zero_column_contributes_nothing(self, rng):
        Phi = rng.uniform(size=(12, 3))
        R = rng.standard_normal(12)
        padded = np.column_stack([Phi, np.zeros(12)])
        assert integrated_log_likelihood(R, padded, 0.7, 1.3, 4) == pytest.approx(
            integrated_log_likelihood(R, Phi, 0.7, 1.3, 4), abs=1e-12)

    def test_matches_dense_gaussian(self, rng):
        Phi = rng.dirichlet(np.ones(5), size=50)
        R = rng.standard_normal(50)
        assert integrated_log_likelihood(R, Phi, 0.4, 2.0, 7, 0.8) == pytest.approx(
            _dense_loglik(R, Phi, 0.4, 2.0, 7, 0.8), rel=1e-8)

    def test_temperature_is_a_variance_rescaling(self, rng):
        Phi, R = rng.uniform(size=(9, 3)), rng.standard_normal(9)
        a = integrated_log_likelihood(R, Phi, 0.3, 1.0, 2, eta=0.5)
        b = integrated_log_likelihood(R, Phi, 0.6, 1.0, 2, eta=1.0)
        assert a == b

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            integrated_log_likelihood(np.array([np.nan]), np.ones((1, 1)), 1.0, 1.0, 1)


class TestLeafConditional:
    def test_identity_design_scalar_form(self, rng):
        R = rng.standard_normal(6)
        mean, _ = leaf_posterior(R, np.eye(6), 0.5, 2.0, 3)
        np.testing.assert_allclose(mean, R / (1 + 3 * 0.5 / 2.0), rtol=1e-13)

    def test_vanishing_ridge_gives_least_squares(self, rng):
        Phi, R = rng.uniform(size=(30, 4)), rng.standard_normal(30)
        mean, _ = leaf_posterior(R, Phi, 1.0, 1e8, 1)
        np.testing.assert_allclose(mean, np.linalg.lstsq(Phi, R, rcond=None)[0], rtol=1e-6)

    def test_precision_factor(self, rng):
        Phi, R = rng.uniform(size=(10, 3)), rng.standard_normal(10)
        _, chol = leaf_posterior(R, Phi, 0.8, 1.5, 4, eta=0.5)
        np.testing.assert_allclose(chol @ chol.T, (0.5 / 0.8) * Phi.T @ Phi + (4 / 1.5) * np.eye(3), rtol=1e-12)

    def test_draw_moments(self, rng):
        Phi, R = rng.dirichlet(np.ones(3), size=15), rng.standard_normal(15)
        draws = np.array([sample_leaf_values(R, Phi, 0.5, 1.0, 2, 1.0, rng) for _ in range(20_000)])
        cov = np.linalg.inv(2.0 * Phi.T @ Phi + 2.0 * np.eye(3))
        mean = cov @ (2.0 * Phi.T @ R)
        se = np.sqrt(np.diag(cov) / len(draws))
        assert np.all(np.abs(draws.mean(0) - mean) < 4 * se)
        np.testing.assert_allclose(np.cov(draws.T), cov, rtol=0.05, atol=0.02 * cov.max())


class TestSigmaUpdate:
    def test_no_data_gives_prior(self, rng):
        draws = np.array([update_sigma2(np.zeros(0), 3.0, 2.0, 1.0, rng) for _ in range(20_000)])
        assert stats.kstest(draws, stats.invgamma(3.0, scale=2.0).cdf).statistic < 0.015

    def test_tempered_conditional_matches_grid(self, rng):
        r = rng.standard_normal(8)
        a, b, eta = 1.5, 0.6, 0.5
        grid = np.linspace(1e-3, 8.0, 10_000)
        logd = stats.invgamma(a, scale=b).logpdf(grid) - 0.5 * eta * (r.size * np.log(grid) + r @ r / grid)
        dens = np.exp(logd - logd.max())
        cdf = integrate.cumulative_trapezoid(dens, grid, initial=0.0)
        cdf /= cdf[-1]
        draws = np.array([update_sigma2(r, a, b, eta, rng) for _ in range(100_000)])
        ks = stats.kstest(draws, lambda x: np.interp(x, grid, cdf)).statistic
        assert ks < 0.01

    def test_half_temperature_quarter_shape(self):
        # draw = rate / Gamma(shape); the mean of 1/draw is shape / rate
        r = np.ones(8)
        g = np.random.default_rng(0)
        inv = np.mean([1 / update_sigma2(r, 2.0, 1.0, 0.5, g) for _ in range(40_000)])
        assert inv == pytest.approx((2.0 + 8 / 4) / (1.0 + 0.5 * 8 / 2), rel=0.02)

    def test_default_rate_sets_prior_median(self):
        b = default_sigma_rate(1.5)
        assert stats.invgamma(1.5, scale=b).median() == pytest.approx(1.0, rel=1e-10)


class TestBackfitting:
    def test_draw_count_and_shapes(self, rng):
        data, chain = _tiny_chain(rng, thin=2)
        assert chain.n_draws == 10
        assert chain.fitted.shape == (10, 20)
        assert all(len(t) == 5 for t in chain.topologies)

    def test_cached_fit_matches_recomputation(self, rng):
        data = from_arrays(random_groups(rng, 15, 6, 2), y=rng.standard_normal(15))
        prior = TreePriorConfig(2, n_trees=6, sigma_mu2=0.5)
        s = BackfittingSampler(data, prior, 1.5, default_sigma_rate(1.5), rng=np.random.default_rng(1))
        s.initialize()
        for _ in range(20):
            s.sweep(data.y)
            assert np.max(np.abs(s.fit - s.recompute_fit())) < 1e-10

    def test_reproducible_and_cache_toggle_is_bitwise(self, rng):
        data = from_arrays(random_groups(rng, 20, 8, 2), y=rng.standard_normal(20))
        base = dict(n_iter=25, burn_in=5, n_trees=6, seed=4)
        a = run_backfitting(data, SamplerConfig(**base))
        b = run_backfitting(data, SamplerConfig(**base))
        c = run_backfitting(data, SamplerConfig(**base, cache_membership=False))
        d = run_backfitting(data, SamplerConfig(**base, n_jobs=3))
        for other in (b, c, d):
            assert a.fitted.tobytes() == other.fitted.tobytes()
            assert a.sigma2.tobytes() == other.sigma2.tobytes()

    def test_total_shrinkage_returns_mean(self, rng):
        data = from_arrays(random_groups(rng, 20, 8, 2), y=3 + rng.standard_normal(20))
        chain = run_backfitting(data, SamplerConfig(n_iter=20, burn_in=5, n_trees=5, sigma_mu2=1e-12, seed=2))
        np.testing.assert_allclose(chain.fitted, data.y.mean(), atol=1e-5)

    def test_affine_equivariance(self, rng):
        groups = random_groups(rng, 20, 8, 2)
        y = rng.standard_normal(20)
        cfg = SamplerConfig(n_iter=20, burn_in=5, n_trees=5, seed=8)
        a = run_backfitting(from_arrays(groups, y=y), cfg)
        b = run_backfitting(from_arrays(groups, y=2.5 * y + 7.0), cfg)
        np.testing.assert_allclose(b.fitted, 2.5 * a.fitted + 7.0, rtol=1e-8)

    def test_recovers_signal(self, rng):
        groups = random_groups(rng, 60, 30, 2)
        data = from_arrays(groups)
        truth = [sample_tree_from_prior(TreePriorConfig(2, n_trees=10), rng) for _ in range(10)]
        f, y = simulate_outcomes(truth, data, 0.02, rng)
        chain = run_backfitting(from_arrays(groups, y=y), SamplerConfig(n_iter=300, burn_in=100, n_trees=20))
        rmse = np.sqrt(np.mean((chain.fitted.mean(0) - f) ** 2))
        assert rmse < 0.5 * np.std(f)

    def test_needs_two_groups(self):
        with pytest.raises(ValueError):
            run_backfitting(from_arrays([np.full((3, 1), 0.5)], y=[1.0]), SamplerConfig(n_iter=2, burn_in=0))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(n_iter=5, burn_in=5)
        with pytest.raises(ValueError):
            SamplerConfig(eta=0.0)
        with pytest.raises(ValueError):
            SamplerConfig(sigma_a=-1)


class TestPrediction:
    def test_training_group_reproduces_fitted_draws(self, rng):
        data, chain = _tiny_chain(rng)
        X = data.X[data.group_index == 3]
        np.testing.assert_allclose(posterior_predict(chain, None, X), chain.fitted[:, 3], atol=1e-10)

    def test_duplicated_samples_same_prediction(self, rng):
        _, chain = _tiny_chain(rng)
        X = rng.uniform(size=(7, 2))
        np.testing.assert_allclose(posterior_predict(chain, None, np.vstack([X, X])),
                                   posterior_predict(chain, None, X), atol=1e-12)

    def test_single_leaf_chain(self):
        trees = [DecisionTree.stump(2), DecisionTree.stump(2)]
        chain = PosteriorChain([trees], [[np.array([0.5]), np.array([-0.25])]], np.array([1.0]),
                               np.zeros((1, 1)), y_center=2.0, y_scale=4.0, prior=TreePriorConfig(2, n_trees=2))
        pred = posterior_predict(chain, None, np.random.default_rng(0).uniform(size=(5, 2)))
        np.testing.assert_allclose(pred, 2.0 + 4.0 * 0.25)

    def test_empty_chain(self):
        chain = PosteriorChain([], [], np.zeros(0), np.zeros((0, 2)), 0.0, 1.0, TreePriorConfig(1))
        with pytest.raises(ValueError):
            posterior_predict(chain, None, np.zeros((1, 1)))


class TestSerialization:
    def test_json_round_trip(self, rng, tmp_path):
        data, chain = _tiny_chain(rng)
        path = tmp_path / "chain.json"
        chain.save(path)
        back = PosteriorChain.load(path)
        np.testing.assert_array_equal(back.fitted, chain.fitted)
        np.testing.assert_allclose(back.predict_transformed(data), chain.fitted, atol=1e-10)
        assert back.config == chain.config
        back.save(tmp_path / "again.json")
        assert (tmp_path / "again.json").read_bytes() == path.read_bytes()

    def test_model_file_has_no_thread_count(self, rng):
        _, chain = _tiny_chain(rng)
        assert "n_jobs" not in chain.to_dict()["config"]

    def test_csv_export(self, rng, tmp_path):
        _, chain = _tiny_chain(rng)
        path = tmp_path / "chain.csv"
        chain.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("draw,sigma2,f_1,")
        assert len(lines) == chain.n_draws + 1
        assert float(lines[1].split(",")[2]) == chain.fitted[0, 0]
