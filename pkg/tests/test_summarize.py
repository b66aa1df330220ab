from __future__ import annotations

import csv

import numpy as np
import pytest

from conftest import split_tree
from distbart.data import ColumnBlock, fit_transform, transform_dataset
from distbart.kernel import baseline_features
from distbart.randfeat import DownstreamConfig, fit_distribution_regression
from distbart.sampler import SamplerConfig, posterior_predict, run_backfitting
from distbart.summarize import (
    BasisConfig,
    additive_projection,
    correlation_r2,
    evaluate_representer,
    loco_importance,
    psi_draws,
    reference_points,
    summary_r2,
)
from distbart.synth import BenchmarkConfig, generate_benchmark
from distbart.treeprior import DecisionTree, TreePriorConfig


def ols_on_means(train, rng):
    ds, tr = fit_transform(train)
    F = np.column_stack([np.ones(ds.n_groups), baseline_features(ds, "mean").values])
    coef = np.linalg.lstsq(F, train.y, rcond=None)[0]

    def predict(test):
        dt = transform_dataset(tr, test)
        return np.column_stack([np.ones(dt.n_groups), baseline_features(dt, "mean").values]) @ coef

    return predict


class TestRepresenter:
    def test_single_leaf(self):
        tree = DecisionTree.stump(2).with_leaf_values(np.array([0.7]))
        assert np.all(evaluate_representer([tree], np.random.default_rng(0).uniform(size=(9, 2))) == 0.7)

    def test_sum_over_trees(self, rng):
        trees = [split_tree(2, 0, 0.5, (1.0, 2.0)), split_tree(2, 1, 0.3, (-1.0, 0.5))]
        pts = np.array([[0.2, 0.2], [0.2, 0.9], [0.8, 0.1], [0.8, 0.6]])
        np.testing.assert_array_equal(evaluate_representer(trees, pts), [0.0, 1.5, 1.0, 2.5])

    def test_singleton_group_prediction_is_psi_plus_offset(self, small_data):
        chain = run_backfitting(small_data, SamplerConfig(n_iter=20, burn_in=5, n_trees=4, seed=2))
        x = small_data.X[:1]
        pred = posterior_predict(chain, None, x)
        psi = psi_draws(chain, x)[:, 0]
        np.testing.assert_allclose(pred, psi + chain.y_center, atol=1e-12)

    def test_group_integral_equals_feature_prediction(self, small_data):
        model = fit_distribution_regression(small_data, 30, TreePriorConfig(3, n_trees=30), "lasso",
                                            DownstreamConfig(folds=5), np.random.default_rng(1))
        psi = model.representer(small_data.X)[0]
        integ = np.array([psi[small_data.group_index == i].mean() for i in range(small_data.n_groups)])
        phi_beta = model.design.values @ model.fit.raw_coef + model.fit.intercept
        np.testing.assert_allclose(integ, phi_beta, atol=1e-10)

    def test_reference_subsample(self, small_data):
        a = reference_points(small_data, max_points=50, seed=3)
        b = reference_points(small_data, max_points=50, seed=3)
        assert a.shape == (50, 3)
        np.testing.assert_array_equal(a, b)
        assert reference_points(small_data, max_points=10**6).shape == small_data.X.shape


class TestSummaryR2:
    def test_examples(self, rng):
        psi = rng.standard_normal(100)
        assert summary_r2(psi, psi) == 1.0
        assert summary_r2(psi, np.full(100, psi.mean())) == pytest.approx(0.0, abs=1e-14)
        assert summary_r2(psi, -psi) < 0
        assert summary_r2(np.full(5, 3.0), np.zeros(5)) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            summary_r2([1.0, 2.0], [1.0])


class TestAdditiveProjection:
    def test_additive_input_is_fixed_point(self, rng):
        pts = rng.uniform(size=(2000, 3))
        psi = np.sin(3 * pts[:, 0]) + pts[:, 1] ** 2 - 0.5 * pts[:, 2]
        # cubic pieces in the spline span are reproduced exactly
        psi_span = pts[:, 0] ** 3 - pts[:, 1] + 2.0
        out = additive_projection(np.vstack([psi_span, psi]), pts)
        assert out.r2[0] == pytest.approx(1.0, abs=1e-10)
        assert out.r2[1] > 0.9999

    def test_product_gives_six_sevenths(self, rng):
        pts = rng.uniform(size=(100_000, 2))
        out = additive_projection(pts[:, 0] * pts[:, 1], pts)
        assert abs(out.r2[0] - 6 / 7) < 0.02

    def test_constant(self, rng):
        pts = rng.uniform(size=(300, 2))
        out = additive_projection(np.full(300, 4.2), pts)
        assert out.r2[0] == 1.0
        assert out.intercept[0] == pytest.approx(4.2)

    def test_residual_orthogonal_to_basis(self, rng):
        pts = rng.uniform(size=(1500, 3))
        psi = np.vstack([pts[:, 0] * pts[:, 1] + pts[:, 2], np.exp(pts.sum(axis=1))])
        out = additive_projection(psi, pts)
        B = out.design / np.linalg.norm(out.design, axis=0)
        resid = psi - out.fitted
        assert np.max(np.abs(B.T @ resid.T)) < 1e-8

    def test_affine_invariance(self, rng):
        pts = rng.uniform(size=(1000, 2))
        psi = pts[:, 0] * pts[:, 1]
        a = additive_projection(psi, pts).r2[0]
        # affine maps of the reference move the knots with the points
        moved = 0.2 + 0.5 * pts
        b = additive_projection(psi, moved).r2[0]
        assert a == pytest.approx(b, abs=1e-10)

    def test_centering_identity(self, rng):
        pts = rng.uniform(size=(800, 3))
        psi = np.vstack([pts[:, 0] * pts[:, 2] + 1.0, pts[:, 1] - pts[:, 0] ** 2])
        out = additive_projection(psi, pts)
        parts = sum(v for v in out.component_reference.values())
        for d in range(2):
            for v in out.component_reference.values():
                assert abs(v[d].mean()) < 1e-12
            assert out.intercept[d] == pytest.approx(psi[d].mean(), abs=1e-12)
            np.testing.assert_allclose(out.intercept[d] + parts[d], out.fitted[d], atol=1e-10)

    def test_categorical_block(self, rng):
        level = rng.integers(0, 3, 600)
        x = rng.uniform(size=600)
        pts = np.column_stack([x, np.eye(3)[level]])
        blocks = [ColumnBlock("x", "continuous", (0,)), ColumnBlock("c", "categorical", (1, 2, 3), ("a", "b", "c"))]
        out = additive_projection(x + np.array([0.0, 1.0, -1.0])[level], pts, blocks=blocks)
        assert out.r2[0] == pytest.approx(1.0, abs=1e-10)
        g = out.component("c").mean
        np.testing.assert_allclose(g - g[0], [0.0, 1.0, -1.0], atol=1e-8)
        assert not out.warnings

    def test_redundant_columns_warn(self, rng):
        level = rng.integers(0, 3, 600)
        onehot = np.eye(3)[level]
        pts = np.column_stack([rng.uniform(size=600), onehot, onehot[:, 0]])
        blocks = [ColumnBlock("x", "continuous", (0,)), ColumnBlock("c", "categorical", (1, 2, 3), ("a", "b", "c")),
                  ColumnBlock("dup", "categorical", (2, 4), ("b", "a"))]
        psi = pts[:, 0] + onehot[:, 1]
        out = additive_projection(psi, pts, blocks=blocks)
        assert out.r2[0] == pytest.approx(1.0, abs=1e-10)
        assert out.reference["rank"] == out.reference["basis_columns"] - 1
        assert "rank deficient" in out.warnings[0]

    def test_too_few_points(self, rng):
        pts = rng.uniform(size=(5, 2))
        with pytest.raises(ValueError, match="reference points"):
            additive_projection(pts[:, 0], pts)

    def test_bands_and_export(self, rng, tmp_path):
        pts = rng.uniform(size=(500, 2))
        psi = pts[:, 0][None] * rng.normal(1, 0.1, (30, 1)) + pts[:, 1][None]
        out = additive_projection(psi, pts, cfg=BasisConfig(n_interior_knots=5), grid_size=11)
        comp = out.component("x0")
        lo, hi = comp.band()
        assert np.all(lo <= comp.mean + 1e-12) and np.all(comp.mean <= hi + 1e-12)
        paths = out.write_csv(tmp_path)
        rows = list(csv.reader(paths[0].open()))
        assert rows[0] == ["grid", "mean", "lo", "hi"] and len(rows) == 12


class TestLoco:
    def test_correlation_r2(self):
        assert correlation_r2([1, 2, 3], [2, 4, 6.5]) == pytest.approx(np.corrcoef([1, 2, 3], [2, 4, 6.5])[0, 1] ** 2)
        assert correlation_r2([1, 1, 1], [1, 2, 3]) == 0.0
        with pytest.raises(ValueError, match="constant"):
            correlation_r2([1, 2, 3], [5, 5, 5])

    def test_irrelevant_covariate(self):
        raw, _, _ = generate_benchmark(BenchmarkConfig("normal", "main-effects", N=150, P=3, M=30, seed=4,
                                                       weights=(1.0, 1.0, 0.0)))
        imps = []
        for rep in range(10):
            report = loco_importance(raw, ols_on_means, rng=np.random.default_rng(rep))
            imps.append(report.importance)
        imps = np.array(imps)
        assert abs(imps[:, 2].mean()) < 0.05
        assert np.all(imps[:, 0] > 0.1)

    def test_single_relevant_covariate(self):
        raw, _, _ = generate_benchmark(BenchmarkConfig("normal", "main-effects", N=150, P=2, M=30, seed=5,
                                                       weights=(1.0, 0.0)))
        report = loco_importance(raw, ols_on_means, rng=np.random.default_rng(0))
        assert report.r2_full > 0.8
        assert report.r2_reduced[0] < 0.1
        assert report.importance[0] == pytest.approx(report.r2_full, abs=0.1)

    def test_split_is_reproducible_and_full_fit_once(self, tmp_path):
        raw, _, _ = generate_benchmark(BenchmarkConfig("normal", "main-effects", N=40, P=2, M=10, seed=1))
        calls = []

        def counting(train, rng):
            calls.append(train.covariate_names)
            return ols_on_means(train, rng)

        a = loco_importance(raw, counting, rng=np.random.default_rng(8))
        b = loco_importance(raw, ols_on_means, rng=np.random.default_rng(8))
        np.testing.assert_array_equal(a.test_index, b.test_index)
        assert a.r2_full == b.r2_full and len(a.importance) == 2
        assert len(calls) == 3 and list(calls[0]) == list(raw.covariate_names)
        a.write_csv(tmp_path / "loco.csv")
        rows = list(csv.reader((tmp_path / "loco.csv").open()))
        assert rows[0] == ["covariate", "r2_full", "r2_reduced", "importance"] and len(rows) == 3

    def test_split_too_small(self):
        raw, _, _ = generate_benchmark(BenchmarkConfig("normal", "main-effects", N=3, P=2, M=5, seed=1))
        with pytest.raises(ValueError, match="two groups"):
            loco_importance(raw, ols_on_means)
