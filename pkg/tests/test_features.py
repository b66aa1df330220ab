from __future__ import annotations

import csv

import numpy as np
import pytest

from conftest import random_groups, split_tree
from distbart.data import from_arrays
from distbart.features import (
    DegenerateDesignError,
    build_design_matrix,
    featurize_like,
    group_leaf_probabilities,
    write_feature_csv,
)
from distbart.treeprior import DecisionTree, Node, TreePriorConfig, leaf_regions, sample_tree_from_prior


def _brute_force(tree, groups):
    regions = leaf_regions(tree)
    out = np.zeros((len(groups), len(regions)))
    for i, g in enumerate(groups):
        for x in g:
            for ell, lo, hi in regions:
                # half-open boxes, closed at the cube's lower face
                if np.all(((x > lo) | ((lo == 0) & (x == 0))) & (x <= hi)):
                    out[i, ell] += 1
        out[i] /= len(g)
    return out


class TestLeafProbabilities:
    def test_single_leaf(self, rng):
        data = from_arrays(random_groups(rng, 4, 5, 2))
        np.testing.assert_array_equal(group_leaf_probabilities(DecisionTree.stump(2), data), 1.0)

    def test_counting(self):
        data = from_arrays([np.array([[0.2, 0.0], [0.8, 0.0]])])
        np.testing.assert_array_equal(group_leaf_probabilities(split_tree(2), data), [[0.5, 0.5]])

    def test_singleton_group_is_one_hot(self):
        data = from_arrays([np.array([[0.9, 0.1]])])
        np.testing.assert_array_equal(group_leaf_probabilities(split_tree(2), data), [[0.0, 1.0]])

    def test_matches_box_membership_loop(self, rng):
        cfg = TreePriorConfig(3, beta=0.5)
        groups = random_groups(rng, 6, 15, 3, spread=0.3)
        groups[0][0] = 0.0  # exercise the lower cube face
        data = from_arrays(groups)
        for _ in range(10):
            tree = sample_tree_from_prior(cfg, rng)
            np.testing.assert_allclose(group_leaf_probabilities(tree, data), _brute_force(tree, groups), atol=1e-15)

    def test_refinement_consistency(self, rng):
        coarse = split_tree(2, 0, 0.5)
        fine = DecisionTree({0: Node(0, 0.5, 1, 2), 1: Node(1, 0.4, 3, 4), 2: Node(), 3: Node(), 4: Node()}, 2)
        data = from_arrays(random_groups(rng, 8, 12, 2, spread=0.3))
        a, b = group_leaf_probabilities(coarse, data), group_leaf_probabilities(fine, data)
        np.testing.assert_allclose(a[:, 0], b[:, 0] + b[:, 1], atol=1e-15)
        np.testing.assert_allclose(a[:, 1], b[:, 2], atol=1e-15)

    def test_duplicating_rows_leaves_features_unchanged(self, rng):
        groups = random_groups(rng, 5, 7, 2)
        tree = sample_tree_from_prior(TreePriorConfig(2, beta=0.5), rng)
        a = group_leaf_probabilities(tree, from_arrays(groups))
        b = group_leaf_probabilities(tree, from_arrays([np.vstack([g, g]) for g in groups]))
        np.testing.assert_array_equal(a, b)


class TestDesignMatrix:
    def test_blocks_sum_to_one(self, rng):
        cfg = TreePriorConfig(3, beta=0.5)
        trees = [sample_tree_from_prior(cfg, rng) for _ in range(12)]
        dm = build_design_matrix(trees, from_arrays(random_groups(rng, 9, 11, 3)), drop_constant=False)
        for t in range(len(trees)):
            np.testing.assert_array_equal(dm.block(t).sum(axis=1), 1.0)

    def test_all_stumps_is_degenerate(self, rng):
        data = from_arrays(random_groups(rng, 5, 5, 2))
        with pytest.raises(DegenerateDesignError, match="degenerate design"):
            build_design_matrix([DecisionTree.stump(2)] * 3, data)

    def test_identical_groups_make_every_column_constant(self, rng):
        g = random_groups(rng, 1, 10, 2)[0]
        trees = [sample_tree_from_prior(TreePriorConfig(2, beta=0.5), rng) for _ in range(5)]
        dm = build_design_matrix(trees, from_arrays([g, g]), drop_constant=False)
        assert np.all(np.ptp(dm.values, axis=0) == 0)

    def test_dropping_records_columns(self, rng):
        data = from_arrays(random_groups(rng, 10, 10, 2))
        trees = [split_tree(2, 0, 0.5), DecisionTree.stump(2), split_tree(2, 1, 1e-9)]
        dm = build_design_matrix(trees, data)
        assert (1, 0) in dm.dropped
        assert len(dm.columns) + len(dm.dropped) == 5
        assert all(np.ptp(dm.values, axis=0) > 0)

    def test_parallel_matches_serial_bitwise(self, rng):
        cfg = TreePriorConfig(3, beta=0.5)
        trees = [sample_tree_from_prior(cfg, rng) for _ in range(40)]
        data = from_arrays(random_groups(rng, 25, 30, 3))
        a = build_design_matrix(trees, data, n_jobs=1)
        b = build_design_matrix(trees, data, n_jobs=4)
        assert a.values.tobytes() == b.values.tobytes()
        assert a.columns == b.columns

    def test_featurize_like_reuses_kept_columns(self, rng):
        cfg = TreePriorConfig(2, beta=0.5)
        trees = [sample_tree_from_prior(cfg, rng) for _ in range(8)]
        data = from_arrays(random_groups(rng, 12, 9, 2))
        dm = build_design_matrix(trees, data)
        np.testing.assert_array_equal(featurize_like(dm, trees, data), dm.values)

    def test_csv_export(self, tmp_path, rng):
        data = from_arrays(random_groups(rng, 3, 4, 2))
        dm = build_design_matrix([split_tree(2)], data, drop_constant=False)
        path = tmp_path / "phi.csv"
        write_feature_csv(path, dm, data.group_ids)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["group_id", "phi_t0_l0", "phi_t0_l1"]
        np.testing.assert_array_equal(np.array(rows[1:])[:, 1:].astype(float), dm.values)
