"""Leaf-occupancy features: the fraction of each group's samples in each leaf."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import GroupedSamples
from .treeprior import DecisionTree


class DegenerateDesignError(ValueError):
    pass


def _chunks(n: int, n_jobs: int) -> list[slice]:
    n_jobs = max(1, min(n_jobs, n))
    edges = np.linspace(0, n, n_jobs + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def route_points(tree: DecisionTree, X: np.ndarray, n_jobs: int = 1) -> np.ndarray:
    """Leaf node id of every row; chunked over rows when ``n_jobs > 1``."""
    if n_jobs <= 1 or X.shape[0] < 2 * n_jobs:
        return tree.route(X)
    out = np.empty(X.shape[0], dtype=np.intp)
    slices = _chunks(X.shape[0], n_jobs)
    with ThreadPoolExecutor(n_jobs) as pool:
        for sl, res in zip(slices, pool.map(lambda s: tree.route(X[s]), slices)):
            out[sl] = res
    return out


def leaf_counts(tree: DecisionTree, leaf_nodes: np.ndarray, group_index: np.ndarray, n_groups: int) -> np.ndarray:
    """Integer ``n_groups x n_leaves`` counts from per-point leaf node ids."""
    L = tree.n_leaves
    pos = tree.leaf_position[leaf_nodes]
    return np.bincount(group_index * L + pos, minlength=n_groups * L).reshape(n_groups, L)


def group_leaf_probabilities(tree: DecisionTree, data: GroupedSamples, n_jobs: int = 1) -> np.ndarray:
    """``phi[i, l]`` = share of group ``i``'s samples falling in leaf ``l``."""
    nodes = route_points(tree, data.X, n_jobs)
    counts = leaf_counts(tree, nodes, data.group_index, data.n_groups)
    return counts / data.sizes[:, None]


@dataclass(frozen=True)
class DesignMatrix:
    """Group-by-feature matrix with per-column provenance.

    ``columns[k] = (t, l)`` names tree ``t`` and leaf ``l`` for tree features;
    baseline features use ``(-1, k)``. ``dropped`` lists the metadata of
    columns removed as constant.
    """

    values: np.ndarray
    columns: tuple[tuple[int, int], ...]
    dropped: tuple[tuple[int, int], ...] = ()
    names: tuple[str, ...] = ()

    @property
    def shape(self):
        return self.values.shape

    def block(self, t: int) -> np.ndarray:
        idx = [k for k, (tt, _) in enumerate(self.columns) if tt == t]
        return self.values[:, idx]


def build_design_matrix(trees: Sequence[DecisionTree], data: GroupedSamples, drop_constant: bool = True,
                        n_jobs: int = 1) -> DesignMatrix:
    """Concatenate per-tree leaf-probability blocks.

    With ``drop_constant``, columns whose value is identical across groups
    are removed and recorded in ``dropped``.
    """
    if n_jobs > 1 and len(trees) > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            blocks = list(pool.map(lambda t: group_leaf_probabilities(t, data), trees))
    else:
        blocks = [group_leaf_probabilities(t, data) for t in trees]
    values = np.hstack(blocks)
    meta = tuple((t, ell) for t, tree in enumerate(trees) for ell in range(tree.n_leaves))
    names = tuple(f"phi_t{t}_l{ell}" for t, ell in meta)
    if not drop_constant:
        return DesignMatrix(values, meta, (), names)
    keep = np.ptp(values, axis=0) > 0 if values.shape[0] else np.zeros(values.shape[1], bool)
    if not keep.any():
        raise DegenerateDesignError("degenerate design: every feature column is constant across groups")
    dropped = tuple(m for m, k in zip(meta, keep) if not k)
    return DesignMatrix(
        values[:, keep],
        tuple(m for m, k in zip(meta, keep) if k),
        dropped,
        tuple(n for n, k in zip(names, keep) if k),
    )


def featurize_like(design: DesignMatrix, trees: Sequence[DecisionTree], data: GroupedSamples,
                   n_jobs: int = 1) -> np.ndarray:
    """Features of new groups restricted to the columns kept in ``design``."""
    full = build_design_matrix(trees, data, drop_constant=False, n_jobs=n_jobs)
    index = {m: k for k, m in enumerate(full.columns)}
    return full.values[:, [index[m] for m in design.columns]]


def write_feature_csv(path, design: DesignMatrix, group_ids: Sequence[str]) -> None:
    names = design.names or tuple(f"phi_t{t}_l{ell}" for t, ell in design.columns)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_id", *names])
        for gid, row in zip(group_ids, design.values):
            w.writerow([gid, *(repr(float(v)) for v in row)])
