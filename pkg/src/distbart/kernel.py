"""Tree-induced kernels, mean embeddings and the kernel-feature baselines."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist, pdist

from .data import GroupedSamples
from .features import DesignMatrix, build_design_matrix
from .treeprior import DecisionTree, TreePriorConfig, sample_tree_from_prior

log = logging.getLogger(__name__)


def _as_group(samples) -> GroupedSamples:
    if isinstance(samples, GroupedSamples):
        return samples
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty sample list")
    return GroupedSamples(X, np.zeros(X.shape[0], dtype=np.intp), 1)


def _stack(groups: Sequence) -> GroupedSamples:
    if isinstance(groups, GroupedSamples):
        return groups
    arrays = [np.atleast_2d(np.asarray(g, dtype=float)) for g in groups]
    if not arrays or any(a.shape[0] == 0 for a in arrays):
        raise ValueError("groups must be non-empty")
    index = np.repeat(np.arange(len(arrays)), [a.shape[0] for a in arrays])
    return GroupedSamples(np.vstack(arrays), index.astype(np.intp), len(arrays))


@dataclass
class KernelEnsemble:
    """Tree topologies defining ``kappa(x, x') = mean_t 1[same leaf in tree t]``."""

    trees: list[DecisionTree]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.trees:
            raise ValueError("need at least one tree")
        for tree in self.trees:
            tree.validate()

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @classmethod
    def from_prior(cls, prior: TreePriorConfig, n_trees: int, rng: np.random.Generator) -> KernelEnsemble:
        trees = []
        for _ in range(n_trees):
            tree = sample_tree_from_prior(prior, rng)
            trees.append(tree.with_leaf_values(np.zeros(tree.n_leaves)))
        return cls(trees)

    def leaves(self, X: np.ndarray) -> np.ndarray:
        """``n x T`` leaf indices, cached on the array's bytes."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        key = (X.shape, X.tobytes())
        out = self._cache.get(key)
        if out is None:
            out = np.column_stack([t.apply(X) for t in self.trees])
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = out
        return out

    def features(self, groups) -> np.ndarray:
        """Unscaled embedding features; ``F F' / T`` is the embedding Gram matrix."""
        return build_design_matrix(self.trees, _stack(groups), drop_constant=False).values


def tree_kernel(ke: KernelEnsemble, x, x2) -> float:
    """Share of trees that put ``x`` and ``x2`` in the same leaf."""
    a = ke.leaves(np.atleast_2d(x))
    b = ke.leaves(np.atleast_2d(x2))
    return float(np.mean(a[0] == b[0]))


def tree_kernel_matrix(ke: KernelEnsemble, X, X2) -> np.ndarray:
    a, b = ke.leaves(X), ke.leaves(X2)
    return (a[:, None, :] == b[None, :, :]).mean(axis=2)


def embedding_kernel(ke: KernelEnsemble, group_a, group_b) -> float:
    """Mean embedding inner product through per-tree leaf-probability features."""
    fa = ke.features([np.atleast_2d(group_a)])
    fb = ke.features([np.atleast_2d(group_b)])
    return float(fa[0] @ fb[0]) / ke.n_trees


def embedding_gram(ke: KernelEnsemble, groups, groups2=None) -> np.ndarray:
    Fa = ke.features(groups)
    Fb = Fa if groups2 is None else ke.features(groups2)
    return Fa @ Fb.T / ke.n_trees


def gaussian_embedding_kernel(ke: KernelEnsemble, group_a, group_b, gamma: float) -> float:
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    d2 = (embedding_kernel(ke, group_a, group_a) - 2 * embedding_kernel(ke, group_a, group_b)
          + embedding_kernel(ke, group_b, group_b))
    return float(np.exp(-gamma * d2))


def gaussian_embedding_gram(ke: KernelEnsemble, groups, gamma: float, groups2=None) -> np.ndarray:
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    Fa = ke.features(groups)
    Fb = Fa if groups2 is None else ke.features(groups2)
    T = ke.n_trees
    da = np.einsum("ij,ij->i", Fa, Fa) / T
    db = np.einsum("ij,ij->i", Fb, Fb) / T
    d2 = da[:, None] - 2 * (Fa @ Fb.T) / T + db[None, :]
    return np.exp(-gamma * np.maximum(d2, 0.0))


def kernel_ridge_predict(K_train: np.ndarray, K_cross: np.ndarray, y, ridge: float) -> np.ndarray:
    """``K_cross (K_train + ridge I)^-1 y``."""
    A = np.array(K_train, dtype=float)
    A[np.diag_indices_from(A)] += ridge
    return np.asarray(K_cross) @ cho_solve(cho_factor(A, lower=True), np.asarray(y, dtype=float))


def gp_posterior_mean(ke: KernelEnsemble, train_groups, y, sigma2: float, sigma_mu2: float, new_groups) -> np.ndarray:
    """GP posterior mean under the embedding kernel with ridge ``sigma2 / sigma_mu2``.

    Returns one value per new group.
    """
    if not (sigma2 > 0 and sigma_mu2 > 0):
        raise ValueError("variances must be positive")
    train = _stack(train_groups)
    new = _as_group(new_groups) if not isinstance(new_groups, (list, tuple)) else _stack(new_groups)
    Ftr = ke.features(train)
    Fnew = ke.features(new)
    T = ke.n_trees
    return kernel_ridge_predict(Ftr @ Ftr.T / T, Fnew @ Ftr.T / T, y, sigma2 / sigma_mu2)


def feature_ridge_predict(Phi_train: np.ndarray, Phi_new: np.ndarray, y, sigma2: float, sigma_mu2: float,
                          n_trees: int) -> np.ndarray:
    """Posterior-mean prediction with leaf values ``~ N(0, sigma_mu2 / T)``."""
    L = Phi_train.shape[1]
    A = Phi_train.T @ Phi_train + (n_trees * sigma2 / sigma_mu2) * np.eye(L)
    beta = cho_solve(cho_factor(A, lower=True), Phi_train.T @ np.asarray(y, dtype=float))
    return Phi_new @ beta


def write_gram_csv(path, K: np.ndarray, row_ids: Sequence[str], col_ids: Sequence[str] | None = None) -> None:
    col_ids = row_ids if col_ids is None else col_ids
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_id", *col_ids])
        for gid, row in zip(row_ids, K):
            w.writerow([gid, *(repr(float(v)) for v in row)])


# ----------------------------------------------------------------------------
# baselines


def _wcss(X, centers, labels) -> float:
    return float(np.sum((X - centers[labels]) ** 2))


def _assign(X, centers):
    d2 = (np.einsum("ij,ij->i", X, X)[:, None] - 2 * X @ centers.T
          + np.einsum("ij,ij->i", centers, centers)[None, :])
    return np.argmin(d2, axis=1)


def kmeans_landmarks(points, K: int, rng: np.random.Generator, max_iter: int = 100,
                     return_history: bool = False):
    """Lloyd iterations from k-means++ seeding.

    Seeds are drawn among distinct points so every center starts on its own
    location; stops when assignments repeat or after ``max_iter`` rounds.
    """
    X = np.asarray(points, dtype=float)
    X = X.reshape(-1, 1) if X.ndim == 1 else X
    distinct = np.unique(X, axis=0)
    if K < 1 or K > distinct.shape[0]:
        raise ValueError(f"K={K} exceeds the {distinct.shape[0]} distinct points")
    centers = np.empty((K, X.shape[1]))
    centers[0] = distinct[rng.integers(distinct.shape[0])]
    d2 = np.sum((distinct - centers[0]) ** 2, axis=1)
    for k in range(1, K):
        centers[k] = distinct[rng.choice(distinct.shape[0], p=d2 / d2.sum())]
        d2 = np.minimum(d2, np.sum((distinct - centers[k]) ** 2, axis=1))
    labels = _assign(X, centers)
    history = [_wcss(X, centers, labels)]
    for _ in range(max_iter):
        for k in range(K):
            members = labels == k
            if members.any():
                centers[k] = X[members].mean(axis=0)
        new = _assign(X, centers)
        history.append(_wcss(X, centers, new))
        if np.array_equal(new, labels):
            break
        labels = new
    return (centers, history) if return_history else centers


def median_heuristic(X: np.ndarray, rng: np.random.Generator, subsample: int = 2000) -> float:
    """Median pairwise Euclidean distance over at most ``subsample`` rows."""
    X = np.atleast_2d(X)
    if X.shape[0] > subsample:
        X = X[rng.choice(X.shape[0], subsample, replace=False)]
    d = pdist(X)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


@dataclass(frozen=True)
class RBFConfig:
    landmarks: np.ndarray
    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        lm = np.atleast_2d(self.landmarks)
        if lm.size and (lm.min() < 0 or lm.max() > 1):
            raise ValueError("landmarks must lie in the unit cube")

    @property
    def n_landmarks(self) -> int:
        return np.atleast_2d(self.landmarks).shape[0]

    @classmethod
    def fit(cls, data: GroupedSamples, rng: np.random.Generator, n_landmarks: int = 100,
            bandwidth: float | None = None) -> RBFConfig:
        K = min(n_landmarks, np.unique(data.X, axis=0).shape[0])
        centers = kmeans_landmarks(data.X, K, rng)
        h = median_heuristic(data.X, rng) if bandwidth is None else bandwidth
        return cls(np.clip(centers, 0.0, 1.0), h)


def _group_means(data: GroupedSamples, values: np.ndarray) -> np.ndarray:
    sums = np.zeros((data.n_groups, values.shape[1]))
    np.add.at(sums, data.group_index, values)
    return sums / data.sizes[:, None]


def baseline_features(data: GroupedSamples, kind: str = "mean", rbf: RBFConfig | None = None) -> DesignMatrix:
    """Group features for the rbf, mean and mean+var baselines."""
    if kind == "rbf":
        if rbf is None:
            raise ValueError("rbf features need an RBFConfig")
        d2 = cdist(data.X, np.atleast_2d(rbf.landmarks), "sqeuclidean")
        values = _group_means(data, np.exp(-d2 / (2 * rbf.bandwidth**2)))
    elif kind in ("mean", "mean+var"):
        means = _group_means(data, data.X)
        values = means
        if kind == "mean+var":
            values = np.hstack([means, np.maximum(_group_means(data, data.X**2) - means**2, 0.0)])
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    return DesignMatrix(values, tuple((-1, k) for k in range(values.shape[1])), (),
                        tuple(f"{kind}_{k}" for k in range(values.shape[1])))
