"""Bayesian backfitting sampler for the sum-of-trees linear functional.

Each outcome is modelled as ``y_i = sum_t phi_it' beta_t + eps_i`` where
``phi_it`` holds group ``i``'s leaf probabilities under tree ``t``. Tree
structures are updated by Metropolis-Hastings with the leaf values
integrated out, then leaf values and the noise variance are drawn from
their conjugate full conditionals. ``eta`` tempers the likelihood by
replacing ``sigma2`` with ``sigma2 / eta``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.stats import gamma as gamma_dist

from .data import GroupedSamples, PercentileTransform, RawDataset, TransformedDataset, apply_transform
from .features import leaf_counts, route_points
from .treeprior import (
    DEFAULT_MOVE_PROBS,
    DecisionTree,
    TreePriorConfig,
    log_tree_prior,
    propose_move,
    sample_tree_from_prior,
)

LOG_2PI = math.log(2.0 * math.pi)


class SamplerError(RuntimeError):
    """Non-finite sampler state; ``dump`` holds a JSON-ready snapshot."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def integrated_log_likelihood(R, Phi, sigma2: float, sigma_mu2: float, n_trees: int, eta: float = 1.0) -> float:
    """``log N(R | 0, (sigma_mu2/T) Phi Phi' + (sigma2/eta) I)`` via the leaf-space system."""
    R = np.asarray(R, dtype=float)
    Phi = np.asarray(Phi, dtype=float)
    _check_finite(R, Phi, sigma2, sigma_mu2)
    if not (sigma2 > 0 and sigma_mu2 > 0 and 0 < eta <= 1):
        raise ValueError("sigma2, sigma_mu2 must be > 0 and eta in (0, 1]")
    N, L = Phi.shape
    s = sigma2 / eta
    ratio = s * n_trees / sigma_mu2
    PtR = Phi.T @ R
    A = Phi.T @ Phi
    A[np.diag_indices(L)] += ratio
    c, low = cho_factor(A, lower=True)
    logdet = N * math.log(s) + 2.0 * np.log(np.diag(c)).sum() - L * math.log(ratio)
    quad = (R @ R - PtR @ cho_solve((c, low), PtR)) / s
    return -0.5 * (N * LOG_2PI + logdet + quad)


def leaf_posterior(R, Phi, sigma2: float, sigma_mu2: float, n_trees: int, eta: float = 1.0):
    """Mean and Cholesky factor of the precision of the leaf-value conditional."""
    w = eta / sigma2
    L = Phi.shape[1]
    prec = w * (Phi.T @ Phi)
    prec[np.diag_indices(L)] += n_trees / sigma_mu2
    chol = np.linalg.cholesky(prec)
    rhs = w * (Phi.T @ R)
    mean = solve_triangular(chol.T, solve_triangular(chol, rhs, lower=True), lower=False)
    return mean, chol


def sample_leaf_values(R, Phi, sigma2: float, sigma_mu2: float, n_trees: int, eta: float,
                       rng: np.random.Generator) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    Phi = np.asarray(Phi, dtype=float)
    _check_finite(R, Phi, sigma2, sigma_mu2)
    mean, chol = leaf_posterior(R, Phi, sigma2, sigma_mu2, n_trees, eta)
    z = rng.standard_normal(mean.shape[0])
    return mean + solve_triangular(chol.T, z, lower=False)


def update_sigma2(residuals, a: float, b: float, eta: float, rng: np.random.Generator) -> float:
    """Draw from ``InverseGamma(a + eta N / 2, b + eta sum(r^2) / 2)``."""
    r = np.asarray(residuals, dtype=float)
    shape = a + 0.5 * eta * r.size
    rate = b + 0.5 * eta * float(r @ r)
    return rate / rng.gamma(shape)


def default_sigma_rate(a: float, sigma_median: float = 1.0) -> float:
    """Inverse-gamma rate giving ``sigma`` the prior median ``sigma_median``."""
    return float(gamma_dist.ppf(0.5, a)) * sigma_median**2


@dataclass(frozen=True)
class SamplerConfig:
    """MCMC and prior settings. Prior hyperparameters live on the standardized-outcome scale.

    ``sigma_mu2=None`` uses ``range(y_std)^2 / (4 k^2)``; ``sigma_b=None``
    sets the prior median of ``sigma`` to one.
    """

    n_iter: int = 2500
    burn_in: int = 500
    thin: int = 1
    n_trees: int = 200
    alpha: float = 0.95
    beta: float = 2.0
    sigma_mu2: float | None = None
    k: float = 2.0
    sigma_a: float = 1.5
    sigma_b: float | None = None
    eta: float = 1.0
    split_probs: tuple[float, ...] | None = None
    move_probs: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_MOVE_PROBS))
    seed: int = 0
    n_jobs: int = 1
    cache_membership: bool = True
    init: str = "prior"

    def __post_init__(self):
        if not self.n_iter > self.burn_in >= 0:
            raise ValueError("need n_iter > burn_in >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.sigma_a <= 0 or (self.sigma_b is not None and self.sigma_b <= 0):
            raise ValueError("sigma prior parameters must be > 0")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if self.init not in ("prior", "stump"):
            raise ValueError("init must be 'prior' or 'stump'")

    def tree_prior(self, n_features: int, y_std: np.ndarray) -> TreePriorConfig:
        if self.sigma_mu2 is not None:
            s2 = self.sigma_mu2
        else:
            spread = float(np.ptp(y_std)) if y_std.size else 0.0
            s2 = spread**2 / (4.0 * self.k**2) if spread > 0 else 1.0
        return TreePriorConfig(n_features, self.alpha, self.beta, self.n_trees, s2, self.split_probs)

    def sigma_rate(self) -> float:
        return self.sigma_b if self.sigma_b is not None else default_sigma_rate(self.sigma_a)


class BackfittingSampler:
    """One chain of the backfitting Gibbs sampler on a fixed outcome scale.

    State: tree topologies ``trees``, leaf values ``betas``, per-tree feature
    blocks ``phi``, the cached fit ``sum_t phi[t] @ betas[t]`` and ``sigma2``.
    """

    def __init__(self, data: GroupedSamples, prior: TreePriorConfig, sigma_a: float, sigma_b: float,
                 eta: float = 1.0, move_probs=None, rng: np.random.Generator | None = None,
                 n_jobs: int = 1, cache_membership: bool = True, init: str = "prior"):
        self.data = data
        self.init = init
        self.prior = prior
        self.sigma_a = sigma_a
        self.sigma_b = sigma_b
        self.eta = eta
        self.move_probs = dict(DEFAULT_MOVE_PROBS if move_probs is None else move_probs)
        self.rng = np.random.default_rng() if rng is None else rng
        self.n_jobs = n_jobs
        self.cache_membership = cache_membership
        self._sizes = data.sizes[:, None]
        self.tallies = {m: [0, 0] for m in ("grow", "prune", "change")}
        self.iteration = 0

    def _features(self, tree: DecisionTree, nodes: np.ndarray) -> np.ndarray:
        return leaf_counts(tree, nodes, self.data.group_index, self.data.n_groups) / self._sizes

    def initialize(self) -> None:
        """Draw trees, leaf values and ``sigma2`` from the prior, or start from
        zero-valued stumps with ``sigma2`` at the prior median (``init="stump"``)."""
        T = self.prior.n_trees
        self.trees, self.betas, self.phi, self.nodes, self.log_priors = [], [], [], [], []
        for _ in range(T):
            if self.init == "stump":
                tree = DecisionTree.stump(self.prior.n_features)
            else:
                tree = sample_tree_from_prior(self.prior, self.rng)
            nodes = route_points(tree, self.data.X, self.n_jobs)
            self.betas.append(tree.leaf_values.copy())
            tree = tree.with_leaf_values(np.zeros(tree.n_leaves))
            self.trees.append(tree)
            self.nodes.append(nodes if self.cache_membership else None)
            self.phi.append(self._features(tree, nodes))
            self.log_priors.append(log_tree_prior(tree, self.prior))
        if self.init == "stump":
            self.sigma2 = self.sigma_b / float(gamma_dist.ppf(0.5, self.sigma_a))
        else:
            self.sigma2 = self.sigma_b / self.rng.gamma(self.sigma_a)
        self.fit = self.recompute_fit()

    def recompute_fit(self) -> np.ndarray:
        fit = np.zeros(self.data.n_groups)
        for phi, beta in zip(self.phi, self.betas):
            fit = fit + phi @ beta
        return fit

    def _proposal_nodes(self, t: int, prop) -> np.ndarray:
        if not self.cache_membership:
            return route_points(prop.tree, self.data.X, self.n_jobs)
        old_tree, old = self.trees[t], self.nodes[t]
        new = old.copy()
        k = prop.node
        if prop.kind == "prune":
            nd = old_tree.nodes[k]
            new[(old == nd.left) | (old == nd.right)] = k
        else:
            rows = np.flatnonzero(old == k) if prop.kind == "grow" else np.flatnonzero(
                np.isin(old, old_tree.subtree_leaves(k)))
            new[rows] = prop.tree.route(self.data.X[rows], start=k)
        return new

    def update_tree(self, t: int, y: np.ndarray) -> None:
        prior, T = self.prior, self.prior.n_trees
        sigma2, eta = self.sigma2, self.eta
        R = y - (self.fit - self.phi[t] @ self.betas[t])
        prop = propose_move(self.trees[t], prior, self.move_probs, self.rng)
        self.tallies[prop.kind][0] += 1
        log_u = math.log(self.rng.random() or 1e-300)
        if prop.valid:
            nodes = self._proposal_nodes(t, prop)
            phi_new = self._features(prop.tree, nodes)
            lp_new = log_tree_prior(prop.tree, prior)
            log_m_new = integrated_log_likelihood(R, phi_new, sigma2, prior.sigma_mu2, T, eta) + lp_new
            log_m_old = integrated_log_likelihood(R, self.phi[t], sigma2, prior.sigma_mu2, T, eta) + self.log_priors[t]
            if log_u < log_m_new - log_m_old + prop.log_ratio:
                self.tallies[prop.kind][1] += 1
                self.trees[t] = prop.tree
                self.phi[t] = phi_new
                self.log_priors[t] = lp_new
                if self.cache_membership:
                    self.nodes[t] = nodes
        beta = sample_leaf_values(R, self.phi[t], sigma2, prior.sigma_mu2, T, eta, self.rng)
        self.betas[t] = beta
        self.fit = (y - R) + self.phi[t] @ beta

    def sweep(self, y: np.ndarray) -> None:
        for t in range(self.prior.n_trees):
            self.update_tree(t, y)
        self.sigma2 = update_sigma2(y - self.fit, self.sigma_a, self.sigma_b, self.eta, self.rng)
        self.iteration += 1
        if not (np.all(np.isfinite(self.fit)) and np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise SamplerError(f"non-finite sampler state at iteration {self.iteration}", self.snapshot())

    def snapshot(self) -> dict:
        return {
            "iteration": self.iteration,
            "sigma2": float(self.sigma2),
            "trees": [tr.with_leaf_values(b).to_dict() for tr, b in zip(self.trees, self.betas)],
        }


@dataclass
class PosteriorChain:
    """Post-burn-in draws. Fits and ``sigma2`` are on the original outcome scale.

    Draw ``d`` uses topologies ``topologies[d]`` (shared across draws while a
    tree is unchanged) with leaf values ``leaf_values[d]``.
    """

    topologies: list[list[DecisionTree]]
    leaf_values: list[list[np.ndarray]]
    sigma2: np.ndarray
    fitted: np.ndarray
    y_center: float
    y_scale: float
    prior: TreePriorConfig
    group_ids: tuple[str, ...] = ()
    tallies: dict = field(default_factory=dict)
    transform: PercentileTransform | None = None
    config: SamplerConfig | None = None

    @property
    def n_draws(self) -> int:
        return len(self.topologies)

    def ensemble(self, d: int) -> list[DecisionTree]:
        return [tr.with_leaf_values(b) for tr, b in zip(self.topologies[d], self.leaf_values[d])]

    def acceptance_rates(self) -> dict[str, float]:
        return {k: (a / p if p else float("nan")) for k, (p, a) in self.tallies.items()}

    def predict_transformed(self, data: GroupedSamples, n_jobs: int = 1) -> np.ndarray:
        """``n_draws x n_groups`` posterior draws of ``f`` for transformed groups."""
        sizes = data.sizes[:, None]
        cache: dict[int, np.ndarray] = {}
        out = np.empty((self.n_draws, data.n_groups))
        for d in range(self.n_draws):
            f = np.zeros(data.n_groups)
            for tree, beta in zip(self.topologies[d], self.leaf_values[d]):
                phi = cache.get(id(tree))
                if phi is None:
                    nodes = route_points(tree, data.X, n_jobs)
                    phi = leaf_counts(tree, nodes, data.group_index, data.n_groups) / sizes
                    cache[id(tree)] = phi
                f = f + phi @ beta
            out[d] = self.y_center + self.y_scale * f
        return out

    def representer(self, d: int, points: np.ndarray) -> np.ndarray:
        """Draw ``d`` of ``psi`` at ``points`` on the original outcome scale, offset excluded."""
        points = np.atleast_2d(points)
        psi = np.zeros(points.shape[0])
        for tree, beta in zip(self.topologies[d], self.leaf_values[d]):
            psi = psi + beta[tree.apply(points)]
        return self.y_scale * psi

    # serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        cfg = None
        if self.config is not None:
            cfg = asdict(self.config)
            cfg.pop("n_jobs")  # execution detail; dropping it keeps files identical across core counts
            cfg["move_probs"] = dict(self.config.move_probs)
            cfg["split_probs"] = list(cfg["split_probs"]) if cfg["split_probs"] is not None else None
        return {
            "kind": "gibbs",
            "transform": self.transform.to_dict() if self.transform is not None else None,
            "standardization": {"center": self.y_center, "scale": self.y_scale},
            "prior": {
                "n_features": self.prior.n_features,
                "alpha": self.prior.alpha,
                "beta": self.prior.beta,
                "n_trees": self.prior.n_trees,
                "sigma_mu2": self.prior.sigma_mu2,
                "split_probs": list(self.prior.split_probs) if self.prior.split_probs is not None else None,
            },
            "config": cfg,
            "group_ids": list(self.group_ids),
            "acceptance": {k: list(v) for k, v in self.tallies.items()},
            "draws": [
                {
                    "trees": [tr.with_leaf_values(b).to_dict() for tr, b in zip(tops, vals)],
                    "sigma2": float(s2),
                }
                for tops, vals, s2 in zip(self.topologies, self.leaf_values, self.sigma2)
            ],
            "fitted": self.fitted.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PosteriorChain:
        p = d["prior"]
        prior = TreePriorConfig(p["n_features"], p["alpha"], p["beta"], p["n_trees"], p["sigma_mu2"],
                                tuple(p["split_probs"]) if p["split_probs"] is not None else None)
        tops, vals = [], []
        seen: dict[str, DecisionTree] = {}
        for draw in d["draws"]:
            row_t, row_v = [], []
            for rec in draw["trees"]:
                tree = DecisionTree.from_dict(rec)
                key = json.dumps(_topology_key(rec))
                topo = seen.setdefault(key, tree.with_leaf_values(np.zeros(tree.n_leaves)))
                row_t.append(topo)
                row_v.append(tree.leaf_values.copy())
            tops.append(row_t)
            vals.append(row_v)
        cfg = None
        if d.get("config") is not None:
            c = dict(d["config"])
            if c.get("split_probs") is not None:
                c["split_probs"] = tuple(c["split_probs"])
            cfg = SamplerConfig(**c)
        transform = PercentileTransform.from_dict(d["transform"]) if d.get("transform") else None
        return cls(
            topologies=tops,
            leaf_values=vals,
            sigma2=np.array([draw["sigma2"] for draw in d["draws"]]),
            fitted=np.asarray(d["fitted"], dtype=float).reshape(len(tops), -1),
            y_center=d["standardization"]["center"],
            y_scale=d["standardization"]["scale"],
            prior=prior,
            group_ids=tuple(d.get("group_ids", ())),
            tallies={k: list(v) for k, v in d.get("acceptance", {}).items()},
            transform=transform,
            config=cfg,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")), encoding="utf-8")

    @classmethod
    def load(cls, path) -> PosteriorChain:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def write_csv(self, path) -> None:
        """One row per draw: ``draw,sigma2,f_1,...,f_N``."""
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["draw", "sigma2", *(f"f_{i + 1}" for i in range(self.fitted.shape[1]))])
            for d in range(self.n_draws):
                w.writerow([d, repr(float(self.sigma2[d])), *(repr(float(v)) for v in self.fitted[d])])


def _topology_key(rec: dict) -> list:
    return [(n["id"], n["kind"], n["split_var"], n["cutpoint"], n["left"], n["right"]) for n in rec["nodes"]]


def standardize(y: np.ndarray) -> tuple[np.ndarray, float, float]:
    center = float(np.mean(y))
    scale = float(np.std(y))
    if not scale > 0:
        scale = 1.0
    return (y - center) / scale, center, scale


def run_backfitting(data: TransformedDataset, cfg: SamplerConfig | None = None) -> PosteriorChain:
    """Run one chain of the backfitting sampler on ``data``."""
    cfg = SamplerConfig() if cfg is None else cfg
    if data.n_groups < 2:
        raise ValueError("need at least two groups")
    y = np.asarray(data.y, dtype=float)
    _check_finite(y)
    y_std, center, scale = standardize(y)
    prior = cfg.tree_prior(data.X.shape[1], y_std)
    sampler = BackfittingSampler(
        data, prior, cfg.sigma_a, cfg.sigma_rate(), cfg.eta, cfg.move_probs,
        np.random.default_rng(cfg.seed), cfg.n_jobs, cfg.cache_membership, cfg.init,
    )
    sampler.initialize()
    tops, vals, sig, fits = [], [], [], []
    for it in range(cfg.n_iter):
        sampler.sweep(y_std)
        kept = it - cfg.burn_in + 1
        if kept > 0 and kept % cfg.thin == 0:
            tops.append(list(sampler.trees))
            vals.append(list(sampler.betas))
            sig.append(sampler.sigma2 * scale**2)
            fits.append(center + scale * sampler.recompute_fit())
    return PosteriorChain(
        topologies=tops,
        leaf_values=vals,
        sigma2=np.asarray(sig),
        fitted=np.asarray(fits),
        y_center=center,
        y_scale=scale,
        prior=prior,
        group_ids=tuple(data.group_ids),
        tallies={k: list(v) for k, v in sampler.tallies.items()},
        transform=data.transform,
        config=cfg,
    )


def posterior_predict(chain: PosteriorChain, transform: PercentileTransform | None,
                      new_group_samples) -> np.ndarray:
    """Posterior draws of ``f`` for one new group.

    ``new_group_samples`` is a raw column mapping (mapped through
    ``transform``) or, when ``transform`` is None, an array already in the
    unit cube.
    """
    if chain.n_draws == 0:
        raise ValueError("empty chain")
    if transform is None:
        X = np.atleast_2d(np.asarray(new_group_samples, dtype=float))
    else:
        X = apply_transform(transform, new_group_samples)
    group = GroupedSamples(X, np.zeros(X.shape[0], dtype=np.intp), 1)
    return chain.predict_transformed(group)[:, 0]


def predict_dataset(chain: PosteriorChain, raw: RawDataset, transform: PercentileTransform | None = None,
                    n_jobs: int = 1) -> np.ndarray:
    """``n_draws x N`` posterior draws of ``f`` for every group in ``raw``."""
    transform = chain.transform if transform is None else transform
    X = apply_transform(transform, raw.columns)
    return chain.predict_transformed(GroupedSamples(X, raw.group_index, raw.n_groups), n_jobs)


def simulate_outcomes(trees: Sequence[DecisionTree], data: GroupedSamples, sigma2: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Truth ``f = sum_t phi_t beta_t`` and noisy outcomes under a fixed ensemble."""
    sizes = data.sizes[:, None]
    f = np.zeros(data.n_groups)
    for tree in trees:
        phi = leaf_counts(tree, tree.route(data.X), data.group_index, data.n_groups) / sizes
        f = f + phi @ tree.leaf_values
    return f, f + math.sqrt(sigma2) * rng.standard_normal(data.n_groups)
