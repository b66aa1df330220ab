"""Random prior-tree features with a downstream sparse regression.

Trees are drawn from the prior once, each group is featurized by its leaf
probabilities, and the outcome is regressed on those features with a
horseshoe prior, the lasso, or another sum-of-trees model.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit
from scipy.linalg import cho_factor, cho_solve, lapack, solve_triangular

from .data import GroupedSamples, PercentileTransform, RawDataset, TransformedDataset, apply_transform, from_arrays
from .features import DesignMatrix, build_design_matrix, featurize_like
from .sampler import PosteriorChain, SamplerConfig, SamplerError, run_backfitting
from .treeprior import DecisionTree, TreePriorConfig, sample_tree_from_prior

DOWNSTREAMS = ("horseshoe", "lasso", "tree-ensemble")


def sample_prior_feature_map(data: GroupedSamples, n_trees: int, prior: TreePriorConfig,
                             rng: np.random.Generator, n_jobs: int = 1) -> tuple[list[DecisionTree], DesignMatrix]:
    """Draw ``n_trees`` prior topologies and the constant-column-free design."""
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    trees = []
    for _ in range(n_trees):
        tree = sample_tree_from_prior(prior, rng)
        trees.append(tree.with_leaf_values(np.zeros(tree.n_leaves)))
    return trees, build_design_matrix(trees, data, drop_constant=True, n_jobs=n_jobs)


def standardize_columns(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centre and scale columns to unit (population) variance.

    Zero-variance columns get scale 1 and become identically zero.
    """
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Z = (X - mean) / scale
    Z[:, X.std(axis=0) == 0] = 0.0
    return Z, mean, scale


# ----------------------------------------------------------------------------
# lasso


@njit(cache=True)
def _cd_sweep(X, r, beta, norms, lam, n, active_only):
    max_delta = 0.0
    for j in range(X.shape[1]):
        if norms[j] == 0.0:
            continue
        bj = beta[j]
        if active_only and bj == 0.0:
            continue
        col = X[:, j]
        rho = 0.0
        for i in range(n):
            rho += col[i] * r[i]
        rho = rho / n + norms[j] * bj
        if rho > lam:
            new = (rho - lam) / norms[j]
        elif rho < -lam:
            new = (rho + lam) / norms[j]
        else:
            new = 0.0
        d = new - bj
        if d != 0.0:
            for i in range(n):
                r[i] -= d * col[i]
            beta[j] = new
            delta = abs(d) * math.sqrt(norms[j])
            if delta > max_delta:
                max_delta = delta
    return max_delta


@njit(cache=True)
def _cd_solve(X, r, beta, norms, lam, tol, max_sweeps):
    """Cyclic descent at one penalty, updating ``beta`` and residual ``r`` in place."""
    n = X.shape[0]
    count = 0
    while count < max_sweeps:
        count += 1
        if _cd_sweep(X, r, beta, norms, lam, n, False) < tol:
            break
        while count < max_sweeps:
            count += 1
            if _cd_sweep(X, r, beta, norms, lam, n, True) < tol:
                break
    return count


def kkt_violation(Z: np.ndarray, yc: np.ndarray, beta: np.ndarray, lam: float) -> float:
    """Largest departure from the lasso optimality conditions."""
    g = Z.T @ (yc - Z @ beta) / Z.shape[0]
    act = beta != 0
    off = np.max(np.abs(g[~act]) - lam, initial=0.0)
    on = np.max(np.abs(g[act] - lam * np.sign(beta[act])), initial=0.0)
    return float(max(off, on))


class _GramColumns:
    """Lazily computed columns of ``Z'Z / n``.

    ``store`` keeps full columns by slot; ``square`` keeps the Gram entries
    among slotted columns so active blocks are gathered from a compact array.
    """

    def __init__(self, Z: np.ndarray):
        self.Z = Z
        self.slot = np.full(Z.shape[1], -1, dtype=np.intp)
        self.ids = np.zeros(0, dtype=np.intp)
        self.store = np.zeros((Z.shape[1], 16))
        self.square = np.zeros((16, 16))
        self.used = 0

    def _ensure(self, cols: np.ndarray) -> None:
        missing = cols[self.slot[cols] < 0]
        if not missing.size:
            return
        used, need = self.used, self.used + missing.size
        if need > self.store.shape[1]:
            cap = max(need, 2 * self.store.shape[1])
            store = np.zeros((self.store.shape[0], cap))
            store[:, :used] = self.store[:, :used]
            square = np.zeros((cap, cap))
            square[:used, :used] = self.square[:used, :used]
            self.store, self.square = store, square
        self.store[:, used:need] = self.Z.T @ self.Z[:, missing] / self.Z.shape[0]
        self.slot[missing] = np.arange(used, need)
        self.ids = np.concatenate([self.ids, missing])
        self.square[:need, used:need] = self.store[self.ids, used:need]
        self.square[used:need, :used] = self.square[:used, used:need].T
        self.used = need

    def block(self, cols: np.ndarray) -> np.ndarray:
        self._ensure(cols)
        sl = self.slot[cols]
        return self.square[np.ix_(sl, sl)]


def _independent_solve(G: np.ndarray, rhs: np.ndarray):
    """Solve on a pivoted-Cholesky independent subset; returns (index, solution)."""
    c, piv, rank, info = lapack.dpstrf(G, lower=1, tol=1e-12)
    if info < 0 or rank == 0:
        return None
    keep = piv[:rank] - 1
    sol, info = lapack.dpotrs(c[:rank, :rank], rhs[keep], lower=1)
    return (keep, sol) if info == 0 else None


def _feature_sign(Z, yc, beta, lam, gram: _GramColumns | None = None, max_iter: int = 200, eps: float = 1e-12,
                  add: int = 8):
    """Active-set refinement: exact sign-fixed solves with line searches at
    sign changes, adding up to ``add`` of the worst KKT violators once the
    active set is optimal.
    Returns the refined coefficients, or None after ``max_iter`` steps.
    """
    n = Z.shape[0]
    gram = _GramColumns(Z) if gram is None else gram
    x = beta.copy()
    tol = eps * max(lam, 1.0)
    for _ in range(max_iter):
        act = np.flatnonzero(x)
        g = Z.T @ (yc - Z @ x) / n
        sign = np.sign(x)
        if act.size == 0 or np.max(np.abs(g[act] - lam * sign[act])) <= tol:
            off = np.abs(g) - lam
            off[act] = -np.inf
            top = np.argsort(off)[::-1][:add]
            if off[top[0]] <= tol:
                return x
            top = top[off[top] >= 0.5 * off[top[0]]]
            sign[top] = np.sign(g[top])
            act = np.sort(np.concatenate([act, top]))
        GA = gram.block(act)
        # sign-fixed stationarity: G_AA x_A = Z_A'y/n - lam s_A, and Z_A'y/n = g_A + G_AA x_A
        solved = _independent_solve(GA, g[act] + GA @ x[act] - lam * sign[act])
        if solved is None:
            return None
        keep, sol = solved
        target = np.zeros_like(x)
        target[act[keep]] = sol
        step = target - x
        # convex along the segment, so the minimum sits at t = 1 or a sign change
        moving = np.flatnonzero(step)
        xs, ds = x[moving], step[moving]
        with np.errstate(divide="ignore", invalid="ignore"):
            cross = -xs / ds
        ts = np.unique(np.append(cross[(cross > 0) & (cross < 1) & (xs != 0)], 1.0))
        gd = float(ds @ g[moving])
        sa = step[act]
        dGd = float(sa @ GA @ sa)
        path = xs[None, :] + ts[:, None] * ds[None, :]
        vals = -ts * gd + 0.5 * ts**2 * dGd + lam * np.abs(path).sum(axis=1)
        t = ts[int(np.argmin(vals))]
        x = x + t * step
        if t < 1.0:
            hit = moving[np.isclose(cross, t, rtol=1e-12, atol=0) & (xs != 0)]
            x[hit] = 0.0
    return None


def lasso_path(Z: np.ndarray, yc: np.ndarray, lambdas, tol: float = 1e-7, max_sweeps: int = 100_000,
               refine: bool = True) -> np.ndarray:
    """Coefficients minimizing ``|yc - Z b|^2 / (2n) + lam |b|_1`` for each penalty.

    Penalties are visited in the given order with warm starts. With
    ``refine``, each penalty first tries the active-set refinement from the
    previous solution; whenever that fails the full KKT check, cyclic
    coordinate descent runs with a tightening threshold (ending at ``tol``),
    re-trying the refinement after every stage.
    """
    Z = np.asfortranarray(Z, dtype=float)
    yc = np.ascontiguousarray(yc, dtype=float)
    n, p = Z.shape
    norms = np.einsum("ij,ij->j", Z, Z) / n
    beta = np.zeros(p)
    r = yc.copy()
    scale = max(float(np.std(yc)), 1e-300)
    ladder = [t for t in (1e-3 * scale, 1e-5 * scale) if t > tol] + [tol]
    gram = _GramColumns(Z)
    out = np.zeros((len(lambdas), p))

    def accept(cand, lam):
        return cand is not None and kkt_violation(Z, yc, cand, lam) < 1e-9

    for k, lam in enumerate(np.asarray(lambdas, dtype=float)):
        cand = _feature_sign(Z, yc, beta, lam, gram) if refine else None
        if accept(cand, lam):
            beta = cand
        else:
            r = yc - Z @ beta
            for stage in ladder:
                _cd_solve(Z, r, beta, norms, lam, stage, max_sweeps)
                cand = _feature_sign(Z, yc, beta, lam, gram) if refine else None
                if accept(cand, lam):
                    beta = cand
                    break
        out[k] = beta
    return out


def lambda_max(Z: np.ndarray, yc: np.ndarray) -> float:
    return float(np.max(np.abs(Z.T @ yc)) / Z.shape[0]) if Z.shape[1] else 0.0


@dataclass
class LassoFit:
    """Cross-validated lasso on standardized columns.

    ``coef_path`` and ``coef`` are on the standardized scale; ``col_mean`` and
    ``col_scale`` map back to raw features.
    """

    lambdas: np.ndarray
    coef_path: np.ndarray
    cv_error: np.ndarray
    cv_se: np.ndarray
    best_index: int
    col_mean: np.ndarray
    col_scale: np.ndarray
    y_mean: float
    fold_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def lambda_(self) -> float:
        return float(self.lambdas[self.best_index])

    @property
    def coef(self) -> np.ndarray:
        return self.coef_path[self.best_index]

    @property
    def raw_coef(self) -> np.ndarray:
        return self.coef / self.col_scale

    @property
    def intercept(self) -> float:
        return float(self.y_mean - self.raw_coef @ self.col_mean)

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.raw_coef + self.intercept

    def to_dict(self) -> dict:
        return {
            "lambdas": self.lambdas.tolist(),
            "coef": self.coef.tolist(),
            "cv_error": self.cv_error.tolist(),
            "cv_se": self.cv_se.tolist(),
            "best_index": int(self.best_index),
            "col_mean": self.col_mean.tolist(),
            "col_scale": self.col_scale.tolist(),
            "y_mean": self.y_mean,
        }

    @classmethod
    def from_dict(cls, d: dict) -> LassoFit:
        lambdas = np.asarray(d["lambdas"], dtype=float)
        path = np.zeros((lambdas.size, len(d["coef"])))
        path[d["best_index"]] = d["coef"]
        return cls(lambdas, path, np.asarray(d["cv_error"]), np.asarray(d["cv_se"]), d["best_index"],
                   np.asarray(d["col_mean"], dtype=float), np.asarray(d["col_scale"], dtype=float), d["y_mean"])


def lasso_cv(Phi, Y, folds: int = 10, grid=None, rng: np.random.Generator | None = None,
             n_lambdas: int = 100, min_ratio: float = 1e-4, tol: float = 1e-7) -> LassoFit:
    """K-fold cross-validated lasso by cyclic coordinate descent.

    The default grid is ``n_lambdas`` log-spaced penalties from ``lambda_max``
    down to ``min_ratio * lambda_max``; folds share that full-data grid.
    """
    X = np.asarray(Phi.values if isinstance(Phi, DesignMatrix) else Phi, dtype=float)
    y = np.asarray(Y, dtype=float)
    n = X.shape[0]
    if folds < 2 or n < folds:
        raise ValueError("need folds >= 2 and at least one group per fold")
    rng = np.random.default_rng(0) if rng is None else rng
    Z, mean, scale = standardize_columns(X)
    y_mean = float(y.mean())
    yc = y - y_mean
    if grid is None:
        lmax = lambda_max(Z, yc)
        grid = lmax * np.logspace(0.0, math.log10(min_ratio), n_lambdas) if lmax > 0 else np.zeros(1)
    lambdas = np.sort(np.asarray(grid, dtype=float))[::-1]

    fold_ids = np.empty(n, dtype=int)
    fold_ids[rng.permutation(n)] = np.arange(n) % folds
    errs = np.zeros((folds, lambdas.size))
    for k in range(folds):
        tr, te = fold_ids != k, fold_ids == k
        Ztr, m_tr, s_tr = standardize_columns(X[tr])
        ytr_mean = y[tr].mean()
        path = lasso_path(Ztr, y[tr] - ytr_mean, lambdas, tol)
        Zte = (X[te] - m_tr) / s_tr
        Zte[:, X[tr].std(axis=0) == 0] = 0.0
        pred = ytr_mean + Zte @ path.T
        errs[k] = np.mean((y[te, None] - pred) ** 2, axis=0)
    cv_error = errs.mean(axis=0)
    cv_se = errs.std(axis=0, ddof=1) / math.sqrt(folds)
    best = int(np.argmin(cv_error))
    full = lasso_path(Z, yc, lambdas, tol)
    return LassoFit(lambdas, full, cv_error, cv_se, best, mean, scale, y_mean, fold_ids)


# ----------------------------------------------------------------------------
# horseshoe


def _inv_gamma(shape, rate, rng):
    return rate / rng.gamma(shape, size=np.shape(rate)) if np.ndim(rate) else rate / rng.gamma(shape)


def sample_gaussian_coefficients(Z: np.ndarray, yc: np.ndarray, prior_var: np.ndarray, sigma2: float,
                                 rng: np.random.Generator) -> np.ndarray:
    """Draw from ``N(A^-1 Z'y, sigma2 A^-1)`` with ``A = Z'Z + diag(sigma2 / prior_var)``.

    ``prior_var`` is the full prior variance of each coefficient. Uses a
    Cholesky solve when ``p <= n`` and the n-dimensional data-augmentation
    sampler otherwise.
    """
    n, p = Z.shape
    if p <= n:
        prec = Z.T @ Z / sigma2
        prec[np.diag_indices(p)] += 1.0 / prior_var
        chol = np.linalg.cholesky(prec)
        mean = cho_solve((chol, True), Z.T @ yc / sigma2)
        return mean + solve_triangular(chol.T, rng.standard_normal(p), lower=False)
    sd = math.sqrt(sigma2)
    Phi = Z / sd
    alpha = yc / sd
    u = np.sqrt(prior_var) * rng.standard_normal(p)
    delta = rng.standard_normal(n)
    v = Phi @ u + delta
    M = (Phi * prior_var) @ Phi.T
    M[np.diag_indices(n)] += 1.0
    w = cho_solve(cho_factor(M, lower=True), alpha - v)
    return u + prior_var * (Phi.T @ w)


@dataclass(frozen=True)
class HorseshoeState:
    beta: np.ndarray
    lam2: np.ndarray
    tau2: float
    sigma2: float
    intercept: float
    nu: np.ndarray
    xi: float


@dataclass
class HorseshoeFit:
    """Post-burn-in horseshoe draws; ``beta`` on the standardized column scale."""

    beta: np.ndarray
    lam2: np.ndarray
    tau2: np.ndarray
    sigma2: np.ndarray
    intercept: np.ndarray
    col_mean: np.ndarray
    col_scale: np.ndarray

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    @property
    def raw_coef(self) -> np.ndarray:
        return self.beta / self.col_scale

    @property
    def raw_intercept(self) -> np.ndarray:
        return self.intercept - self.raw_coef @ self.col_mean

    def predict_draws(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.raw_coef.T + self.raw_intercept

    def predict(self, X) -> np.ndarray:
        return self.predict_draws(X).mean(axis=1)

    def states(self):
        for d in range(self.n_draws):
            yield HorseshoeState(self.beta[d], self.lam2[d], float(self.tau2[d]), float(self.sigma2[d]),
                                 float(self.intercept[d]), np.ones_like(self.lam2[d]), 1.0)

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> HorseshoeFit:
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


def horseshoe_regression(Phi, Y, n_iter: int = 2000, burn_in: int = 1000, rng: np.random.Generator | None = None,
                         sigma_a: float = 0.0, sigma_b: float = 0.0, fixed_scales: bool = False,
                         thin: int = 1) -> HorseshoeFit:
    """Gibbs sampler for ``y = a + Z b + e`` with a horseshoe prior on ``b``.

    ``b_j ~ N(0, lam_j^2 tau^2 sigma^2)`` with half-Cauchy ``lam_j`` and
    ``tau`` written as inverse-gamma mixtures; flat intercept;
    ``sigma^2 ~ IG(sigma_a, sigma_b)`` (the default ``0, 0`` is the
    ``1/sigma^2`` limit). ``fixed_scales`` pins ``lam_j = tau = 1``.
    """
    X = np.asarray(Phi.values if isinstance(Phi, DesignMatrix) else Phi, dtype=float)
    y = np.asarray(Y, dtype=float)
    n, p = X.shape
    if n < 2:
        raise ValueError("need at least two groups")
    if not n_iter > burn_in >= 0:
        raise ValueError("need n_iter > burn_in >= 0")
    rng = np.random.default_rng(0) if rng is None else rng
    Z, mean, scale = standardize_columns(X)

    beta = np.zeros(p)
    lam2 = np.ones(p)
    tau2 = 1.0
    nu = np.ones(p)
    xi = 1.0
    intercept = float(y.mean())
    sigma2 = float(np.var(y)) if np.var(y) > 0 else 1.0
    draws = {k: [] for k in ("beta", "lam2", "tau2", "sigma2", "intercept")}
    tiny = 1e-300
    for it in range(n_iter):
        beta = sample_gaussian_coefficients(Z, y - intercept, np.maximum(lam2 * tau2 * sigma2, tiny), sigma2, rng)
        resid = y - Z @ beta
        intercept = float(rng.normal(resid.mean(), math.sqrt(sigma2 / n)))
        resid = resid - intercept
        shrink = float(np.sum(beta**2 / np.maximum(lam2 * tau2, tiny)))
        sigma2 = _inv_gamma(sigma_a + 0.5 * (n + p), sigma_b + 0.5 * float(resid @ resid) + 0.5 * shrink, rng)
        if not fixed_scales:
            lam2 = _inv_gamma(1.0, 1.0 / nu + beta**2 / (2.0 * tau2 * sigma2), rng)
            tau2 = _inv_gamma(0.5 * (p + 1), 1.0 / xi + float(np.sum(beta**2 / lam2)) / (2.0 * sigma2), rng)
            nu = _inv_gamma(1.0, 1.0 + 1.0 / lam2, rng)
            xi = _inv_gamma(1.0, 1.0 + 1.0 / tau2, rng)
        ok = (np.all(np.isfinite(beta)) and np.all(np.isfinite(lam2)) and np.all(lam2 > 0)
              and np.isfinite(tau2) and tau2 > 0 and np.isfinite(sigma2) and sigma2 > 0)
        if not ok:
            raise SamplerError(f"non-finite horseshoe state at iteration {it}", {
                "iteration": it, "tau2": float(tau2), "sigma2": float(sigma2),
                "beta": np.asarray(beta).tolist(), "lam2": np.asarray(lam2).tolist(),
            })
        kept = it - burn_in + 1
        if kept > 0 and kept % thin == 0:
            draws["beta"].append(beta)
            draws["lam2"].append(lam2)
            draws["tau2"].append(tau2)
            draws["sigma2"].append(sigma2)
            draws["intercept"].append(intercept)
    return HorseshoeFit(
        beta=np.asarray(draws["beta"]).reshape(-1, p),
        lam2=np.asarray(draws["lam2"]).reshape(-1, p),
        tau2=np.asarray(draws["tau2"]),
        sigma2=np.asarray(draws["sigma2"]),
        intercept=np.asarray(draws["intercept"]),
        col_mean=mean,
        col_scale=scale,
    )


# ----------------------------------------------------------------------------
# composed model


@dataclass(frozen=True)
class DownstreamConfig:
    folds: int = 10
    grid: tuple[float, ...] | None = None
    n_lambdas: int = 100
    hs_iter: int = 2000
    hs_burn_in: int = 1000
    sampler: SamplerConfig = field(default_factory=SamplerConfig)


@dataclass
class RandomFeatureModel:
    """Frozen prior trees, kept feature columns and the fitted downstream."""

    trees: list[DecisionTree]
    design: DesignMatrix
    downstream: str
    fit: LassoFit | HorseshoeFit | PosteriorChain
    transform: PercentileTransform | None = None
    train_features: np.ndarray | None = None
    prior: TreePriorConfig | None = None

    def features(self, data: GroupedSamples, n_jobs: int = 1) -> np.ndarray:
        return featurize_like(self.design, self.trees, data, n_jobs)

    def predict_draws_features(self, F: np.ndarray) -> np.ndarray:
        """``n_draws x n_groups`` draws (one row for the lasso)."""
        if self.downstream == "lasso":
            return self.fit.predict(F)[None, :]
        if self.downstream == "horseshoe":
            return self.fit.predict_draws(F).T
        single = GroupedSamples(F, np.arange(F.shape[0], dtype=np.intp), F.shape[0])
        return self.fit.predict_transformed(single)

    def predict_transformed(self, data: GroupedSamples, n_jobs: int = 1) -> np.ndarray:
        return self.predict_draws_features(self.features(data, n_jobs)).mean(axis=0)

    def predict(self, raw: RawDataset, n_jobs: int = 1) -> np.ndarray:
        X = apply_transform(self.transform, raw.columns)
        return self.predict_transformed(GroupedSamples(X, raw.group_index, raw.n_groups), n_jobs)

    def predict_draws(self, raw: RawDataset, n_jobs: int = 1) -> np.ndarray:
        X = apply_transform(self.transform, raw.columns)
        return self.predict_draws_features(self.features(GroupedSamples(X, raw.group_index, raw.n_groups), n_jobs))

    def linear_coefficients(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-draw raw-feature coefficients and intercepts (linear downstreams only)."""
        if self.downstream == "lasso":
            return self.fit.raw_coef[None, :], np.array([self.fit.intercept])
        if self.downstream == "horseshoe":
            return self.fit.raw_coef, self.fit.raw_intercept
        raise ValueError("a tree-ensemble downstream has no linear representer")

    def representer(self, points: np.ndarray) -> np.ndarray:
        """``n_draws x n_points`` draws of ``psi`` (intercept included)."""
        coef, icpt = self.linear_coefficients()
        points = np.atleast_2d(points)
        col_index = {m: k for k, m in enumerate(self.design.columns)}
        psi = np.tile(icpt[:, None], (1, points.shape[0]))
        for t, tree in enumerate(self.trees):
            leaves = tree.apply(points)
            cols = np.array([col_index.get((t, ell), -1) for ell in range(tree.n_leaves)])
            hit = cols[leaves]
            ok = hit >= 0
            if ok.any():
                psi[:, ok] += coef[:, hit[ok]]
        return psi

    def to_dict(self) -> dict:
        fit = self.fit.to_dict()
        return {
            "kind": "random-features",
            "transform": self.transform.to_dict() if self.transform is not None else None,
            "trees": [t.to_dict() for t in self.trees],
            "columns": [list(c) for c in self.design.columns],
            "dropped": [list(c) for c in self.design.dropped],
            "downstream": self.downstream,
            "downstream_fit": fit,
            "prior": _prior_dict(self.prior) if self.prior is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RandomFeatureModel:
        trees = [DecisionTree.from_dict(t) for t in d["trees"]]
        design = DesignMatrix(np.zeros((0, len(d["columns"]))), tuple(tuple(c) for c in d["columns"]),
                              tuple(tuple(c) for c in d["dropped"]))
        kind = d["downstream"]
        if kind == "lasso":
            fit = LassoFit.from_dict(d["downstream_fit"])
        elif kind == "horseshoe":
            fit = HorseshoeFit.from_dict(d["downstream_fit"])
        else:
            fit = PosteriorChain.from_dict(d["downstream_fit"])
        transform = PercentileTransform.from_dict(d["transform"]) if d.get("transform") else None
        prior = _prior_from_dict(d["prior"]) if d.get("prior") else None
        return cls(trees, design, kind, fit, transform, prior=prior)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")), encoding="utf-8")

    @classmethod
    def load(cls, path) -> RandomFeatureModel:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _prior_dict(p: TreePriorConfig) -> dict:
    return {"n_features": p.n_features, "alpha": p.alpha, "beta": p.beta, "n_trees": p.n_trees,
            "sigma_mu2": p.sigma_mu2, "split_probs": list(p.split_probs) if p.split_probs is not None else None}


def _prior_from_dict(d: dict) -> TreePriorConfig:
    split = tuple(d["split_probs"]) if d["split_probs"] is not None else None
    return TreePriorConfig(d["n_features"], d["alpha"], d["beta"], d["n_trees"], d["sigma_mu2"], split)


def fit_downstream(F: np.ndarray, y: np.ndarray, downstream: str, cfg: DownstreamConfig,
                   rng: np.random.Generator):
    if downstream == "lasso":
        return lasso_cv(F, y, cfg.folds, cfg.grid, rng, cfg.n_lambdas)
    if downstream == "horseshoe":
        return horseshoe_regression(F, y, cfg.hs_iter, cfg.hs_burn_in, rng)
    if downstream == "tree-ensemble":
        # one-sample groups whose lone "sample" is the feature vector
        singles = from_arrays(list(F[:, None, :]), y=y)
        return run_backfitting(singles, cfg.sampler)
    raise ValueError(f"unknown downstream {downstream!r}; expected one of {DOWNSTREAMS}")


def fit_distribution_regression(data: TransformedDataset, n_trees: int = 1000, prior: TreePriorConfig | None = None,
                                downstream: str = "lasso", cfg: DownstreamConfig | None = None,
                                rng: np.random.Generator | None = None, n_jobs: int = 1) -> RandomFeatureModel:
    """Featurize with prior trees and fit the chosen downstream regression."""
    if downstream not in DOWNSTREAMS:
        raise ValueError(f"unknown downstream {downstream!r}; expected one of {DOWNSTREAMS}")
    cfg = DownstreamConfig() if cfg is None else cfg
    rng = np.random.default_rng(0) if rng is None else rng
    prior = TreePriorConfig(data.X.shape[1], n_trees=n_trees) if prior is None else prior
    trees, design = sample_prior_feature_map(data, n_trees, prior, rng, n_jobs)
    fit = fit_downstream(design.values, np.asarray(data.y, dtype=float), downstream, cfg, rng)
    return RandomFeatureModel(trees, design, downstream, fit, data.transform, design.values, prior)


def predict_groups(model: RandomFeatureModel, groups: Sequence[np.ndarray]) -> np.ndarray:
    """Point predictions for groups given as arrays already in the unit cube."""
    return model.predict_transformed(from_arrays(groups))
