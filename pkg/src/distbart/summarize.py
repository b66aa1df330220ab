"""Interpreting a fitted representer: additive projections, summary-R² and LOCO."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import qr, solve_triangular

from .data import CONTINUOUS, ColumnBlock, GroupedSamples, RawDataset
from .treeprior import DecisionTree

logger = logging.getLogger(__name__)


def evaluate_representer(trees: Sequence[DecisionTree], points) -> np.ndarray:
    """``psi(x) = sum_t mu_t(leaf of x)`` for an ensemble carrying leaf values."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    psi = np.zeros(points.shape[0])
    for tree in trees:
        psi += tree.leaf_values[tree.apply(points)]
    return psi


def psi_draws(model, points, max_draws: int | None = None) -> np.ndarray:
    """``n_draws x n_points`` representer draws for a chain or random-feature model."""
    points = np.atleast_2d(points)
    if hasattr(model, "topologies"):
        draws = range(model.n_draws) if max_draws is None else np.linspace(
            0, model.n_draws - 1, min(max_draws, model.n_draws)).astype(int)
        return np.vstack([model.representer(int(d), points) for d in draws])
    out = model.representer(points)
    if max_draws is not None and out.shape[0] > max_draws:
        out = out[np.linspace(0, out.shape[0] - 1, max_draws).astype(int)]
    return out


def reference_points(data: GroupedSamples, max_points: int = 10_000, seed: int = 0) -> np.ndarray:
    """Pooled sample rows, subsampled without replacement to ``max_points``."""
    X = data.X
    if X.shape[0] <= max_points:
        return X.copy()
    idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], max_points, replace=False))
    return X[idx]


def summary_r2(psi, psi_tilde) -> float:
    """``1 - mean((psi - psi_tilde)^2) / var(psi)``; 1 when ``psi`` is constant."""
    psi = np.asarray(psi, dtype=float)
    psi_tilde = np.asarray(psi_tilde, dtype=float)
    if psi.shape != psi_tilde.shape:
        raise ValueError("length mismatch")
    var = np.var(psi)
    if var <= (1e-14 * max(1.0, float(np.max(np.abs(psi))))) ** 2:
        return 1.0
    return float(1.0 - np.mean((psi - psi_tilde) ** 2) / var)


# ----------------------------------------------------------------------------
# additive basis


@dataclass(frozen=True)
class BasisConfig:
    n_interior_knots: int = 10
    degree: int = 3


@dataclass(frozen=True)
class _Component:
    name: str
    kind: str
    columns: tuple[int, ...]          # coordinates of the point array
    knots: np.ndarray | None          # full spline knot vector
    levels: tuple[str, ...]

    def basis(self, points: np.ndarray, degree: int) -> np.ndarray:
        """Block with its first column removed (the intercept carries it)."""
        if self.kind == CONTINUOUS:
            u = np.clip(points[:, self.columns[0]], 0.0, 1.0)
            B = BSpline.design_matrix(u, self.knots, degree).toarray()
        else:
            B = points[:, list(self.columns)]
        return B[:, 1:]


def _components(blocks: Sequence[ColumnBlock], points: np.ndarray, cfg: BasisConfig) -> list[_Component]:
    comps = []
    probs = np.arange(1, cfg.n_interior_knots + 1) / (cfg.n_interior_knots + 1)
    for b in blocks:
        if b.kind == CONTINUOUS:
            inner = np.unique(np.quantile(points[:, b.columns[0]], probs))
            inner = inner[(inner > 0.0) & (inner < 1.0)]
            knots = np.concatenate([np.zeros(cfg.degree + 1), inner, np.ones(cfg.degree + 1)])
            comps.append(_Component(b.name, b.kind, b.columns, knots, ()))
        else:
            comps.append(_Component(b.name, b.kind, b.columns, None, b.levels))
    return comps


def default_blocks(n_features: int, names: Sequence[str] | None = None) -> tuple[ColumnBlock, ...]:
    names = names or [f"x{p}" for p in range(n_features)]
    return tuple(ColumnBlock(n, CONTINUOUS, (p,)) for p, n in enumerate(names))


@dataclass
class ComponentSummary:
    name: str
    kind: str
    grid: np.ndarray          # transformed coordinate, or level labels
    draws: np.ndarray         # n_draws x len(grid), centered over the reference
    raw_grid: np.ndarray | None = None

    @property
    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    def band(self, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        a = 50 * (1 - level)
        return np.percentile(self.draws, a, axis=0), np.percentile(self.draws, 100 - a, axis=0)

    def write_csv(self, path) -> None:
        lo, hi = self.band()
        grid = self.raw_grid if self.raw_grid is not None else self.grid
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["grid", "mean", "lo", "hi"])
            for g, m, a, b in zip(grid, self.mean, lo, hi):
                w.writerow([g if isinstance(g, str) else repr(float(g)), repr(float(m)), repr(float(a)), repr(float(b))])


@dataclass
class AdditiveSummary:
    """Per-draw additive projections of the representer over reference points."""

    components: list[ComponentSummary]
    intercept: np.ndarray
    r2: np.ndarray
    reference: dict
    fitted: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 0)))
    component_reference: dict = field(repr=False, default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    design: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 0)))

    def component(self, name: str) -> ComponentSummary:
        for c in self.components:
            if c.name == name:
                return c
        raise KeyError(name)

    def write_csv(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for c in self.components:
            p = directory / f"{c.name}.csv"
            c.write_csv(p)
            paths.append(p)
        return paths


def additive_projection(psi, points, blocks: Sequence[ColumnBlock] | None = None, cfg: BasisConfig | None = None,
                        grid_size: int = 101, transform=None) -> AdditiveSummary:
    """Least-squares projection of each row of ``psi`` onto an additive basis.

    ``psi`` is ``n_draws x n_points`` (or one draw) evaluated at ``points``.
    Continuous covariates use cubic B-splines with interior knots at
    reference quantiles; categorical covariates use level indicators.
    """
    cfg = BasisConfig() if cfg is None else cfg
    points = np.atleast_2d(np.asarray(points, dtype=float))
    psi = np.atleast_2d(np.asarray(psi, dtype=float))
    if psi.shape[1] != points.shape[0]:
        raise ValueError("psi columns must match reference points")
    if blocks is None:
        blocks = transform.blocks if transform is not None else default_blocks(points.shape[1])
    comps = _components(blocks, points, cfg)
    parts = [c.basis(points, cfg.degree) for c in comps]
    sizes = [p.shape[1] for p in parts]
    B = np.hstack([np.ones((points.shape[0], 1)), *parts])
    if points.shape[0] < B.shape[1]:
        raise ValueError(f"need at least {B.shape[1]} reference points for this basis")

    norms = np.linalg.norm(B, axis=0)
    norms[norms == 0] = 1.0
    Q, R, piv = qr(B / norms, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > diag[0] * 1e-10)) if diag.size else 0
    warnings = []
    if rank < B.shape[1]:
        msg = f"additive basis is rank deficient; dropped {B.shape[1] - rank} redundant column(s)"
        warnings.append(msg)
        logger.warning(msg)
    coef = np.zeros((B.shape[1], psi.shape[0]))
    sol = solve_triangular(R[:rank, :rank], Q[:, :rank].T @ psi.T)
    coef[piv[:rank]] = sol / norms[piv[:rank], None]

    offsets = np.cumsum([1, *sizes])
    contrib = []
    for k, part in enumerate(parts):
        contrib.append(part @ coef[offsets[k]:offsets[k + 1]])          # n_points x n_draws
    ref_means = [c.mean(axis=0) for c in contrib]
    intercept = coef[0] + np.sum(ref_means, axis=0) if parts else coef[0].copy()
    fitted = B @ coef                                                    # n_points x n_draws
    r2 = np.array([summary_r2(psi[d], fitted[:, d]) for d in range(psi.shape[0])])

    summaries = []
    for k, comp in enumerate(comps):
        if comp.kind == CONTINUOUS:
            grid = np.linspace(0.0, 1.0, grid_size)
            gp = np.zeros((grid_size, points.shape[1]))
            gp[:, comp.columns[0]] = grid
            raw = None
            if transform is not None and comp.name in transform.knots:
                raw = np.interp(grid, transform.percentiles[comp.name], transform.knots[comp.name])
            labels = grid
        else:
            gp = np.zeros((len(comp.columns), points.shape[1]))
            gp[np.arange(len(comp.columns)), list(comp.columns)] = 1.0
            labels = np.array(comp.levels, dtype=object)
            raw = None
        vals = comp.basis(gp, cfg.degree) @ coef[offsets[k]:offsets[k + 1]] - ref_means[k]
        summaries.append(ComponentSummary(comp.name, comp.kind, labels, vals.T, raw))
    return AdditiveSummary(
        components=summaries,
        intercept=np.asarray(intercept),
        r2=r2,
        reference={"n_points": int(points.shape[0]), "basis_columns": int(B.shape[1]), "rank": rank},
        fitted=fitted.T,
        component_reference={c.name: (contrib[k] - ref_means[k]).T for k, c in enumerate(comps)},
        warnings=warnings,
        design=B,
    )


# ----------------------------------------------------------------------------
# LOCO

FitProcedure = Callable[[RawDataset, np.random.Generator], Callable[[RawDataset], np.ndarray]]


def correlation_r2(pred, y) -> float:
    """Squared correlation; 0 when predictions are constant."""
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.ptp(y) == 0:
        raise ValueError("test outcomes are constant; R² is undefined")
    if np.ptp(pred) == 0:
        return 0.0
    return float(np.corrcoef(pred, y)[0, 1] ** 2)


@dataclass
class LocoReport:
    covariates: list[str]
    r2_full: float
    r2_reduced: np.ndarray
    train_index: np.ndarray
    test_index: np.ndarray
    seed: int

    @property
    def importance(self) -> np.ndarray:
        return self.r2_full - self.r2_reduced

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["covariate", "r2_full", "r2_reduced", "importance"])
            for name, red, imp in zip(self.covariates, self.r2_reduced, self.importance):
                w.writerow([name, repr(float(self.r2_full)), repr(float(red)), repr(float(imp))])


def _mean_predictor(train: RawDataset) -> Callable[[RawDataset], np.ndarray]:
    mu = float(np.mean(train.y))
    return lambda test: np.full(test.n_groups, mu)


def loco_importance(raw: RawDataset, fit_procedure: FitProcedure, train_fraction: float = 0.8,
                    rng: np.random.Generator | None = None, covariates: Sequence[str] | None = None) -> LocoReport:
    """Leave-one-covariate-out drop in held-out squared correlation.

    ``fit_procedure(train, rng)`` returns a predictor mapping a raw dataset to
    point predictions; it is responsible for fitting its own transform on
    the training split. Each fit gets its own derived generator.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    N = raw.n_groups
    n_train = int(round(train_fraction * N))
    if n_train < 2 or N - n_train < 2:
        raise ValueError("both splits need at least two groups")
    seed = int(rng.integers(2**63))
    perm = np.random.default_rng(seed).permutation(N)
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    train, test = raw.subset(tr), raw.subset(te)
    if np.ptp(test.y) == 0:
        raise ValueError("test outcomes are constant; R² is undefined")
    names = list(raw.covariate_names if covariates is None else covariates)
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names) + 1)]
    r2_full = correlation_r2(fit_procedure(train, streams[0])(test), test.y)
    reduced = []
    for k, name in enumerate(names):
        tr_k, te_k = train.drop_covariates([name]), test.drop_covariates([name])
        predictor = _mean_predictor(tr_k) if tr_k.n_covariates == 0 else fit_procedure(tr_k, streams[k + 1])
        reduced.append(correlation_r2(predictor(te_k), test.y))
    return LocoReport(names, r2_full, np.asarray(reduced), tr, te, seed)
