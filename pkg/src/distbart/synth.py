"""Synthetic copula benchmarks, ground-truth functionals and the benchmark runner."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .data import CONTINUOUS, ColumnSpec, RawDataset, fit_transform, transform_dataset
from .kernel import RBFConfig, baseline_features
from .randfeat import DownstreamConfig, fit_distribution_regression, lasso_cv
from .sampler import SamplerConfig, predict_dataset, run_backfitting
from .treeprior import TreePriorConfig

logger = logging.getLogger(__name__)

MARGINALS = ("exponential", "normal")
FUNCTIONALS = ("sparse", "main-effects")


def sample_correlation_matrix(P: int, rng: np.random.Generator, eta: float = 1.0) -> np.ndarray:
    """Onion-method draw from the LKJ(eta) law; ``eta=1`` is uniform over correlation matrices."""
    if P < 1:
        raise ValueError("P must be >= 1")
    R = np.ones((1, 1))
    if P == 1:
        return R
    b = eta + (P - 2) / 2.0
    r = 2.0 * rng.beta(b, b) - 1.0
    R = np.array([[1.0, r], [r, 1.0]])
    for k in range(2, P):
        b -= 0.5
        y = rng.beta(k / 2.0, b)
        u = rng.standard_normal(k)
        u /= np.linalg.norm(u)
        z = np.linalg.cholesky(R) @ (math.sqrt(y) * u)
        R = np.block([[R, z[:, None]], [z[None, :], np.ones((1, 1))]])
    return R


def _psd_root(R: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(R)
        return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class CopulaSpec:
    """Generative parameters of one group."""

    P: int
    marginal: str
    means: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        if self.marginal not in MARGINALS:
            raise ValueError(f"unknown marginal {self.marginal!r}")
        if self.means.shape != (self.P,) or self.R.shape != (self.P, self.P):
            raise ValueError("parameter shapes do not match P")
        if not np.allclose(self.R, self.R.T) or not np.allclose(np.diag(self.R), 1.0):
            raise ValueError("R must be a symmetric correlation matrix")
        if self.marginal == "exponential" and np.any(self.means <= 0):
            raise ValueError("exponential means must be positive")

    def sample(self, M: int, rng: np.random.Generator, columns: Sequence[int] | None = None) -> np.ndarray:
        cols = np.arange(self.P) if columns is None else np.asarray(columns)
        R = self.R[np.ix_(cols, cols)]
        Z = rng.standard_normal((M, cols.size)) @ _psd_root(R).T
        m = self.means[cols]
        if self.marginal == "normal":
            return m + Z
        # inverse exponential CDF at Phi(Z): -m log(1 - Phi(Z)) = -m log Phi(-Z)
        return -m * np.log(ndtr(-Z))


def draw_copula_spec(P: int, marginal: str, rng: np.random.Generator) -> CopulaSpec:
    means = rng.exponential(1.0, P) if marginal == "exponential" else rng.standard_normal(P)
    return CopulaSpec(P, marginal, means, sample_correlation_matrix(P, rng))


@dataclass
class TruthRecord:
    """True ``f(G_i)`` per group with its evaluation method."""

    group_ids: tuple[str, ...]
    f: np.ndarray
    se: np.ndarray
    method: str
    mc_samples: int = 0

    def __post_init__(self):
        if self.method == "monte-carlo" and self.se.shape != self.f.shape:
            raise ValueError("Monte Carlo truths need standard errors")

    def subset(self, idx) -> TruthRecord:
        idx = np.asarray(idx)
        return TruthRecord(tuple(self.group_ids[i] for i in idx), self.f[idx], self.se[idx], self.method,
                           self.mc_samples)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group_id", "f_true", "se"])
            for gid, f, se in zip(self.group_ids, self.f, self.se):
                w.writerow([gid, repr(float(f)), repr(float(se))])

    @classmethod
    def read_csv(cls, path) -> TruthRecord:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        se = np.array([float(r["se"]) for r in rows])
        return cls(tuple(r["group_id"] for r in rows), np.array([float(r["f_true"]) for r in rows]), se,
                   "monte-carlo" if np.any(se > 0) else "analytic")


def true_functional(spec: CopulaSpec, functional: str, mc_samples: int = 100_000,
                    rng: np.random.Generator | None = None, weights=None) -> tuple[float, float, str]:
    """``(value, standard error, method)`` of ``E[psi(X)]`` under ``spec``.

    Main effects take optional per-covariate ``weights`` (default all ones).
    """
    if functional == "main-effects":
        w = np.ones(spec.P) if weights is None else np.asarray(weights, dtype=float)
        return float(w @ spec.means), 0.0, "analytic"
    if functional != "sparse":
        raise ValueError(f"unknown functional {functional!r}")
    if spec.P < 4:
        raise ValueError("sparse requires P ≥ 4")
    m, R = spec.means, spec.R
    if spec.marginal == "normal":
        return float(R[0, 1] + m[0] * m[1] + R[2, 3] + m[2] * m[3]), 0.0, "analytic"
    rng = np.random.default_rng(0) if rng is None else rng
    X = spec.sample(mc_samples, rng, columns=[0, 1, 2, 3])
    v = X[:, 0] * X[:, 1] + X[:, 2] * X[:, 3]
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(mc_samples)), "monte-carlo"


@dataclass(frozen=True)
class BenchmarkConfig:
    marginal: str = "exponential"
    functional: str = "sparse"
    N: int = 400
    P: int = 10
    M: int = 200
    seed: int = 0
    noise_frac: float = 0.1
    mc_samples: int = 100_000
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.marginal not in MARGINALS:
            raise ValueError(f"unknown marginal {self.marginal!r}; expected one of {MARGINALS}")
        if self.functional not in FUNCTIONALS:
            raise ValueError(f"unknown functional {self.functional!r}; expected one of {FUNCTIONALS}")
        if self.functional == "sparse" and self.P < 4:
            raise ValueError("sparse requires P ≥ 4")
        if min(self.N, self.P, self.M) < 1:
            raise ValueError("N, P and M must be positive")
        if self.noise_frac < 0:
            raise ValueError("noise_frac must be non-negative")
        if self.weights is not None and len(self.weights) != self.P:
            raise ValueError("weights must have length P")


def generate_benchmark(cfg: BenchmarkConfig) -> tuple[RawDataset, TruthRecord, list[CopulaSpec]]:
    """Draw ``cfg.N`` groups with outcomes ``f(G_i) + noise``.

    Every group uses its own child seed, so a group's samples do not depend
    on how many other groups are drawn.
    """
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.N + 1)
    specs, blocks, f, se = [], [], np.empty(cfg.N), np.zeros(cfg.N)
    method = "analytic"
    for i in range(cfg.N):
        g_rng = np.random.default_rng(children[i])
        spec = draw_copula_spec(cfg.P, cfg.marginal, g_rng)
        blocks.append(spec.sample(cfg.M, g_rng))
        f[i], se[i], method = true_functional(spec, cfg.functional, cfg.mc_samples, g_rng, cfg.weights)
        specs.append(spec)
    noise_sd = cfg.noise_frac * float(np.std(f))
    y = f + noise_sd * np.random.default_rng(children[cfg.N]).standard_normal(cfg.N)
    width = len(str(cfg.N))
    ids = tuple(f"g{i:0{width}d}" for i in range(cfg.N))
    X = np.vstack(blocks)
    names = [f"x{p + 1}" for p in range(cfg.P)]
    raw = RawDataset(
        group_ids=ids,
        y=y,
        schema=tuple(ColumnSpec(n, CONTINUOUS) for n in names),
        columns={n: X[:, p].copy() for p, n in enumerate(names)},
        group_index=np.repeat(np.arange(cfg.N), cfg.M),
    )
    return raw, TruthRecord(ids, f, se, method, cfg.mc_samples if method == "monte-carlo" else 0), specs


def evaluate_metrics(truth, predictions) -> dict:
    """RMSE against the true functional and squared correlation."""
    f = np.asarray(truth.f if isinstance(truth, TruthRecord) else truth, dtype=float)
    pred = np.asarray(predictions, dtype=float)
    if f.shape != pred.shape:
        raise ValueError("length mismatch")
    rmse = float(np.sqrt(np.mean((pred - f) ** 2)))
    if np.ptp(pred) == 0 or np.ptp(f) == 0:
        return {"rmse": rmse, "r2": 0.0, "r2_undefined": True}
    return {"rmse": rmse, "r2": float(np.corrcoef(pred, f)[0, 1] ** 2), "r2_undefined": False}


# ----------------------------------------------------------------------------
# methods


@dataclass(frozen=True)
class MethodOptions:
    n_trees: int = 1000
    alpha: float = 0.95
    beta: float = 2.0
    folds: int = 10
    n_landmarks: int = 100
    bandwidth: float | None = None
    gibbs: SamplerConfig = field(default_factory=lambda: SamplerConfig(n_iter=1000, burn_in=250))
    n_jobs: int = 1


Method = Callable[[RawDataset, RawDataset, np.random.Generator, MethodOptions], np.ndarray]


def _tree_features(downstream: str) -> Method:
    def run(train, test, rng, opt):
        data, transform = fit_transform(train)
        prior = TreePriorConfig(data.n_features, opt.alpha, opt.beta, opt.n_trees)
        cfg = DownstreamConfig(folds=opt.folds)
        model = fit_distribution_regression(data, opt.n_trees, prior, downstream, cfg, rng, opt.n_jobs)
        return model.predict(test, opt.n_jobs)
    return run


def _baseline(kind: str) -> Method:
    def run(train, test, rng, opt):
        if kind == "rbf":
            data, transform = fit_transform(train)
            tdata = transform_dataset(transform, test)
            rbf = RBFConfig.fit(data, rng, opt.n_landmarks, opt.bandwidth)
            F_tr = baseline_features(data, "rbf", rbf).values
            F_te = baseline_features(tdata, "rbf", rbf).values
        else:
            F_tr = baseline_features(train.numeric(), kind).values
            F_te = baseline_features(test.numeric(), kind).values
        return lasso_cv(F_tr, train.y, opt.folds, None, rng).predict(F_te)
    return run


def _gibbs(train, test, rng, opt):
    data, transform = fit_transform(train)
    cfg = replace(opt.gibbs, seed=int(rng.integers(2**31)), n_jobs=opt.n_jobs)
    chain = run_backfitting(data, cfg)
    return predict_dataset(chain, test, transform, opt.n_jobs).mean(axis=0)


METHODS: dict[str, Method] = {
    "tree-lasso": _tree_features("lasso"),
    "tree-horseshoe": _tree_features("horseshoe"),
    "mean": _baseline("mean"),
    "mean+var": _baseline("mean+var"),
    "rbf": _baseline("rbf"),
    "gibbs": _gibbs,
}


@dataclass(frozen=True)
class BenchmarkGrid:
    methods: tuple[str, ...] = ("tree-lasso", "mean")
    marginals: tuple[str, ...] = ("exponential",)
    functionals: tuple[str, ...] = ("sparse",)
    Ns: tuple[int, ...] = (400,)
    Ps: tuple[int, ...] = (10,)
    Ms: tuple[int, ...] = (200,)
    reps: int = 10
    n_test: int = 200
    seed: int = 0
    noise_frac: float = 0.1
    mc_samples: int = 100_000

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown method(s) {unknown}; expected some of {sorted(METHODS)}")
        if self.reps < 1 or self.n_test < 2:
            raise ValueError("need reps >= 1 and n_test >= 2")


@dataclass(frozen=True)
class BenchmarkRow:
    method: str
    marginal: str
    functional: str
    N: int
    P: int
    M: int
    rep: int
    rmse: float


def _cell_seed(grid: BenchmarkGrid, *key) -> np.random.SeedSequence:
    return np.random.SeedSequence([grid.seed, zlib.crc32(repr(key).encode())])


def run_replicate(grid: BenchmarkGrid, marginal: str, functional: str, N: int, P: int, M: int, rep: int,
                  options: MethodOptions | None = None) -> list[BenchmarkRow]:
    """One replicate: ``N`` training groups plus ``grid.n_test`` test groups, scored on test truth."""
    options = MethodOptions() if options is None else options
    ss = _cell_seed(grid, marginal, functional, N, P, M, rep)
    data_seed, *method_seeds = ss.spawn(1 + len(grid.methods))
    cfg = BenchmarkConfig(marginal, functional, N + grid.n_test, P, M, int(data_seed.generate_state(1)[0]),
                          grid.noise_frac, grid.mc_samples)
    raw, truth, _ = generate_benchmark(cfg)
    train_idx, test_idx = np.arange(N), np.arange(N, N + grid.n_test)
    train, test = raw.subset(train_idx), raw.subset(test_idx)
    f_test = truth.f[test_idx]
    rows = []
    for name, seq in zip(grid.methods, method_seeds):
        pred = METHODS[name](train, test, np.random.default_rng(seq), options)
        rmse = evaluate_metrics(f_test, pred)["rmse"]
        logger.info("%s %s %s N=%d P=%d M=%d rep=%d rmse=%.4g", name, marginal, functional, N, P, M, rep, rmse)
        rows.append(BenchmarkRow(name, marginal, functional, N, P, M, rep, rmse))
    return rows


def run_benchmark(grid: BenchmarkGrid, options: MethodOptions | None = None) -> list[BenchmarkRow]:
    rows = []
    for marginal, functional, N, P, M in itertools.product(grid.marginals, grid.functionals, grid.Ns, grid.Ps,
                                                           grid.Ms):
        if functional == "sparse" and P < 4:
            raise ValueError("sparse requires P ≥ 4")
        for rep in range(grid.reps):
            rows.extend(run_replicate(grid, marginal, functional, N, P, M, rep, options))
    return rows


def write_benchmark_csv(path, rows: Sequence[BenchmarkRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "marginal", "functional", "N", "P", "M", "rep", "rmse"])
        for r in rows:
            w.writerow([r.method, r.marginal, r.functional, r.N, r.P, r.M, r.rep, repr(float(r.rmse))])
