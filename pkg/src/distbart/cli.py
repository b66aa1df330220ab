"""Command-line entry point: ``distbart {fit,predict,simulate,summarize,benchmark}``.

Every subcommand prints one JSON result line on success. Exit status is 0 on
success, 1 on a runtime failure and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DataLoadError, fit_transform, load_dataset, transform_dataset, write_dataset
from .randfeat import DOWNSTREAMS, DownstreamConfig, RandomFeatureModel, fit_distribution_regression
from .sampler import PosteriorChain, SamplerConfig, predict_dataset, run_backfitting
from .summarize import additive_projection, loco_importance, psi_draws, reference_points
from .synth import (FUNCTIONALS, MARGINALS, METHODS, BenchmarkConfig, BenchmarkGrid, MethodOptions,
                    generate_benchmark, run_benchmark, write_benchmark_csv)
from .treeprior import TreePriorConfig

logger = logging.getLogger("distbart")

METHOD_CHOICES = ("gibbs", "random-features")


class CommandError(Exception):
    def __init__(self, operation: str, message: str, code: int):
        super().__init__(f"{operation}: {message}")
        self.operation = operation
        self.code = code


@contextlib.contextmanager
def _op(name: str):
    """Tag any failure inside the block with the operation that raised it."""
    try:
        yield
    except CommandError:
        raise
    except DataLoadError as exc:
        raise CommandError(name, str(exc), 1) from exc
    except (ValueError, FileNotFoundError) as exc:
        raise CommandError(name, str(exc), 2) from exc
    except Exception as exc:  # noqa: BLE001 - reported, never swallowed
        raise CommandError(name, f"{type(exc).__name__}: {exc}", 1) from exc


# ----------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of flag values; command-line flags take precedence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-jobs", type=int, default=1, help="featurization threads (outputs do not depend on it)")
    p.add_argument("--verbose", action="store_true")


def _add_model_hparams(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=METHOD_CHOICES, default="gibbs")
    p.add_argument("--downstream", choices=DOWNSTREAMS, default="lasso")
    p.add_argument("--n-trees", type=int, default=None, help="default 200 for gibbs, 1000 for random features")
    p.add_argument("--alpha", type=float, default=0.95)
    p.add_argument("--beta", type=float, default=2.0, help="depth exponent")
    p.add_argument("--sigma-mu2", type=float, default=None)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--n-iter", type=int, default=2500)
    p.add_argument("--burn-in", type=int, default=500)
    p.add_argument("--folds", type=int, default=10)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distbart", description="Tree-based distribution regression.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("fit", help="fit a model to grouped samples")
    _add_common(p)
    p.add_argument("--samples")
    p.add_argument("--outcomes")
    p.add_argument("--schema")
    p.add_argument("--model", help="output model file")
    p.add_argument("--fitted", help="optional CSV of in-sample fitted values")
    _add_model_hparams(p)

    p = sub.add_parser("predict", help="predict outcomes for new groups")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--samples")
    p.add_argument("--output")
    p.add_argument("--draws", help="optional CSV with one row per posterior draw")

    p = sub.add_parser("simulate", help="generate a synthetic copula benchmark")
    _add_common(p)
    p.add_argument("--marginal", choices=MARGINALS, default="exponential")
    p.add_argument("--functional", choices=FUNCTIONALS, default="sparse")
    p.add_argument("--N", type=int, default=400)
    p.add_argument("--P", type=int, default=10)
    p.add_argument("--M", type=int, default=200)
    p.add_argument("--noise-frac", type=float, default=0.1)
    p.add_argument("--mc-samples", type=int, default=100_000)
    p.add_argument("--out-dir")

    p = sub.add_parser("summarize", help="additive summary and optional LOCO importance")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--samples", help="samples defining the reference distribution")
    p.add_argument("--outcomes", help="required with --loco")
    p.add_argument("--out-dir")
    p.add_argument("--max-points", type=int, default=10_000)
    p.add_argument("--max-draws", type=int, default=200)
    p.add_argument("--loco", action="store_true")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--folds", type=int, default=10)

    p = sub.add_parser("benchmark", help="run a synthetic benchmark grid")
    _add_common(p)
    p.add_argument("--methods", nargs="+", choices=sorted(METHODS), default=["tree-lasso", "mean"])
    p.add_argument("--marginals", nargs="+", choices=MARGINALS, default=["exponential"])
    p.add_argument("--functionals", nargs="+", choices=FUNCTIONALS, default=["sparse"])
    p.add_argument("--N", nargs="+", type=int, default=[400])
    p.add_argument("--P", nargs="+", type=int, default=[10])
    p.add_argument("--M", nargs="+", type=int, default=[200])
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--noise-frac", type=float, default=0.1)
    p.add_argument("--mc-samples", type=int, default=100_000)
    p.add_argument("--n-trees", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.95)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--n-landmarks", type=int, default=100)
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--output")
    return parser


REQUIRED = {
    "fit": ("samples", "outcomes", "model"),
    "predict": ("model", "samples", "output"),
    "simulate": ("out_dir",),
    "summarize": ("model", "samples", "out_dir"),
    "benchmark": ("output",),
}


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:  # argparse keeps these private
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str], args: argparse.Namespace):
    """Re-parse with the JSON config as defaults, so explicit flags still win."""
    sp = _subparser(parser, args.command)
    path = Path(args.config)
    if not path.is_file():
        sp.error(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        sp.error(f"config file is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        sp.error("config file must hold a JSON object")
    dests = {a.dest for a in sp._actions}
    values = {}
    for key, val in raw.items():
        dest = key.replace("-", "_")
        if dest not in dests or dest in ("config", "help"):
            sp.error(f"unknown config key {key!r}")
        values[dest] = val
    for action in sp._actions:
        if action.choices is None or action.dest not in values:
            continue
        val = values[action.dest]
        items = val if isinstance(val, list) else [val]
        bad = [v for v in items if v not in action.choices]
        if bad:
            sp.error(f"config key {action.dest!r}: invalid choice {bad[0]!r}")
    sp.set_defaults(**values)
    return parser.parse_args(argv)


def parse_args(argv: Sequence[str]) -> tuple[argparse.ArgumentParser, argparse.Namespace]:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("a command is required")
    if args.config is not None:
        args = _apply_config(parser, argv, args)
    sp = _subparser(parser, args.command)
    missing = [f"--{d.replace('_', '-')}" for d in REQUIRED[args.command] if getattr(args, d) is None]
    if missing:
        sp.error(f"missing required option(s): {', '.join(missing)}")
    return parser, args


# ----------------------------------------------------------------------------
# helpers


def _require_file(path, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CommandError("cli.check_inputs", f"{flag}: file not found: {p}", 2)
    return p


def load_model(path) -> PosteriorChain | RandomFeatureModel:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    kind = d.get("kind")
    if kind == "gibbs":
        return PosteriorChain.from_dict(d)
    if kind == "random-features":
        return RandomFeatureModel.from_dict(d)
    raise ValueError(f"unrecognized model kind {kind!r}")


def model_draws(model, raw, n_jobs: int = 1) -> np.ndarray:
    """``n_draws x n_groups`` predictive draws of ``f``."""
    if isinstance(model, PosteriorChain):
        return predict_dataset(model, raw, n_jobs=n_jobs)
    return model.predict_draws(raw, n_jobs)


def _write_predictions(path, group_ids, draws: np.ndarray) -> None:
    mean = draws.mean(axis=0)
    lo, hi = np.percentile(draws, [2.5, 97.5], axis=0)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_id", "mean", "lo", "hi"])
        for row in zip(group_ids, mean, lo, hi):
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])


def _write_draws(path, group_ids, draws: np.ndarray) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["draw", *group_ids])
        for d, row in enumerate(draws):
            w.writerow([d, *(repr(float(v)) for v in row)])


def _sampler_config(args) -> SamplerConfig:
    return SamplerConfig(
        n_iter=args.n_iter, burn_in=args.burn_in, n_trees=args.n_trees or 200, alpha=args.alpha,
        beta=args.beta, sigma_mu2=args.sigma_mu2, eta=args.eta, seed=args.seed, n_jobs=args.n_jobs,
    )


def _fit(data, args):
    if args.method == "gibbs":
        return run_backfitting(data, _sampler_config(args))
    n_trees = args.n_trees or 1000
    sigma_mu2 = 1.0 if args.sigma_mu2 is None else args.sigma_mu2
    prior = TreePriorConfig(data.n_features, args.alpha, args.beta, n_trees, sigma_mu2)
    cfg = DownstreamConfig(folds=args.folds, hs_iter=args.n_iter, hs_burn_in=args.burn_in,
                           sampler=replace(_sampler_config(args), n_trees=args.n_trees or 200))
    return fit_distribution_regression(data, n_trees, prior, args.downstream, cfg,
                                       np.random.default_rng(args.seed), args.n_jobs)


def _save_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, separators=(",", ":"), sort_keys=True) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# commands


def cmd_fit(args) -> dict:
    samples = _require_file(args.samples, "--samples")
    outcomes = _require_file(args.outcomes, "--outcomes")
    schema = _require_file(args.schema, "--schema") if args.schema else None
    with _op("data.load_dataset"):
        raw = load_dataset(samples, outcomes, schema)
    with _op("data.fit_transform"):
        data, _ = fit_transform(raw)
    op = "sampler.run_backfitting" if args.method == "gibbs" else "randfeat.fit_distribution_regression"
    with _op(op):
        model = _fit(data, args)
    with _op("cli.save_model"):
        model.save(args.model)
        if args.fitted:
            draws = model.fitted if isinstance(model, PosteriorChain) else model.predict_draws_features(
                model.train_features)
            _write_predictions(args.fitted, raw.group_ids, draws)
    return {"command": "fit", "method": args.method, "model": str(args.model), "n_groups": raw.n_groups}


def cmd_predict(args) -> dict:
    _require_file(args.model, "--model")
    samples = _require_file(args.samples, "--samples")
    with _op("cli.load_model"):
        model = load_model(args.model)
    with _op("data.load_dataset"):
        raw = load_dataset(samples, None, list(model.transform.schema) if model.transform else None)
    with _op("predict"):
        draws = model_draws(model, raw, args.n_jobs)
    with _op("cli.write_predictions"):
        _write_predictions(args.output, raw.group_ids, draws)
        if args.draws:
            _write_draws(args.draws, raw.group_ids, draws)
    return {"command": "predict", "output": str(args.output), "n_groups": raw.n_groups,
            "n_draws": int(draws.shape[0])}


def cmd_simulate(args) -> dict:
    with _op("synth.BenchmarkConfig"):
        cfg = BenchmarkConfig(args.marginal, args.functional, args.N, args.P, args.M, args.seed,
                              args.noise_frac, args.mc_samples)
    with _op("synth.generate_benchmark"):
        raw, truth, _ = generate_benchmark(cfg)
    out = Path(args.out_dir)
    with _op("cli.write_benchmark_data"):
        out.mkdir(parents=True, exist_ok=True)
        write_dataset(raw, out / "samples.csv", out / "outcomes.csv")
        truth.write_csv(out / "truth.csv")
    return {"command": "simulate", "out_dir": str(out), "n_groups": raw.n_groups, "truth_method": truth.method}


def _refit_procedure(model, args):
    """A fit procedure reproducing the stored model's settings on new data."""
    if isinstance(model, PosteriorChain):
        if model.config is None:
            raise ValueError("model file lacks a sampler config; refit with 'distbart fit'")
        base = replace(model.config, n_jobs=args.n_jobs)

        def fit(train, rng):
            data, transform = fit_transform(train)
            chain = run_backfitting(data, replace(base, seed=int(rng.integers(2**31))))
            return lambda test: predict_dataset(chain, test, transform, args.n_jobs).mean(axis=0)
        return fit
    prior = model.prior
    n_trees = len(model.trees)

    def fit(train, rng):
        data, _ = fit_transform(train)
        p = TreePriorConfig(data.n_features, n_trees=n_trees) if prior is None else replace(
            prior, n_features=data.n_features)
        m = fit_distribution_regression(data, n_trees, p, model.downstream, DownstreamConfig(folds=args.folds),
                                        rng, args.n_jobs)
        return lambda test: m.predict(test, args.n_jobs)
    return fit


def cmd_summarize(args) -> dict:
    _require_file(args.model, "--model")
    samples = _require_file(args.samples, "--samples")
    if args.loco and args.outcomes is None:
        raise CommandError("cli.check_inputs", "--loco needs --outcomes", 2)
    outcomes = _require_file(args.outcomes, "--outcomes") if args.outcomes else None
    with _op("cli.load_model"):
        model = load_model(args.model)
    if isinstance(model, RandomFeatureModel) and model.downstream == "tree-ensemble":
        raise CommandError("summarize.psi_draws", "a tree-ensemble downstream has no additive representer", 2)
    if model.transform is None:
        raise CommandError("summarize.reference_points", "model file lacks its feature transform", 2)
    with _op("data.load_dataset"):
        raw = load_dataset(samples, outcomes, list(model.transform.schema))
    with _op("summarize.reference_points"):
        points = reference_points(transform_dataset(model.transform, raw), args.max_points, args.seed)
    with _op("summarize.psi_draws"):
        psi = psi_draws(model, points, args.max_draws)
    with _op("summarize.additive_projection"):
        summary = additive_projection(psi, points, transform=model.transform)
    out = Path(args.out_dir)
    record = {
        "n_draws": int(psi.shape[0]),
        "reference": summary.reference,
        "summary_r2": {"mean": float(summary.r2.mean()), "lo": float(np.percentile(summary.r2, 2.5)),
                       "hi": float(np.percentile(summary.r2, 97.5)), "draws": summary.r2.tolist()},
        "warnings": list(summary.warnings),
    }
    with _op("cli.write_summary"):
        out.mkdir(parents=True, exist_ok=True)
        summary.write_csv(out)
    if args.loco:
        with _op("summarize.loco_importance"):
            report = loco_importance(raw, _refit_procedure(model, args), args.train_fraction,
                                     np.random.default_rng(args.seed))
        with _op("cli.write_summary"):
            report.write_csv(out / "loco.csv")
        record["loco"] = {"r2_full": float(report.r2_full),
                          "importance": dict(zip(report.covariates, map(float, report.importance)))}
    with _op("cli.write_summary"):
        _save_json(out / "summary.json", record)
    return {"command": "summarize", "out_dir": str(out), "summary_r2": record["summary_r2"]["mean"]}


def cmd_benchmark(args) -> dict:
    with _op("synth.BenchmarkGrid"):
        grid = BenchmarkGrid(tuple(args.methods), tuple(args.marginals), tuple(args.functionals), tuple(args.N),
                             tuple(args.P), tuple(args.M), args.reps, args.n_test, args.seed, args.noise_frac,
                             args.mc_samples)
        if "sparse" in grid.functionals and min(grid.Ps) < 4:
            raise ValueError("sparse requires P ≥ 4")
        options = MethodOptions(n_trees=args.n_trees, alpha=args.alpha, beta=args.beta, folds=args.folds,
                                n_landmarks=args.n_landmarks, bandwidth=args.bandwidth, n_jobs=args.n_jobs)
    with _op("synth.run_benchmark"):
        rows = run_benchmark(grid, options)
    with _op("synth.write_benchmark_csv"):
        write_benchmark_csv(args.output, rows)
    return {"command": "benchmark", "output": str(args.output), "rows": len(rows)}


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
    "summarize": cmd_summarize,
    "benchmark": cmd_benchmark,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _, args = parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors this way
        return int(exc.code) if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except CommandError as exc:
        print(f"distbart {args.command}: error in {exc}", file=sys.stderr)
        if exc.code == 2:
            print(f"hint: run 'distbart {args.command} --help' for usage", file=sys.stderr)
        return exc.code
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
