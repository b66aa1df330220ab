from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from distbart.cli import main


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def bench_dir(tmp_path, capsys):
    out = tmp_path / "data"
    code, stdout, _ = run(["simulate", "--marginal", "normal", "--functional", "main-effects", "--N", 30, "--P", 2,
                           "--M", 8, "--seed", 3, "--out-dir", out], capsys)
    assert code == 0 and json.loads(stdout)["n_groups"] == 30
    return out


def gibbs_fit(bench_dir, tmp_path, capsys, name="model.json", n_jobs=1, extra=()):
    model = tmp_path / name
    code, _, err = run(["fit", "--samples", bench_dir / "samples.csv", "--outcomes", bench_dir / "outcomes.csv",
                        "--model", model, "--fitted", tmp_path / f"{name}.fitted.csv", "--method", "gibbs",
                        "--n-trees", 5, "--n-iter", 40, "--burn-in", 10, "--seed", 1, "--n-jobs", n_jobs, *extra],
                       capsys)
    assert code == 0, err
    return model


def read_csv(path):
    rows = list(csv.reader(open(path)))
    return rows[0], rows[1:]


class TestPipeline:
    def test_simulate_writes_files(self, bench_dir):
        assert {p.name for p in bench_dir.iterdir()} == {"samples.csv", "outcomes.csv", "truth.csv"}
        header, rows = read_csv(bench_dir / "truth.csv")
        assert header == ["group_id", "f_true", "se"] and len(rows) == 30

    def test_gibbs_fit_predict_round_trip(self, bench_dir, tmp_path, capsys):
        model = gibbs_fit(bench_dir, tmp_path, capsys)
        code, _, err = run(["predict", "--model", model, "--samples", bench_dir / "samples.csv",
                            "--output", tmp_path / "pred.csv", "--draws", tmp_path / "draws.csv"], capsys)
        assert code == 0, err
        header, fitted = read_csv(tmp_path / "model.json.fitted.csv")
        assert header == ["group_id", "mean", "lo", "hi"]
        _, pred = read_csv(tmp_path / "pred.csv")
        assert [r[0] for r in pred] == [r[0] for r in fitted]
        np.testing.assert_allclose(np.array([r[1:] for r in pred], float), np.array([r[1:] for r in fitted], float),
                                   atol=1e-8)
        dh, draws = read_csv(tmp_path / "draws.csv")
        assert dh[0] == "draw" and len(draws) == 30

    @pytest.mark.parametrize("downstream", ["lasso", "horseshoe"])
    def test_random_features_round_trip(self, bench_dir, tmp_path, capsys, downstream):
        model = tmp_path / "rf.json"
        code, _, err = run(["fit", "--samples", bench_dir / "samples.csv", "--outcomes", bench_dir / "outcomes.csv",
                            "--model", model, "--fitted", tmp_path / "fit.csv", "--method", "random-features",
                            "--downstream", downstream, "--n-trees", 30, "--folds", 5, "--n-iter", 60,
                            "--burn-in", 20], capsys)
        assert code == 0, err
        code, _, err = run(["predict", "--model", model, "--samples", bench_dir / "samples.csv",
                            "--output", tmp_path / "pred.csv"], capsys)
        assert code == 0, err
        _, a = read_csv(tmp_path / "fit.csv")
        _, b = read_csv(tmp_path / "pred.csv")
        np.testing.assert_allclose(np.array([r[1] for r in a], float), np.array([r[1] for r in b], float), atol=1e-8)

    def test_model_file_independent_of_threads(self, bench_dir, tmp_path, capsys):
        a = gibbs_fit(bench_dir, tmp_path, capsys, "a.json", n_jobs=1)
        b = gibbs_fit(bench_dir, tmp_path, capsys, "b.json", n_jobs=2)
        assert a.read_bytes() == b.read_bytes()

    def test_summarize(self, bench_dir, tmp_path, capsys):
        model = gibbs_fit(bench_dir, tmp_path, capsys)
        out = tmp_path / "summary"
        code, stdout, err = run(["summarize", "--model", model, "--samples", bench_dir / "samples.csv",
                                 "--outcomes", bench_dir / "outcomes.csv", "--out-dir", out, "--max-points", 200,
                                 "--max-draws", 5, "--loco"], capsys)
        assert code == 0, err
        names = {p.name for p in out.iterdir()}
        assert {"x1.csv", "x2.csv", "summary.json", "loco.csv"} <= names
        summary = json.loads((out / "summary.json").read_text())
        assert "r2" in json.dumps(summary)

    def test_benchmark(self, tmp_path, capsys):
        code, _, err = run(["benchmark", "--methods", "mean", "--marginals", "normal", "--functionals",
                            "main-effects", "--N", 20, "--P", 2, "--M", 5, "--reps", 2, "--n-test", 5,
                            "--output", tmp_path / "bench.csv"], capsys)
        assert code == 0, err
        header, rows = read_csv(tmp_path / "bench.csv")
        assert header == ["method", "marginal", "functional", "N", "P", "M", "rep", "rmse"] and len(rows) == 2


class TestConfigAndErrors:
    def test_sparse_needs_four_covariates(self, tmp_path, capsys):
        code, _, err = run(["simulate", "--functional", "sparse", "--P", 3, "--out-dir", tmp_path], capsys)
        assert code == 2 and "sparse requires P ≥ 4" in err

    def test_missing_file(self, tmp_path, capsys):
        code, _, err = run(["fit", "--samples", tmp_path / "nope.csv", "--outcomes", tmp_path / "nope2.csv",
                            "--model", tmp_path / "m.json"], capsys)
        assert code == 2 and "nope.csv" in err

    def test_missing_required_option(self, capsys):
        code, _, err = run(["predict", "--samples", "x.csv", "--output", "y.csv"], capsys)
        assert code == 2 and "--model" in err

    def test_unknown_flag(self, capsys):
        code, _, _ = run(["fit", "--bogus"], capsys)
        assert code == 2

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_treez": 3}))
        code, _, err = run(["simulate", "--config", cfg, "--out-dir", tmp_path], capsys)
        assert code == 2 and "n_treez" in err

    def test_config_supplies_values_and_cli_wins(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"marginal": "normal", "functional": "main-effects", "N": 6, "P": 2, "M": 3,
                                   "out-dir": str(tmp_path / "from_config")}))
        code, stdout, err = run(["simulate", "--config", cfg, "--N", 4], capsys)
        assert code == 0, err
        result = json.loads(stdout)
        assert result["n_groups"] == 4 and result["out_dir"] == str(tmp_path / "from_config")

    def test_bad_data_exit_code(self, tmp_path, capsys):
        (tmp_path / "s.csv").write_text("group_id,x1\n")
        (tmp_path / "o.csv").write_text("group_id,y\n")
        code, _, err = run(["fit", "--samples", tmp_path / "s.csv", "--outcomes", tmp_path / "o.csv",
                            "--model", tmp_path / "m.json"], capsys)
        assert code == 1 and "error in data.load_dataset" in err

    def test_console_entry_point(self, tmp_path):
        argv = ["simulate", "--marginal", "normal", "--functional", "main-effects", "--N", "3", "--P", "1",
                "--M", "2", "--out-dir", str(tmp_path)]
        proc = subprocess.run([sys.executable, "-m", "distbart.cli", *argv], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert json.loads(proc.stdout)["command"] == "simulate"
