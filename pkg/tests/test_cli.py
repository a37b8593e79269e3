import csv
import json
import os

import numpy as np
import pytest

from sigsleuth.cli import main
from sigsleuth.data import load_csv


def run(*argv):
    return main(["--no-timestamp", *map(str, argv)])


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("--seed", 3, "simulate", "--lambda", 0.3, "--n", 600, "--m-s", 300, "--out-dir", out) == 0
    return out


@pytest.fixture(scope="module")
def null_sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("null")
    assert run("--seed", 4, "simulate", "--lambda", 0.0, "--n", 400, "--m-s", 200, "--out-dir", out) == 0
    return out


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


class TestSimulate:
    def test_files(self, sim):
        names = sorted(os.listdir(sim))
        assert names == ["background.csv", "experimental.csv", "models.json", "signal.csv", "simulate.json"]
        doc = read_json(sim / "simulate.json")
        assert doc["rows"] == {"background": 600, "experimental": 600, "signal": 300}
        assert "timestamp" not in doc
        assert load_csv(sim / "experimental.csv").labels is not None

    def test_timestamp_by_default(self, tmp_path):
        assert main(["simulate", "--toy", "fig3", "--n", "50", "--out-dir", str(tmp_path)]) == 0
        assert "timestamp" in read_json(tmp_path / "simulate.json")

    def test_model_json(self, sim, tmp_path):
        assert run("simulate", "--model", sim / "models.json", "--n", 40, "--m-s", 0, "--out-dir", tmp_path) == 0
        assert not (tmp_path / "signal.csv").exists()

    def test_unknown_model(self, tmp_path):
        assert run("simulate", "--model", "nope", "--out-dir", tmp_path) == 2

    def test_distort(self, tmp_path):
        assert run("simulate", "--model", "misspecified", "--lambda", 1.0, "--n", 100, "--distort", "x0:0.5",
                   "--out-dir", tmp_path) == 0
        assert run("simulate", "--distort", "x0", "--out-dir", tmp_path) == 2


class TestTest:
    def test_permutation_report(self, sim, tmp_path):
        out = tmp_path / "r.json"
        rc = run("test", "--background", sim / "background.csv", "--experimental", sim / "experimental.csv",
                 "--stat", "mi-auc", "--method", "permutation", "--cycles", 1000, "--trees", 10, "--out", out)
        assert rc == 0
        doc = read_json(out)
        assert doc["B"] == 1000 and doc["statistic"] == "mi-auc" and doc["command"] == "test"
        assert doc["reject"]

    def test_mce_lower_tail(self, sim, tmp_path):
        out = tmp_path / "r.json"
        run("test", "--background", sim / "background.csv", "--experimental", sim / "experimental.csv",
            "--stat", "mi-mce", "--method", "bootstrap", "--cycles", 50, "--trees", 5, "--out", out)
        doc = read_json(out)
        assert doc["tail"] == "lower"
        assert doc["p_value"] * 51 == pytest.approx(round(doc["p_value"] * 51))

    def test_md_needs_signal(self, sim):
        rc = run("test", "--background", sim / "background.csv", "--experimental", sim / "experimental.csv",
                 "--stat", "md-lrt", "--method", "bootstrap")
        assert rc == 2

    def test_md_with_signal(self, sim, tmp_path):
        out = tmp_path / "r.json"
        rc = run("test", "--background", sim / "background.csv", "--experimental", sim / "experimental.csv",
                 "--signal", sim / "signal.csv", "--stat", "md-lrt", "--method", "bootstrap", "--cycles", 50,
                 "--trees", 5, "--out", out)
        assert rc == 0 and read_json(out)["lambda_hat_mle"] is not None

    def test_budget_guard(self, sim):
        rc = run("test", "--background", sim / "background.csv", "--experimental", sim / "experimental.csv",
                 "--stat", "mi-auc", "--method", "slow-permutation", "--cycles", 1000, "--trees", 100,
                 "--budget", 1000)
        assert rc == 2

    def test_null_data_rarely_rejects(self, null_sim, tmp_path):
        out = tmp_path / "r.json"
        rejects = 0
        for seed in range(10):
            run("--seed", seed, "test", "--background", null_sim / "background.csv",
                "--experimental", null_sim / "experimental.csv", "--stat", "mi-auc", "--method", "permutation",
                "--cycles", 100, "--trees", 5, "--out", out)
            rejects += read_json(out)["reject"]
        assert rejects <= 3

    def test_missing_file(self, tmp_path):
        rc = run("test", "--background", tmp_path / "nope.csv", "--experimental", tmp_path / "nope.csv",
                 "--stat", "mi-auc", "--method", "permutation")
        assert rc == 2

    def test_data_error_exit(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,NaN\n")
        rc = run("test", "--background", bad, "--experimental", bad, "--stat", "mi-auc", "--method", "permutation")
        assert rc == 3

    def test_bad_choice(self, sim):
        rc = run("test", "--background", sim / "background.csv", "--experimental", sim / "experimental.csv",
                 "--stat", "mi-score", "--method", "permutation")
        assert rc == 2

    def test_numerical_exit(self, tmp_path):
        # identical constant rows make every forest output equal: degenerate asymptotic variance
        p = tmp_path / "c.csv"
        p.write_text("a\n" + "1.0\n" * 40)
        rc = run("test", "--background", p, "--experimental", p, "--stat", "mi-lrt", "--method", "asymptotic",
                 "--trees", 3)
        assert rc == 4


class TestEstimateStrength:
    def test_full_report(self, sim, tmp_path):
        out = tmp_path / "e.json"
        rc = run("estimate-strength", "--background", sim / "background.csv", "--experimental",
                 sim / "experimental.csv", "--T", 0.5, "--b", 0.05, "--cycles", 40, "--trees", 10, "--out", out)
        assert rc == 0
        doc = read_json(out)
        assert set(doc["intervals"]) == {"glm", "basic", "percentile", "normal_se"}
        assert "lambda_raw" in doc and doc["fit"]["counts"]
        lo, hi = doc["intervals"]["percentile"]
        assert lo <= doc["lambda_hat"] <= hi

    def test_no_intervals(self, sim, tmp_path):
        out = tmp_path / "e.json"
        run("estimate-strength", "--background", sim / "background.csv", "--experimental", sim / "experimental.csv",
            "--T", 0.5, "--b", 0.05, "--intervals", "none", "--trees", 5, "--out", out)
        assert list(read_json(out)["intervals"]) == ["glm"]

    def test_csv_histogram(self, sim, tmp_path):
        out = tmp_path / "h.csv"
        run("--format", "csv", "estimate-strength", "--background", sim / "background.csv", "--experimental",
            sim / "experimental.csv", "--T", 0.5, "--b", 0.05, "--intervals", "none", "--trees", 5, "--out", out)
        rows = list(csv.DictReader(open(out, encoding="utf-8")))
        assert len(rows) == 10 and list(rows[0]) == ["bin_lo", "bin_hi", "count"]

    def test_bad_tiling(self, sim):
        rc = run("estimate-strength", "--background", sim / "background.csv", "--experimental",
                 sim / "experimental.csv", "--T", 0.8, "--b", 0.03)
        assert rc == 2


class TestActiveSubspace:
    def test_fig3_pipeline(self, tmp_path):
        assert run("--seed", 1, "simulate", "--toy", "fig3", "--lambda", 0.5, "--n", 1000, "--out-dir", tmp_path) == 0
        out = tmp_path / "s.json"
        rc = run("active-subspace", "--background", tmp_path / "background.csv", "--experimental",
                 tmp_path / "experimental.csv", "--h", 4, "--cycles", 0, "--trees", 50, "--eigenvectors", 1,
                 "--out", out)
        assert rc == 0
        doc = read_json(out)
        assert doc["variables"] == ["x1", "x2"] and len(doc["eigenvectors"]) == 1
        v = np.array(doc["eigenvectors"][0])
        assert abs(v @ np.array([1, 1]) / np.sqrt(2)) >= 0.95

    def test_trained_forest(self, sim, tmp_path):
        f = tmp_path / "f.json"
        assert run("train", "--class0", sim / "background.csv", "--class1", sim / "experimental.csv",
                   "--trees", 5, "--out", f) == 0
        out = tmp_path / "s.json"
        assert run("active-subspace", "--background", sim / "background.csv", "--experimental",
                   sim / "experimental.csv", "--forest", f, "--eigenvectors", 2, "--out", out) == 0
        assert len(read_json(out)["eigenvectors"]) == 2

    def test_deterministic(self, sim, tmp_path):
        outs = []
        for k in range(2):
            out = tmp_path / f"s{k}.json"
            run("active-subspace", "--background", sim / "background.csv", "--experimental",
                sim / "experimental.csv", "--cycles", 3, "--trees", 3, "--out", out)
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestPreprocess:
    def test_recipe(self, tmp_path):
        src = tmp_path / "in.csv"
        src.write_text("pt,j_phi,l_phi,jets,Weight\n2.718281828459045,2,-3,2,1\n1,0,1,1,1\n7.38905609893065,1,1,2,3\n")
        out = tmp_path / "out.csv"
        rc = run("preprocess", "--in", src, "--out", out, "--jet", 2, "--jet-column", "jets", "--drop", "jets", "--log", "pt",
                 "--rotate-anchor", "j_phi")
        assert rc == 0
        t = load_csv(out)
        assert t.column_names == ("pt", "l_phi")
        np.testing.assert_allclose(t.features, [[1.0, 2 * np.pi - 5], [2.0, 0.0]])

    def test_sample(self, tmp_path):
        src = tmp_path / "in.csv"
        src.write_text("a,Weight\n1,1\n2,0\n3,0\n")
        out = tmp_path / "out.csv"
        assert run("preprocess", "--in", src, "--out", out, "--sample", 5, "--replace") == 0
        assert load_csv(out).features[:, 0].tolist() == [1.0] * 5


class TestPowerStudy:
    def test_csv(self, tmp_path):
        out = tmp_path / "p.csv"
        rc = run("power-study", "--tests", "mi-auc:permutation,md-score:bootstrap", "--lambdas", "0,0.3",
                 "--ns", 200, "--m-s", 100, "--replicates", 2, "--cycles", 20, "--trees", 5, "--out", out)
        assert rc == 0
        rows = list(csv.DictReader(open(out, encoding="utf-8")))
        assert len(rows) == 4 and rows[0]["mean_runtime_ms"] == ""

    def test_bad_tests(self):
        assert run("power-study", "--tests", "mi-auc") == 2


class TestGlobal:
    def test_env_workers(self, monkeypatch, sim, tmp_path):
        monkeypatch.setenv("SIGSLEUTH_WORKERS", "zero")
        rc = run("train", "--class0", sim / "background.csv", "--class1", sim / "experimental.csv",
                 "--out", tmp_path / "f.json")
        assert rc == 2

    def test_flag_beats_env(self, monkeypatch, sim, tmp_path):
        monkeypatch.setenv("SIGSLEUTH_WORKERS", "zero")
        rc = run("--workers", 2, "train", "--class0", sim / "background.csv", "--class1", sim / "experimental.csv",
                 "--trees", 2, "--out", tmp_path / "f.json")
        assert rc == 0

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "sigsleuth" in capsys.readouterr().out
