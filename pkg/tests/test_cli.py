import csv
import json

import numpy as np
import pytest

from distiv import cli, io, simlab
from distiv.errors import NumericalError


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    data = simlab.generate_scenario("cont_linear_contZ", 150, 3)
    path = tmp_path_factory.mktemp("cli") / "data.csv"
    io.write_csv(path, ["z", "x", "y"], np.column_stack([data.z, data.x, data.y]).tolist())
    return path


@pytest.fixture(scope="module")
def model_path(data_csv):
    out = data_csv.parent / "model.div"
    assert cli.main(["fit", str(data_csv), "--z", "z", "--x", "x", "--y", "y", "--epochs", "5", "--out", str(out)]) == 0
    return out


class TestFit:
    def test_writes_model_and_trace(self, model_path):
        assert model_path.read_bytes().startswith(b"DIVMODEL/1\n")
        trace = _read(f"{model_path}.trace.csv")
        assert [r["epoch"] for r in trace][-1] == "5"
        assert set(trace[0]) == {"epoch", "loss", "s1", "s2"}

    def test_missing_column(self, data_csv, tmp_path, capsys):
        code = cli.main(["fit", str(data_csv), "--z", "zz", "--x", "x", "--y", "y", "--out", str(tmp_path / "m")])
        assert code == 2
        err = capsys.readouterr().err
        assert err.startswith("error:") and "zz" in err and err.count("\n") == 1

    def test_non_numeric(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("z,x,y\n1,2,3\n1,abc,3\n")
        assert cli.main(["fit", str(path), "--z", "z", "--x", "x", "--y", "y", "--out", str(tmp_path / "m")]) == 2
        assert "row 2" in capsys.readouterr().err

    def test_column_in_two_roles(self, data_csv, tmp_path):
        assert cli.main(["fit", str(data_csv), "--z", "z", "--x", "x", "--y", "x", "--out", str(tmp_path / "m")]) == 2

    def test_missing_required_argument(self, data_csv):
        assert cli.main(["fit", str(data_csv), "--z", "z"]) == 2

    def test_missing_file(self, tmp_path):
        assert cli.main(["fit", str(tmp_path / "none.csv"), "--z", "z", "--x", "x", "--y", "y", "--out", "m"]) == 2

    def test_nonfinite_loss_exit_code(self, data_csv, tmp_path, monkeypatch, capsys):
        def diverge(data, config):
            raise NumericalError("non-finite loss", epoch=3)

        monkeypatch.setattr(cli, "fit_div", diverge)
        assert cli.main(["fit", str(data_csv), "--z", "z", "--x", "x", "--y", "y", "--out", str(tmp_path / "m")]) == 3
        assert "non-finite" in capsys.readouterr().err


class TestPredict:
    def test_mean(self, model_path, data_csv, tmp_path):
        out = tmp_path / "mean.csv"
        assert cli.main(["predict", str(model_path), str(data_csv), "--m", "20", "--out", str(out)]) == 0
        rows = _read(out)
        assert len(rows) == 150 and set(rows[0]) == {"x", "y"}

    def test_quantile_sorted_alphas(self, model_path, data_csv, tmp_path):
        out = tmp_path / "q.csv"
        args = ["predict", str(model_path), str(data_csv), "--mode", "quantile", "--alphas", "0.9,0.1", "--m", "50"]
        assert cli.main(args + ["--out", str(out)]) == 0
        rows = _read(out)
        assert len(rows) == 300
        assert [r["alpha"] for r in rows[:2]] == ["0.10000000000000001", "0.90000000000000002"]
        assert float(rows[0]["y"]) <= float(rows[1]["y"])

    def test_sample(self, model_path, data_csv, tmp_path):
        out = tmp_path / "s.csv"
        assert cli.main(["predict", str(model_path), str(data_csv), "--mode", "sample", "--m", "3", "--out", str(out)]) == 0
        assert len(_read(out)) == 450

    def test_seeded_predictions_repeat(self, model_path, data_csv, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            cli.main(["predict", str(model_path), str(data_csv), "--m", "10", "--seed", "4", "--out", str(out)])
        assert a.read_bytes() == b.read_bytes()

    def test_wrong_version(self, model_path, data_csv, tmp_path, capsys):
        bad = tmp_path / "v2.div"
        bad.write_bytes(model_path.read_bytes().replace(b"DIVMODEL/1", b"DIVMODEL/2", 1))
        assert cli.main(["predict", str(bad), str(data_csv), "--out", str(tmp_path / "o.csv")]) == 4
        assert "version" in capsys.readouterr().err

    def test_input_lacks_treatment(self, model_path, tmp_path):
        path = tmp_path / "noz.csv"
        path.write_text("z\n1\n")
        assert cli.main(["predict", str(model_path), str(path), "--out", str(tmp_path / "o.csv")]) == 2

    def test_bad_alphas(self, model_path, data_csv, tmp_path):
        args = ["predict", str(model_path), str(data_csv), "--mode", "quantile", "--alphas", "a,b"]
        assert cli.main(args + ["--out", str(tmp_path / "o.csv")]) == 2


class TestSimulate:
    def test_baselines_on_linear(self, tmp_path):
        out = tmp_path / "sim"
        args = ["simulate", "--scenario", "cont_linear_contZ", "--n", "500", "--methods", "tsls,cf_linear", "--seeds", "1..3"]
        assert cli.main(args + ["--out", str(out)]) == 0
        rows = _read(out / "metrics.csv")
        assert [r["seed"] for r in rows] == ["1", "2", "3", "1", "2", "3", "mean", "mean"]
        tsls = [float(r["mse"]) for r in rows if r["method"] == "tsls" and r["seed"] != "mean"]
        assert float(rows[6]["mse"]) == pytest.approx(np.mean(tsls))
        preds = _read(out / "predictions_tsls.csv")
        assert list(preds[0]) == ["x", "estimate", "method", "seed"] and len(preds) == 600

    def test_under_identified_fills_beta_only(self, tmp_path):
        out = tmp_path / "sim"
        args = ["simulate", "--scenario", "under_identified", "--n", "300", "--methods", "div,tsls", "--epochs", "3"]
        assert cli.main(args + ["--out", str(out)]) == 0
        rows = {r["method"]: r for r in _read(out / "metrics.csv") if r["seed"] == "1"}
        assert rows["div"]["beta_error"] != "" and rows["div"]["mse"] == "" and rows["div"]["qte_rmse"] == ""
        assert rows["tsls"]["beta_error"] == "" and "degenerate" in rows["tsls"]["note"]
        assert len(_read(out / "predictions_div.csv")) == 2

    def test_qte_scenario(self, tmp_path):
        out = tmp_path / "sim"
        args = ["simulate", "--scenario", "binary_s2", "--n", "400", "--methods", "tsls", "--out", str(out)]
        assert cli.main(args) == 0
        row = _read(out / "metrics.csv")[0]
        assert row["qte_rmse"] != "" and row["mse"] == ""

    def test_inapplicable_method(self, tmp_path):
        args = ["simulate", "--scenario", "under_identified", "--methods", "cf_linear", "--out", str(tmp_path)]
        assert cli.main(args) == 2

    def test_unknown_scenario_and_method(self, tmp_path):
        assert cli.main(["simulate", "--scenario", "nope", "--out", str(tmp_path)]) == 2
        assert cli.main(["simulate", "--scenario", "cont_linear_binZ", "--methods", "ols", "--out", str(tmp_path)]) == 2

    def test_bad_seeds(self, tmp_path):
        assert cli.main(["simulate", "--scenario", "cont_linear_binZ", "--seeds", "a..b", "--out", str(tmp_path)]) == 2

    def test_threads_give_same_metrics(self, tmp_path, monkeypatch):
        args = ["simulate", "--scenario", "cont_sine_binZ", "--n", "300", "--methods", "tsls,cf_spline", "--seeds", "1..4"]
        cli.main(args + ["--out", str(tmp_path / "a")])
        monkeypatch.setenv("DIV_THREADS", "3")
        cli.main(args + ["--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_seed_ranges():
    assert cli._seed_list("1..3,7") == [1, 2, 3, 7]
    assert cli._seed_list("") == []


class TestBenchmark:
    def test_fast_criteria_pass(self, tmp_path):
        out = tmp_path / "b.json"
        assert cli.main(["benchmark", "--criteria", "C1,C2,C10", "--out", str(out)]) == 0
        results = json.loads(out.read_text())
        assert len(results) == 4
        for r in results:
            assert {"criterion", "measured", "threshold", "pass"} <= set(r) and r["pass"] is True

    def test_zero_tolerance_fails(self, tmp_path):
        out = tmp_path / "b.json"
        assert cli.main(["benchmark", "--criteria", "C10", "--tolerance-scale", "0", "--out", str(out)]) == 1
        assert all(r["pass"] is False for r in json.loads(out.read_text()))

    def test_unknown_criterion(self, tmp_path):
        assert cli.main(["benchmark", "--criteria", "C99", "--out", str(tmp_path / "b.json")]) == 2


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "distiv", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate" in proc.stdout
