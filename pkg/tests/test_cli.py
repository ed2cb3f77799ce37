import json

import numpy as np
import pytest

from adfgof.cli import main
from adfgof.experiments import ExperimentConfig, read_dataset, reproduce
from adfgof.errors import ValidationError
from adfgof.reports import parse_report


def write_csv(path, X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] != len(y):
        X = X.T
    head = ",".join(f"x{j + 1}" for j in range(X.shape[1])) + ",y"
    rows = [",".join(repr(float(v)) for v in list(x) + [t]) for x, t in zip(X, y)]
    path.write_text(head + "\n" + "\n".join(rows) + "\n")
    return path


@pytest.fixture
def exp_csv(tmp_path):
    g = np.random.default_rng(0)
    X = g.uniform(2, 4, 40)
    return write_csv(tmp_path / "exp.csv", X[:, None], np.exp(0.25 * X) + g.standard_normal(40))


class TestReadDataset:
    def test_roundtrip(self, exp_csv):
        d = read_dataset(exp_csv)
        assert d.n == 40 and d.p == 1

    @pytest.mark.parametrize(
        "body, needle",
        [
            ("x1,y\n1,2\n3,nan\n", "line 3"),
            ("x1,y\n1,2\n3\n", "line 3"),
            ("x1,y\n1,a\n", "line 2"),
            ("a,b\n1,2\n", "header"),
            ("x1,y\n", "no data"),
        ],
    )
    def test_errors(self, tmp_path, body, needle):
        path = tmp_path / "bad.csv"
        path.write_text(body)
        with pytest.raises(ValidationError, match=needle):
            read_dataset(path)


class TestTestCommand:
    def test_error_kind(self, exp_csv, tmp_path, capsys):
        assert main(["test", str(exp_csv), "--model", "exponential", "--seed", "4"]) == 0
        rep = parse_report(capsys.readouterr().out)
        assert rep["statistic"] == "D_n" and rep["seed"] == "4" and rep["sign_convention"] == "general"
        assert 0 <= float(rep["p_value"]) <= 1 and "theta_hat_1" in rep

    def test_sup_rule_flag(self, exp_csv, capsys):
        assert main(["test", str(exp_csv), "--model", "exponential", "--sup-rule", "residuals"]) == 0
        assert parse_report(capsys.readouterr().out)["sup_rule"] == "residuals"

    def test_report_reexport_identical(self, exp_csv, tmp_path):
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        pa, pb = tmp_path / "pa.csv", tmp_path / "pb.csv"
        assert main(["test", str(exp_csv), "--model", "exponential", "--out", str(a), "--paths", str(pa)]) == 0
        assert main(["test", str(exp_csv), "--model", "exponential", "--out", str(b), "--paths", str(pb)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert pa.read_bytes() == pb.read_bytes()
        assert pa.read_text().splitlines()[1] == "t,value,left"

    def test_error_scale(self, exp_csv, capsys):
        assert main(["test", str(exp_csv), "--model", "exponential", "--kind", "error_scale"]) == 0
        rep = parse_report(capsys.readouterr().out)
        assert rep["statistic"] == "D_n_scale" and float(rep["sigma_hat"]) > 0

    def test_zero_noise_regression(self, tmp_path, capsys):
        g = np.random.default_rng(1)
        X = g.normal(size=(30, 2))
        path = write_csv(tmp_path / "lin.csv", X, X @ [1.5, -0.5])
        assert main(["test", str(path), "--kind", "regression"]) == 0
        rep = parse_report(capsys.readouterr().out)
        assert float(rep["value"]) == 0.0 and float(rep["p_value"]) == 1.0

    def test_regression_with_config(self, tmp_path, capsys):
        g = np.random.default_rng(2)
        X = g.normal(size=(30, 2))
        path = write_csv(tmp_path / "lin.csv", X, X @ [1.0, 1.0] + g.standard_normal(30))
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n_intensity": 100, "m_reps": 50, "grid": 65, "tau": 0.1}))
        assert main(["test", str(path), "--kind", "regression", "--config", str(cfg), "--copula-r", "0.0"]) == 0
        rep = parse_report(capsys.readouterr().out)
        assert rep["statistic"] == "V_n" and rep["tau"] == "0.1" and rep["copula_r"] == "0.0"
        assert rep["design"] == "empirical plug-in"

    def test_nan_row_exit_code(self, tmp_path, capsys):
        path = tmp_path / "nan.csv"
        path.write_text("x1,y\n1,2\n2,3\n3,nan\n")
        assert main(["test", str(path)]) == 2
        assert "line 4" in capsys.readouterr().err

    def test_singular_design_exit_code(self, tmp_path, capsys):
        path = write_csv(tmp_path / "sing.csv", np.column_stack([np.arange(6.0), 2 * np.arange(6.0)]), np.arange(6.0))
        assert main(["test", str(path)]) == 3
        assert "adfgof: error:" in capsys.readouterr().err

    def test_unknown_kind_is_usage_error(self, exp_csv):
        with pytest.raises(SystemExit) as info:
            main(["test", str(exp_csv), "--kind", "other"])
        assert info.value.code == 2


class TestSimulateCommand:
    def test_error_experiment(self, tmp_path, capsys):
        edf = tmp_path / "edf.csv"
        assert main(["simulate", "--n", "20", "--m", "6", "--seed", "3", "--edf", str(edf)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[1] == "alpha,critical,rate,se" and len(lines) == 7
        assert edf.read_text().splitlines()[1] == "x,edf,limit_cdf"

    def test_config_file_with_override(self, tmp_path, capsys):
        cfg = tmp_path / "sim.json"
        cfg.write_text(json.dumps({"experiment": "regression_gof_bvn", "n": 20, "m": 3, "r": 0.5}))
        assert main(["simulate", "--config", str(cfg), "--m", "2"]) == 0
        head = capsys.readouterr().out.splitlines()[0]
        assert "m=2" in head and "r=0.5" in head and "regression_gof_bvn" in head

    def test_invalid_r(self, capsys):
        assert main(["simulate", "--experiment", "regression_gof_bvn", "--r", "0.999", "--m", "2"]) == 2
        assert "|r|" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"n": 20, "bogus": 1}))
        assert main(["simulate", "--config", str(cfg)]) == 2

    def test_config_roundtrip(self):
        cfg = ExperimentConfig(n=30, m=10, alphas=(0.1,))
        assert ExperimentConfig.from_dict(cfg.as_dict()) == cfg


class TestLimitAndReproduce:
    def test_limit_sup_bm(self, tmp_path):
        out = tmp_path / "bm.csv"
        assert main(["limit", "sup_bm", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[1] == "x,cdf" and len(lines) == 2003

    def test_limit_l_r(self, capsys):
        assert main(["limit", "l_r", "--r", "0.2", "--n-intensity", "50", "--m-reps", "10", "--grid", "33"]) == 0
        assert len(capsys.readouterr().out.splitlines()) == 12

    def test_reproduce_table1(self, tmp_path, capsys):
        assert main(["reproduce", "table1", "--scale", "0.0005", "--out-dir", str(tmp_path)]) == 0
        text = (tmp_path / "table1.csv").read_text().splitlines()
        header = [line for line in text if not line.startswith("#")][0].split(",")
        assert header[:6] == ["n", "0.2", "0.1", "0.05", "0.025", "0.01"]
        assert header[6] == "0.2_diff"
        assert any("ours - published" in line for line in text if line.startswith("#"))
        assert any("sup_rule=residuals" in line for line in text)

    def test_reproduce_scale_validated(self, tmp_path):
        with pytest.raises(ValidationError):
            reproduce("table1", scale=2.0, out_dir=tmp_path)
