import json
import subprocess
import sys

import numpy as np
import pytest

from survfuse import cli
from survfuse.data import write_dataset
from survfuse.errors import ConvergenceError, InvalidInputError, StageError
from survfuse.simulation import DgpSpec, generate

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")

HEADER = "x1,x2,tau_hat,se_tau,ci_lo,ci_hi,lambda_hat,se_lambda"


@pytest.fixture(scope="module")
def csv_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "data.csv"
    write_dataset(generate(DgpSpec("1", 150, 300, seed=21)), path)
    return path


@pytest.fixture(scope="module")
def fitted(csv_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    code = cli.main(["fit", "--data", str(csv_path), "--out", str(out), "--gamma-grid", "5",
                     "--methods", "integrative,rct,rwd"])
    return code, out


def test_fit_writes_grid_with_exact_header(fitted):
    code, out = fitted
    assert code == 0
    for m in ("integrative", "rct", "rwd"):
        lines = (out / f"grid_{m}.csv").read_text().splitlines()
        assert lines[0] == HEADER
        assert len(lines) == 1 + 49
        assert (out / f"fit_{m}.json").exists()
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["gamma_grid"] == 5 and cfg["methods"] == ["integrative", "rct", "rwd"]


def test_grid_reevaluation_matches_fit(fitted, tmp_path):
    _, out = fitted
    code = cli.main(["grid", "--fit-file", str(out / "fit_integrative.json"),
                     "--out", str(tmp_path / "g.csv")])
    assert code == 0
    a = np.loadtxt(out / "grid_integrative.csv", delimiter=",", skiprows=1)
    b = np.loadtxt(tmp_path / "g.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(b, a, rtol=0, atol=1e-12)


def test_missing_column_exit_2(csv_path, tmp_path, capsys):
    code = cli.main(["fit", "--data", str(csv_path), "--covariates", "x1,x9",
                     "--out", str(tmp_path)])
    assert code == 2
    assert "x9" in capsys.readouterr().err


def test_fit_without_data_exit_2(tmp_path):
    assert cli.main(["fit", "--out", str(tmp_path)]) == 2


def test_flags_override_config(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"command": "simulate", "reps": 9, "n1": 40, "seed": 3}))
    args = cli.build_parser().parse_args(["simulate", "--config", str(conf), "--reps", "2"])
    cfg = cli.resolve_config(args)
    assert cfg.reps == 2 and cfg.n1 == 40 and cfg.seed == 3
    assert cfg.horizon == 3.0
    args = cli.build_parser().parse_args(["simulate", "--case", "S2"])
    assert cli.resolve_config(args).horizon == 2.0


def test_config_for_other_command_rejected(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"command": "fit"}))
    assert cli.main(["simulate", "--config", str(conf)]) == 2


def test_simulate_is_deterministic(tmp_path):
    argv = ["simulate", "--n1", "120", "--n0", "240", "--reps", "2", "--gamma-grid", "4",
            "--methods", "integrative,rct", "--seed", "5"]
    assert cli.main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(argv + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "mc_report.csv").read_bytes()
    assert a == (tmp_path / "b" / "mc_report.csv").read_bytes()
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    for m in (ma, mb):
        m.pop("timestamp")
        m["config"].pop("out")
    assert ma == mb


def test_certify_passes(tmp_path, capsys):
    code = cli.main(["certify", "--n1", "200", "--n0", "400", "--gamma-grid", "4",
                     "--oracle-draws", "4000", "--out", str(tmp_path)])
    lines = capsys.readouterr().out.splitlines()
    assert code == 0, "\n".join(lines)
    assert lines[0].startswith("efficiency certificate")
    rep = json.loads((tmp_path / "certificate.json").read_text())
    assert rep["passed"] and rep["min_eigenvalue"] >= -1e-8


def test_exit_code_mapping():
    assert cli.exit_code_for(InvalidInputError("x")) == 2
    assert cli.exit_code_for(StageError("load", InvalidInputError("x"))) == 2
    assert cli.exit_code_for(ConvergenceError("x")) == 3
    assert cli.exit_code_for(StageError("cox", ConvergenceError("x"))) == 3


def test_numerical_failure_exit_3(monkeypatch, tmp_path, capsys):
    def boom(cfg):
        raise np.linalg.LinAlgError("not positive definite")
    monkeypatch.setitem(cli.HANDLERS, "grid", boom)
    assert cli.main(["grid", "--fit-file", "x.json"]) == 3
    assert "numerical error" in capsys.readouterr().err


def test_help_runs_as_module():
    res = subprocess.run([sys.executable, "-m", "survfuse", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("fit", "simulate", "grid", "certify"):
        assert cmd in res.stdout
