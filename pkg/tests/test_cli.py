import csv
import io
import json

import numpy as np
import pytest

from ivcox.cli import main, read_csv, InputError
from ivcox.rng import SeededStream
from ivcox.simulation import generate, scenario


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    ds = generate(scenario(1, n=150), SeededStream(31)).dataset
    path = tmp_path_factory.mktemp("cli") / "data.csv"
    lines = ["time,status,treatment,x1,z1"] + [
        f"{float(ds.time[i])!r},{int(ds.event[i])},{int(ds.treatment[i])},{float(ds.X[i, 0])!r},{float(ds.Z[i, 0])!r}"
        for i in range(ds.n)]
    path.write_text("\n".join(lines) + "\n")
    return path


def _write(tmp_path, text):
    p = tmp_path / "in.csv"
    p.write_text(text)
    return p


def test_fit_writes_json(data_csv, tmp_path, capsys):
    out = tmp_path / "fit.json"
    assert main(["fit", "--input", str(data_csv), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["hazard_ratio"] > 0 and doc["converged"] is True
    assert set(doc) >= {"alpha", "beta", "rho", "baseline", "iterations", "hazard_ratio"}
    assert doc["hazard_design"] == ["w", "x1"] and doc["treatment_design"] == ["z1", "x1"]


def test_fit_to_stdout_csv(data_csv, capsys):
    assert main(["fit", "--input", str(data_csv), "--format", "csv"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["parameter"] for r in rows] == ["beta[w]", "beta[x1]", "alpha[z1]", "alpha[x1]", "rho", "hazard_ratio"]


def test_fit_non_convergence_exit_code(data_csv, tmp_path, capsys):
    out = tmp_path / "fit.json"
    assert main(["fit", "--input", str(data_csv), "--max-iter", "1", "--out", str(out)]) == 2
    assert json.loads(out.read_text())["converged"] is False
    assert "did not converge" in capsys.readouterr().err


def test_fit_bootstrap(data_csv, tmp_path):
    out = tmp_path / "fit.json"
    assert main(["fit", "--input", str(data_csv), "--B", "20", "--bootstrap", "3", "--out", str(out)]) == 0
    boot = json.loads(out.read_text())["bootstrap"]
    assert set(boot["se"]) == {"beta[w]", "beta[x1]", "alpha[z1]", "alpha[x1]", "rho"}


def test_missing_status_column(tmp_path, capsys):
    p = _write(tmp_path, "time,treatment,z1\n1.0,1,0.5\n")
    assert main(["fit", "--input", str(p)]) == 1
    assert "'status'" in capsys.readouterr().err


@pytest.mark.parametrize("text, needle", [
    ("time,status,treatment,x1\n1,1,1,0.5\n", "'z1'"),
    ("time,status,treatment,x2,z1\n1,1,1,0.5,1\n", "'x1'"),
    ("time,status,treatment,z1,age\n1,1,1,0.5,3\n", "'age'"),
    ("time,status,treatment,z1\n1,2,1,0.5\n", "'status'"),
    ("time,status,treatment,z1\n1,1,1,abc\n", "malformed"),
    ("time,status,treatment,z1\n-1,1,1,0.5\n", "time"),
])
def test_input_errors(tmp_path, capsys, text, needle):
    assert main(["fit", "--input", str(_write(tmp_path, text))]) == 1
    assert needle in capsys.readouterr().err


def test_read_csv_column_order(tmp_path):
    p = _write(tmp_path, "z1,x1,treatment,status,time\n0.5,0.1,1,1,2.0\n0.7,0.2,0,0,3.0\n")
    ds = read_csv(p)
    np.testing.assert_array_equal(ds.time, [2.0, 3.0])
    np.testing.assert_array_equal(ds.X[:, 0], [0.1, 0.2])
    with pytest.raises(InputError):
        read_csv(tmp_path / "absent.csv")


def test_simulate_invalid_scenario(capsys):
    assert main(["simulate", "--scenario", "8", "--reps", "1"]) == 1
    assert "scenario" in capsys.readouterr().err


@pytest.mark.parametrize("flag", ["--n", "--reps", "--B", "--epsilon", "--jobs"])
def test_numeric_options_must_be_positive(flag, capsys):
    with pytest.raises(SystemExit) as err:
        main(["simulate", "--scenario", "1", flag, "0"])
    assert err.value.code == 2


def test_unknown_option_rejected():
    with pytest.raises(SystemExit):
        main(["simulate", "--scenario", "1", "--bogus", "1"])


def test_simulate_table_and_outputs(tmp_path, capsys):
    args = ["simulate", "--scenario", "1", "--n", "120", "--B", "20", "--reps", "2", "--seed", "7"]
    out = tmp_path / "sim.json"
    assert main(args + ["--out", str(out)]) == 0
    table = capsys.readouterr().out
    assert table.splitlines()[0].split()[:3] == ["Scenario", "Method", "Parameter"]
    assert "Ordinary-infeasible" in table
    doc = json.loads(out.read_text())
    assert doc["em"]["B"] == 20 and doc["reps"] == 2
    assert main(args + ["--out", str(out), "--format", "csv"]) == 0
    assert out.read_text().startswith("scenario,estimator,parameter")


def test_simulate_small_sample_default_B(tmp_path):
    out = tmp_path / "sim.json"
    assert main(["simulate", "--scenario", "1", "--n", "200", "--reps", "1", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["em"]["B"] == 40


def test_help_documents_flags(capsys):
    with pytest.raises(SystemExit):
        main(["simulate", "--help"])
    text = capsys.readouterr().out
    for flag in ("--scenario", "--n", "--B", "--reps", "--seed", "--epsilon", "--max-iter",
                 "--estimate-sigma-u", "--out", "--format", "--jobs"):
        assert flag in text
    with pytest.raises(SystemExit):
        main(["fit", "--help"])
    text = capsys.readouterr().out
    assert "--bootstrap" in text and "time,status,treatment" in text
