import json
from pathlib import Path

import numpy as np
import pytest

from mflq.cli import main
from mflq.io import load_problem, read_csv_body
from mflq.riccati import solve_equilibrium_system

PROBLEMS = Path(__file__).resolve().parent.parent / "problems"


def run(*args):
    return main([str(a) for a in args])


def table(path):
    body = read_csv_body(path)
    cols = body[0].split(",")
    data = np.array([[float(v) for v in line.split(",")] for line in body[1:]])
    return cols, data


def test_solve_zero_problem(tmp_path):
    assert run("solve", "--problem", PROBLEMS / "zero.json", "--out", tmp_path) == 0
    cols, data = table(tmp_path / "solution.csv")
    gains = [i for i, c in enumerate(cols) if c.startswith(("Theta", "phi"))]
    assert not data[:, gains].any()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["exit_status"] == 0 and "solution.csv" in manifest["outputs"]


def test_solve_rejects_asymmetric_weight(tmp_path, capsys):
    assert run("solve", "--problem", PROBLEMS / "asymmetric_R.json", "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "R: not symmetric" in err


def test_schema_error_names_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"horizon": 1.0, "steps": 1, "n": 1, "m": 1}))
    assert run("solve", "--problem", bad, "--out", tmp_path) == 2
    assert "field steps" in capsys.readouterr().err
    bad.write_text(json.dumps({"horizon": 1.0, "steps": 4, "n": 1, "m": 1,
                               "coefficients": {"Qbar": 1.0}}))
    assert run("solve", "--problem", bad, "--out", tmp_path) == 2
    assert "Qbar" in capsys.readouterr().err


def test_dimension_mismatch_names_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"horizon": 1.0, "steps": 4, "n": 2, "m": 1,
                               "coefficients": {"B": [[1.0, 2.0]]}}))
    assert run("solve", "--problem", bad, "--out", tmp_path) == 2
    assert "B: dimension mismatch" in capsys.readouterr().err


def test_solve_first_row_matches_solver(tmp_path):
    assert run("solve", "--problem", PROBLEMS / "scalar.json", "--out", tmp_path) == 0
    cols, data = table(tmp_path / "solution.csv")
    eq = solve_equilibrium_system(load_problem(PROBLEMS / "scalar.json"))
    assert data[0, cols.index("Theta_00")] == eq.law.Theta[0, 0, 0]
    assert data[0, cols.index("margin")] == eq.second_order_margin[0]


def test_steps_override(tmp_path):
    assert run("solve", "--problem", PROBLEMS / "scalar.json", "--steps", 80,
               "--out", tmp_path) == 0
    _, data = table(tmp_path / "solution.csv")
    assert data.shape[0] == 81


def test_export_reproduces_solution(tmp_path):
    run("solve", "--problem", PROBLEMS / "scalar.json", "--out", tmp_path / "a")
    assert run("export", "--result", tmp_path / "a" / "result.json", "--out", tmp_path / "b") == 0
    assert read_csv_body(tmp_path / "a" / "solution.csv") == \
        read_csv_body(tmp_path / "b" / "solution.csv")


def test_export_bad_document(tmp_path):
    (tmp_path / "r.json").write_text("{}")
    assert run("export", "--result", tmp_path / "r.json", "--out", tmp_path) == 2


def test_verify_statuses(tmp_path, capsys):
    assert run("verify", "--problem", PROBLEMS / "scalar.json", "--steps", 16,
               "--uniqueness", "--out", tmp_path / "ok") == 0
    doc = json.loads((tmp_path / "ok" / "certificate.json").read_text())
    assert doc["passed"] and doc["uniqueness"]["status"] == "pass"
    capsys.readouterr()
    assert run("verify", "--problem", PROBLEMS / "second_order_failure.json",
               "--out", tmp_path / "fail") == 1
    assert "FAILED at second_order" in capsys.readouterr().err
    assert run("verify", "--problem", PROBLEMS / "degenerate_control_weight.json",
               "--uniqueness", "--out", tmp_path / "nc") == 3
    assert "uniqueness not checkable" in capsys.readouterr().err
    # without the uniqueness request the same problem passes
    assert run("verify", "--problem", PROBLEMS / "degenerate_control_weight.json",
               "--out", tmp_path / "nc2") == 0


def test_verify_with_spike_test(tmp_path):
    assert run("verify", "--problem", PROBLEMS / "scalar.json", "--steps", 8, "--spike",
               "--outer", 8, "--inner", 256, "--eps", "0.25,0.125", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "certificate.json").read_text())
    assert any(c["name"] == "spike_positivity" and c["passed"] for c in doc["checks"])
    assert len(doc["spike_report"]) > 0


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as info:
        run("verify", "--problem", PROBLEMS / "scalar.json", "--eps", "0.1,0.2",
            "--out", tmp_path)
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        run("simulate", "--problem", PROBLEMS / "scalar.json", "--samples", 1, "--out", tmp_path)
    assert run("verify", "--problem", PROBLEMS / "scalar.json", "--spike", "--eps", "0.013",
               "--out", tmp_path) == 2


def test_oracle_compare_zero_problem(tmp_path):
    assert run("oracle-compare", "--problem", PROBLEMS / "zero.json", "--depths", "4,8",
               "--outer", 4, "--inner", 16, "--samples", 16, "--out", tmp_path) == 0
    _, data = table(tmp_path / "oracle_compare.csv")
    assert not data[:, 1:].any()


def test_oracle_compare_scalar(tmp_path):
    assert run("oracle-compare", "--problem", PROBLEMS / "scalar.json", "--depths", "8,12,16",
               "--outer", 16, "--inner", 1024, "--samples", 20000, "--out", tmp_path) == 0
    cols, data = table(tmp_path / "oracle_compare.csv")
    gap = data[:, cols.index("gain_gap")]
    assert gap[0] > gap[1] > gap[2]
    cost_gap, se = data[:, cols.index("cost_gap")], data[:, cols.index("cost_mc_se")]
    assert np.all(cost_gap <= 3 * se)


def test_simulate_writes_ensemble(tmp_path):
    assert run("simulate", "--problem", PROBLEMS / "scalar.json", "--samples", 5,
               "--out", tmp_path) == 0
    cols, data = table(tmp_path / "ensemble.csv")
    assert cols == ["path_id", "time", "x_0", "u_0"]
    assert data.shape == (5 * 41, 4)
    assert json.loads((tmp_path / "cost.json").read_text())["cost"]["samples"] == 5


@pytest.mark.parametrize("args", [
    ("solve",),
    ("simulate", "--samples", "50", "--seed", "7"),
    ("oracle-compare", "--depths", "4,6", "--outer", "4", "--inner", "64", "--samples", "64"),
])
def test_repeat_runs_give_identical_csv_bodies(tmp_path, args):
    outs = []
    for i in range(2):
        out = tmp_path / str(i)
        assert main([args[0], "--problem", str(PROBLEMS / "scalar.json"), *args[1:],
                     "--out", str(out)]) == 0
        outs.append(sorted(out.glob("*.csv")))
    assert [p.name for p in outs[0]] == [p.name for p in outs[1]]
    for a, b in zip(*outs):
        assert read_csv_body(a) == read_csv_body(b)
