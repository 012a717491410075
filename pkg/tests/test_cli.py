import json
import subprocess
import sys
from pathlib import Path

import pytest

from optlayer.cli import EXIT_INPUT, EXIT_OK, EXIT_SOLVER, main

GOLDEN = Path(__file__).parent / "golden"


def call(capsys, *argv):
    code = main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def write(tmp_path):
    def _write(name, text):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path
    return _write


# -- solve --

def test_solve_dense_qp(capsys):
    code, out, _ = call(capsys, "solve", GOLDEN / "qp_layer.dpp", "--json")
    assert code == EXIT_OK
    res = json.loads(out)
    assert res["status"] == "Optimal"
    assert max(res["residuals"].values()) <= 1e-8
    assert len(res["variables"]["z"]) == 3
    assert sum(res["variables"]["z"]) == pytest.approx(1.0, abs=1e-9)


def test_solve_malformed_file(capsys, write):
    path = write("bad.dpp", "var z[2]\nminimize sum_squares(z) +\n")
    code, out, err = call(capsys, "solve", path)
    assert code == EXIT_INPUT and out == ""
    assert "ParseError: 3:1:" in err


def test_solve_missing_file(capsys, tmp_path):
    code, _, _ = call(capsys, "solve", tmp_path / "absent.dpp")
    assert code == EXIT_INPUT


def test_solve_infeasible(capsys, write):
    path = write("inf.dpp", "var z[1]\nminimize sum_squares(z)\nsubject to\n  z <= 0\n"
                            "  -z <= -1\n")
    code, out, err = call(capsys, "solve", path)
    assert code == EXIT_SOLVER
    assert json.loads(out)["status"] in ("Infeasible", "MaxIterations")


def test_solve_writes_out_file(capsys, tmp_path):
    target = tmp_path / "res.json"
    code, out, _ = call(capsys, "solve", GOLDEN / "qp_layer.dpp", "--out", target)
    assert code == EXIT_OK and out == ""
    assert json.loads(target.read_text())["status"] == "Optimal"


# -- canon --

def test_canon_matches_golden_dump(capsys):
    code, out, _ = call(capsys, "canon", GOLDEN / "qp_layer.dpp")
    assert code == EXIT_OK
    assert out == (GOLDEN / "qp_layer.canon.json").read_text(encoding="utf-8")


def test_canon_reports_dpp_violation_path(capsys, write):
    path = write("nondpp.dpp", "var z[2]\nparam a[1]\nparam b[1]\nminimize sum(a*b*z)\n")
    code, out, err = call(capsys, "canon", path)
    assert code == EXIT_INPUT and out == ""
    assert "objective" in err and "DPP" in err


def test_canon_parameter_free_problem(capsys, write):
    path = write("free.dpp", "var z[2]\nminimize sum_squares(z) + [1, 2]'*z\n"
                             "subject to\n  z <= [1, 1]\n")
    code, out, _ = call(capsys, "canon", path)
    dump = json.loads(out)
    assert code == EXIT_OK and dump["dims"]["p"] == 0
    assert {e[1] for e in dump["cost"]} == {0}
    assert {e[2] for e in dump["constraints"]} == {0}


# -- gradcheck --

def test_gradcheck_seed_7(capsys):
    code, out, _ = call(capsys, "gradcheck", "--trials", 100, "--seed", 7)
    rep = json.loads(out)
    assert code == EXIT_OK and rep["passed"]
    assert rep["nondegenerate"] >= 95 and rep["max_error"] <= 1e-4


def test_gradcheck_cone(capsys):
    code, out, _ = call(capsys, "gradcheck", "--cone", "--trials", 20)
    rep = json.loads(out)
    assert code == EXIT_OK and rep["max_error"] <= 1e-8


def test_gradcheck_zero_trials(capsys):
    code, out, _ = call(capsys, "gradcheck", "--trials", 0)
    assert code == EXIT_OK and json.loads(out)["passed"]


def test_gradcheck_negative_trials(capsys):
    assert call(capsys, "gradcheck", "--trials", -1)[0] == EXIT_INPUT


def test_usage_errors_exit_with_input_code(capsys):
    with pytest.raises(SystemExit) as info:
        main(["gradcheck", "--trials", "many"])
    assert info.value.code == EXIT_INPUT


# -- experiments --

def test_denoise_with_config(capsys, write):
    cfg = write("d.json", json.dumps({"seed": 1, "iterations": 4}))
    code, out, _ = call(capsys, "denoise", "--config", cfg)
    m = json.loads(out)
    assert code == EXIT_OK and m["config"]["iterations"] == 4


def test_bad_config_is_an_input_error(capsys, write):
    cfg = write("d.json", json.dumps({"seed": 1, "epsilon": 0.5}))
    assert call(capsys, "poison", "--config", cfg)[0] == EXIT_INPUT
    cfg = write("e.json", "{not json")
    assert call(capsys, "denoise", "--config", cfg)[0] == EXIT_INPUT


def test_poison_outputs_are_byte_identical(capsys, write, tmp_path):
    cfg = write("p.json", json.dumps({"seed": 2, "epsilon": 0.05}))
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert call(capsys, "poison", "--config", cfg, "--out", a)[0] == EXIT_OK
    assert call(capsys, "poison", "--config", cfg, "--out", b)[0] == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    m = json.loads(a.read_text())
    assert m["poisoned_test_loss"] > m["clean_test_loss"]


def test_solver_failure_exit_code(capsys, monkeypatch):
    import optlayer.cli as cli
    from optlayer.experiments import SolverFailure

    def boom(cfg):
        raise SolverFailure("inner solve failed", {"step": 3})

    monkeypatch.setattr(cli, "run_poison", boom)
    code, out, err = call(capsys, "poison")
    assert code == EXIT_SOLVER
    assert json.loads(out)["partial"] == {"step": 3}
    assert "inner solve failed" in err


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "optlayer.cli", "solve",
                           str(GOLDEN / "qp_layer.dpp")], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["status"] == "Optimal"
    proc = subprocess.run([sys.executable, "-m", "optlayer.cli", "frobnicate"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_INPUT
