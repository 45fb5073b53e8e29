import csv
import io
import json
import subprocess
import sys

import pytest

from chordqp.cli import main

P = "problems/"


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def run_json(capsys, *argv):
    code, out, err = run(capsys, *argv)
    return code, (json.loads(out) if out.strip() else None), err


def test_analyze_worked_example(capsys):
    code, rep, _ = run_json(capsys, "analyze", P + "worked_example.json")
    assert code == 0
    sets = {tuple(int(v[1:]) for v in c["variables"]) for c in rep["cliques"]}
    assert sets == {(1, 2, 4), (1, 3, 4), (4, 5), (3, 6, 7), (3, 8)}
    assert len(rep["tree_edges"]) == 4
    assert rep["fill_edges"] == []
    assert "dot" in rep


def test_analyze_single_variable(tmp_path, capsys):
    f = tmp_path / "one.json"
    f.write_text(json.dumps({"n": 1, "terms": [{"scope": [1], "P": [[1.0]], "p": [0.0]}]}))
    code, rep, _ = run_json(capsys, "analyze", str(f))
    assert code == 0 and len(rep["cliques"]) == 1 and rep["tree_edges"] == []


def test_analyze_scenario_tree(capsys):
    code, rep, _ = run_json(capsys, "analyze", P + "scenario_d2r2.json", "--formulation", "scenario")
    assert code == 0
    names = {c["name"] for c in rep["cliques"]}
    assert {"C0", "C1^1", "C1^3", "C2^1", "C2^4", "C3^2"} <= names
    assert len(rep["cliques"]) == 11


def test_analyze_merge(capsys):
    code, rep, _ = run_json(capsys, "analyze", P + "lq_scalar.json", "--formulation", "classical", "--merge", "1,2")
    assert code == 0 and len(rep["cliques"]) == 1


def test_solve_tree_check_oracle(capsys):
    code, rep, _ = run_json(capsys, "solve", P + "lq_scalar.json", "--formulation", "classical",
                            "--mode", "tree", "--check-oracle")
    assert code == 0
    assert rep["oracle_deviation"] <= 1e-8
    assert [u[0] for u in rep["trajectory"]["u"]] == pytest.approx([-0.6, -0.2], abs=1e-12)
    assert rep["objective"] == pytest.approx(0.8, abs=1e-12)


@pytest.mark.parametrize("root", ["backward", "forward", "2"])
def test_solve_roots_agree(capsys, root):
    code, rep, _ = run_json(capsys, "solve", P + "lq_scalar.json", "--formulation", "classical", "--root", root)
    assert code == 0 and rep["objective"] == pytest.approx(0.8, abs=1e-12)


def test_solve_riccati_mode(capsys):
    code, rep, _ = run_json(capsys, "solve", P + "lq_scalar.json", "--formulation", "classical", "--mode", "riccati")
    assert code == 0 and rep["objective"] == pytest.approx(0.8, abs=1e-12)


def test_solve_ipm_box(capsys):
    code, rep, _ = run_json(capsys, "solve", P + "box_mpc.json", "--formulation", "classical",
                            "--mode", "ipm", "--tol", "1e-10", "--check-oracle")
    assert code == 0 and rep["status"] == "Optimal"
    assert rep["oracle_deviation"] <= 1e-6
    assert min(u[0] for u in rep["trajectory"]["u"]) == pytest.approx(-0.6, abs=1e-6)


def test_tree_mode_falls_back_to_ipm(capsys):
    code, rep, _ = run_json(capsys, "solve", P + "box_mpc.json", "--formulation", "classical")
    assert code == 0 and rep["mode"] == "ipm"


def test_solve_scenario(capsys):
    code, rep, _ = run_json(capsys, "solve", P + "scenario_d2r2.json", "--formulation", "scenario", "--check-oracle")
    assert code == 0 and rep["non_anticipativity_residual"] <= 1e-10


def test_solve_lasso_and_distributed(capsys):
    code, rep, _ = run_json(capsys, "solve", P + "lasso_scalar.json", "--formulation", "lasso", "--check-oracle")
    assert code == 0 and rep["oracle_deviation"] <= 1e-6
    code, rep, _ = run_json(capsys, "solve", P + "distributed_path.json", "--formulation", "distributed",
                            "--check-oracle", "--parallel", "2")
    assert code == 0 and rep["oracle_deviation"] <= 1e-8


def test_infeasible_exit_1(capsys, caplog):
    code, _, _ = run(capsys, "solve", P + "infeasible.json")
    assert code == 1 and "InconsistentConstraints" in caplog.text


def test_riccati_with_inequalities_exit_2(capsys, caplog):
    code, _, _ = run(capsys, "solve", P + "box_mpc.json", "--formulation", "classical", "--mode", "riccati")
    assert code == 2 and "riccati" in caplog.text


def test_missing_file_exit_2(capsys):
    code, _, _ = run(capsys, "solve", P + "does_not_exist.json")
    assert code == 2


def test_bad_arguments_exit_2(capsys):
    assert main(["solve"]) == 2
    capsys.readouterr()
    assert main(["analyze", P + "lq_scalar.json", "--formulation", "classical", "--split", "9"]) == 2


def test_bench_csv(capsys):
    code, out, _ = run(capsys, "bench", "--sizes", "1,8", "--split", "1,2", "--repeat", "1")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["N"] for r in rows] == ["1", "8", "8"]
    assert {"N", "branches", "wall_time", "iterations", "max_dev_vs_serial"} <= set(rows[0])
    assert all(float(r["max_dev_vs_serial"]) <= 1e-8 for r in rows)


def test_bench_p4_vs_p1(capsys):
    code, out, _ = run(capsys, "bench", "--sizes", "256", "--split", "1,4", "--repeat", "1")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and float(rows[1]["max_dev_vs_serial"]) <= 1e-8


def test_process_exit_code_and_stderr():
    proc = subprocess.run([sys.executable, "-m", "chordqp", "solve", P + "infeasible.json"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "InconsistentConstraints" in proc.stderr


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "chordqp", "analyze", P + "worked_example.json"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert len(json.loads(proc.stdout)["cliques"]) == 5
