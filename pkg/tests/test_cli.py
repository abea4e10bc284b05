from __future__ import annotations

import csv
import io
import json
import math

import pytest

from coordc.cli import EXIT_OK, main
from coordc.lowerbound import OneToOneInstance, validate_rang
from coordc.stable import StableInstance


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_gen_rang(tmp_path, capsys):
    path = tmp_path / "g.json"
    assert run(capsys, "gen", "rang", "--rho", 2, "--n", 64, "--seed", 3, "-o", path)[0] == EXIT_OK
    g = OneToOneInstance.from_json(json.loads(path.read_text()))
    assert g.n == 64 and validate_rang(g) == []


def test_gen_rang_divisibility_error(capsys):
    code, _, err = run(capsys, "gen", "rang", "--rho", 2, "--n", 50)
    assert code == 2
    assert "16*rho^2" in err


def test_gen_missing_argument(capsys):
    code, _, err = run(capsys, "gen", "stable", "--n", 5)
    assert code == 2 and "--k" in err


def test_negative_seed_is_rejected(capsys):
    assert run(capsys, "gen", "rang", "--rho", 1, "--n", 16, "--seed", -1)[0] == 2


def test_stable_coordinate(tmp_path, capsys):
    path, sol = tmp_path / "s.json", tmp_path / "sol.json"
    run(capsys, "gen", "stable", "--n", 20, "--k", 3, "--cap", 5, "--seed", 1, "-o", path)
    code, out, _ = run(capsys, "stable-coordinate", path, "--solution", sol)
    assert code == EXIT_OK
    (row,) = rows(out)
    assert int(row["message_bits"]) == 3 * math.ceil(math.log2(20 + 2))
    assert float(row["objective"]) == 1.0
    assert len(json.loads(sol.read_text())["actions"]) == 20
    assert run(capsys, "verify", path, "--solution", sol)[0] == EXIT_OK


def test_verify_rejects_unstable_solution(tmp_path, capsys):
    inst = StableInstance([1, 1], [[0, 1], [0, 1]], [[2, 1], [2, 1]])
    path, sol = tmp_path / "s.json", tmp_path / "bad.json"
    path.write_text(inst.dumps())
    sol.write_text(json.dumps({"actions": [1, 0]}))  # student 0 outranks student 1 at school 0
    code, out, err = run(capsys, "verify", path, "--solution", sol)
    assert code == 4
    assert json.loads(out)["ok"] is False
    assert "verification failed" in err


def test_routing_coordinate_regret(tmp_path, capsys):
    path = tmp_path / "g.json"
    run(capsys, "gen", "parallel", "--n", 30, "--m", 3, "--seed", 1, "-o", path)
    code, out, _ = run(capsys, "routing-coordinate", path, "--eps", 1.0)
    assert code == EXIT_OK
    (row,) = rows(out)
    assert row["protocol"] == "br-sim"
    code, out, _ = run(capsys, "verify", path, "--eps", 1.0)
    report = json.loads(out)
    assert code == EXIT_OK and report["regret"] <= report["eps"]


def test_routing_precondition_exit_code(tmp_path, capsys):
    path = tmp_path / "g.json"
    run(capsys, "gen", "parallel", "--n", 30, "--m", 3, "--seed", 1, "-o", path)
    code, _, err = run(capsys, "routing-coordinate", path, "--alpha", 0.1, "--r", 1)
    assert code == 3
    assert "raise alpha or lower r" in err


def test_routing_conflicting_parameters(tmp_path, capsys):
    path = tmp_path / "g.json"
    run(capsys, "gen", "parallel", "--n", 10, "--m", 2, "-o", path)
    assert run(capsys, "routing-coordinate", path, "--eps", 1.0, "--r", 2)[0] == 2


def test_match_coordinate_json(tmp_path, capsys):
    path = tmp_path / "m.json"
    run(capsys, "gen", "matching", "--n", 30, "--k", 3, "--b", 5, "--seed", 2, "-o", path)
    code, out, _ = run(capsys, "match-coordinate", path, "--eta", 0.1, "--eps", 0.1, "--format", "json")
    assert code == EXIT_OK
    (rep,) = json.loads(out)
    assert rep["protocol"] == "rec"
    assert rep["objective_value"] <= rep["opt_value"]


def test_private_coordinate(tmp_path, capsys):
    path = tmp_path / "m.json"
    run(capsys, "gen", "matching", "--n", 30, "--k", 3, "--b", 5, "-o", path)
    code, out, _ = run(capsys, "private-coordinate", path, "--levels", 3)
    assert code == EXIT_OK
    (row,) = rows(out)
    assert int(row["message_bits"]) == 8 + 3 * 2


def test_wrong_schema_is_a_parameter_error(tmp_path, capsys):
    path = tmp_path / "s.json"
    run(capsys, "gen", "stable", "--n", 4, "--k", 2, "--cap", 2, "-o", path)
    assert run(capsys, "routing-coordinate", path, "--eps", 1.0)[0] == 2


def test_empty_sweep_prints_header(capsys):
    code, out, _ = run(capsys, "sweep", "match", "--param", "k")
    assert code == EXIT_OK
    assert out == "parameter,value,seed,message_bits,objective,opt,ratio,status\n"


def test_sweep_rows(capsys):
    code, out, _ = run(capsys, "sweep", "match", "--param", "k", "--values", "2,4", "--seeds", 2)
    assert code == EXIT_OK
    table = rows(out)
    assert [(r["value"], r["seed"]) for r in table] == [("2", "0"), ("2", "1"), ("4", "0"), ("4", "1")]
    assert all(r["status"] == "ok" for r in table)


def test_reruns_are_byte_identical(tmp_path, capsys):
    path = tmp_path / "m.json"
    run(capsys, "gen", "planted", "--n", 20, "--k", 4, "--b", 5, "--seed", 9, "-o", path)
    first = run(capsys, "match-coordinate", path, "--seed", 5)[1]
    second = run(capsys, "match-coordinate", path, "--seed", 5)[1]
    assert first == second and first
    g1 = run(capsys, "gen", "grid", "--rows", 3, "--cols", 3, "--n", 10, "--seed", 4)[1]
    g2 = run(capsys, "gen", "grid", "--rows", 3, "--cols", 3, "--n", 10, "--seed", 4)[1]
    assert g1 == g2


def test_planted_size_mismatch(capsys):
    code, _, err = run(capsys, "gen", "planted", "--n", 40, "--k", 4, "--b", 5)
    assert code == 2 and "n = k * supply" in err
