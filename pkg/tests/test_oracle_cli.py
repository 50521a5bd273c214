import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from awdro.cli import main
from awdro.costs import from_expression, quadratic_tracking
from awdro.dro import ControlGrid
from awdro.measures import AdaptedMeasure, dump_tree, load_tree, random_martingale_tree, random_tree, tree_to_dict
from awdro.oracle import BudgetExceeded, OracleBudget, brute_dro, property_suite
from awdro.reference import blowup_pair, two_point_pair


# -- oracle --------------------------------------------------------------------------------

def test_oracle_budgets_refuse_large_instances():
    f = from_expression("y1", 1)
    with pytest.raises(BudgetExceeded):
        brute_dro(random_tree(0, 3, 2), from_expression("y3", 3), None, 0.1)
    with pytest.raises(BudgetExceeded):
        brute_dro(AdaptedMeasure.dirac((0.0,)), f, None, 0.1, {None: np.linspace(-1, 1, 9)})
    with pytest.raises(BudgetExceeded):
        brute_dro(AdaptedMeasure.dirac((0.0,)), quadratic_tracking(1), ControlGrid(-1, 1, 9), 0.1)
    with pytest.raises(BudgetExceeded):
        brute_dro(random_tree(1, 2, 3), from_expression("y2", 2), None, 0.1,
                  budget=OracleBudget(max_enumeration=10))


def test_oracle_trivial_instances():
    d = AdaptedMeasure.dirac((0.5,))
    assert brute_dro(d, from_expression("y1^2", 1), None, 0.0) == pytest.approx(0.25, abs=1e-15)
    # a one-point grid leaves the adversary nothing to do
    assert brute_dro(d, from_expression("y1^2", 1), None, 1.0, {None: np.array([0.5])}) == pytest.approx(0.25)
    mu = random_tree(2, 2, (1, 3))
    f = from_expression("y1*y2", 2)
    from awdro.measures import flatten
    exp = sum(w * y[0] * y[1] for y, w in flatten(mu))
    assert abs(brute_dro(mu, f, None, 0.0) - exp) < 1e-12


def test_property_suite_passes_and_negative_control_fails(tmp_path):
    rep = property_suite(seed=5, count=15)
    assert rep.passed and rep.checks > 15
    bad = property_suite(seed=5, count=15, inject_bug=True, dump_dir=tmp_path)
    assert not bad.passed
    assert bad.by_property["coupling_consistency"]["failures"] > 0
    files = sorted(tmp_path.glob("counterexample_*.json"))
    assert files
    doc = json.loads(files[0].read_text())
    assert {"property", "trees", "expected", "actual"} <= set(doc)
    for t in doc["trees"]:
        load_tree(t)


# -- command line --------------------------------------------------------------------------

def write(tmp_path, name, measure):
    path = tmp_path / name
    dump_tree(measure, path)
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_dist_blowup(tmp_path, capsys):
    mu, nu = blowup_pair(0.01)
    code, out, _ = run(capsys, "dist", write(tmp_path, "a.json", mu), write(tmp_path, "b.json", nu))
    assert code == 0
    doc = json.loads(out)
    assert doc["aw_p"] == pytest.approx(0.200198, abs=1e-9)
    assert doc["aw_p_inf"] == pytest.approx(10.0, abs=1e-9)
    assert doc["config"]["subcommand"] == "dist"
    code, out, _ = run(capsys, "dist", str(tmp_path / "a.json"), str(tmp_path / "b.json"), "--format", "csv")
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["metric", "value"] and len(rows) == 4


def test_dist_p_override_and_couplings(tmp_path, capsys):
    mu, nu = two_point_pair(0.1, 1.0)
    a, b = write(tmp_path, "a.json", mu), write(tmp_path, "b.json", nu)
    code, out, _ = run(capsys, "dist", a, b, "--p", "2", "--couplings")
    doc = json.loads(out)
    assert doc["p"] == 2.0 and doc["aw_p"] == pytest.approx((0.01 + 2) ** 0.5, abs=1e-9)
    assert set(doc["couplings"]) == {"w_p", "aw_p", "aw_p_inf"}


def test_input_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"horizon": 1,\n "p": 2,\n "nodes": [{"id": "a", "depth": 1, "value": 0, "prob": 0.4, "parent": null}]}')
    code, _, err = run(capsys, "dist", str(bad), str(bad))
    assert code == 2 and "line" in err
    code, _, err = run(capsys, "dist", str(tmp_path / "missing.json"), str(bad))
    assert code == 2 and "no such file" in err
    good = write(tmp_path, "g.json", random_tree(0, 2, 2))
    code, _, err = run(capsys, "dro", good, "--cost", "sin(y1)", "--delta", "0.1")
    assert code == 2
    code, _, _ = run(capsys, "dro", good, "--cost", "y2", "--delta", "-1")
    assert code == 2
    code, _, _ = run(capsys, "dist", good, write(tmp_path, "h.json", random_tree(0, 3, 2)))
    assert code == 2


def test_martingale_constraint_exit_3(tmp_path, capsys):
    path = write(tmp_path, "t.json", random_tree(0, 2, (2, 3)))
    code, _, err = run(capsys, "dro", path, "--cost", "y2", "--delta", "0.1", "--martingale")
    assert code == 3 and "martingale" in err
    code, _, _ = run(capsys, "sens", path, "--cost", "y2", "--martingale", "--schedule")
    assert code == 3


def test_missing_derivatives_exit_4(tmp_path, capsys):
    path = write(tmp_path, "t.json", random_tree(0, 1, 2))
    code, _, err = run(capsys, "sens", path, "--cost", "digital:0")
    assert code == 4 and "derivatives" in err


def test_dro_report_and_reloadable_adversary(tmp_path, capsys):
    path = write(tmp_path, "t.json", random_tree(3, 2, (1, 2)))
    code, out, _ = run(capsys, "dro", path, "--cost", "quadratic", "--delta", "0.2", "--k-n", "17", "--m", "6",
                       "--gap")
    assert code == 0
    doc = json.loads(out)
    assert doc["kind"] == "controlled" and doc["minimax_gap"] >= -1e-12
    adv = load_tree(doc["adversary_tree"])
    assert adv.horizon == 2
    out_path = tmp_path / "policy.csv"
    code, _, _ = run(capsys, "dro", path, "--cost", "quadratic", "--delta", "0.2", "--k-n", "17", "--m", "6",
                     "--format", "csv", "-o", str(out_path))
    rows = list(csv.reader(out_path.open()))
    assert rows[0] == ["node", "depth", "x", "y", "control"] and len(rows) > 1


def test_sens_csv_rows(tmp_path, capsys):
    two = AdaptedMeasure.from_paths([(-1.0,), (1.0,)], [0.5, 0.5], 2.0)
    path = write(tmp_path, "two.json", two)
    table = tmp_path / "slopes.csv"
    code, out, _ = run(capsys, "sens", path, "--cost", "y1", "--schedule", "0.2", "0.1", "--csv", str(table))
    assert code == 0
    doc = json.loads(out)
    assert doc["upsilon"] == pytest.approx(1.0, abs=1e-10)
    rows = list(csv.reader(table.open()))
    assert rows[0] == ["delta", "value", "slope", "floor_slope"]
    assert [float(r[0]) for r in rows[1:]] == [0.2, 0.1]


def test_gen_round_trip(tmp_path, capsys):
    code, out, _ = run(capsys, "gen", "--seed", "4", "--horizon", "3", "--branching", "1", "3", "--martingale")
    assert code == 0
    m = load_tree(out)
    assert tree_to_dict(m) == tree_to_dict(random_martingale_tree(4, 3, (1, 3)))


def test_verify_negative_control_exits_1(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "awdro", "verify", "--count", "5", "--inject-bug",
                           "--dump-dir", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "verify: FAIL" in proc.stderr
    assert json.loads(proc.stdout)["passed"] is False
