import json
import subprocess
import sys

import pytest

from markovfp.cli import build_parser, main

from conftest import FIXTURES

OU = str(FIXTURES / "ou.toml")
SMALL = ["--grid", "128", "--dt", "0.01"]


def test_check_writes_json(tmp_path, capsys):
    code = main(["check", OU, "--out", str(tmp_path)] + SMALL)
    assert code == 0
    doc = json.loads((tmp_path / "ou_fixture" / "check.json").read_text())
    assert doc["applicability"]["selected"] == "lyapunov"
    assert "selected" in capsys.readouterr().out


def test_check_no_theorem_exit_code(tmp_path):
    assert main(["check", "hille_x3", "--out", str(tmp_path), "--grid", "128"]) == 3


def test_solve_exports(tmp_path):
    assert main(["solve", OU, "--out", str(tmp_path)] + SMALL) == 0
    d = tmp_path / "ou_fixture"
    names = {p.name for p in d.iterdir()}
    assert {"path_neumann.csv", "path_dirichlet.csv", "generator_neumann.coo", "initial.csv",
            "final_neumann.csv", "solve.json"} <= names
    head = (d / "path_neumann.csv").read_text().splitlines()[:2]
    assert head[0] == "t,cell_index,mass" and head[1].startswith("0.0,0,")
    assert (d / "final_neumann.csv").read_text().startswith("x1,value\n")


def test_verify(tmp_path):
    assert main(["verify", OU, "--out", str(tmp_path)] + SMALL) == 0
    doc = json.loads((tmp_path / "ou_fixture" / "verify.json").read_text())
    assert doc["extensions"]["dirichlet"]["submarkov"]["verdict"] == "pass"


def test_compare_and_report(tmp_path):
    assert main(["compare-extensions", OU, "--out", str(tmp_path)] + SMALL) == 0
    assert main(["check", OU, "--out", str(tmp_path)] + SMALL) == 0
    assert main(["report", str(tmp_path)]) == 0
    md = (tmp_path / "report.md").read_text()
    assert "## ou_fixture" in md and "lyapunov: applicable" in md


def test_outward_drift_is_inconclusive(tmp_path):
    assert main(["compare-extensions", "outward_drift", "--out", str(tmp_path), "--grid", "128",
                 "--dt", "0.01"]) == 3


def test_study(tmp_path):
    assert main(["study", OU, "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "ou_fixture" / "study.csv").read_text().splitlines()
    assert lines[0] == "quantity,dt,n,value,ratio"


def test_hille(tmp_path, capsys):
    assert main(["hille", "--drift=-x1", "--ladder", "12", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    summary = json.loads(out.splitlines()[0])
    assert summary["L0_solvable"] is True and summary["L_solvable"] is True
    assert "log I along the ladder" in out
    assert (tmp_path / "hille.json").exists()


def test_box_override(tmp_path):
    assert main(["solve", OU, "--box=-6,6", "--grid", "96", "--dt", "0.05", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "ou_fixture" / "solve.json").read_text())
    assert doc["grid"] == "grid(lo=(-6.0,),hi=(6.0,),n=(96,))"


def test_threads_give_same_files(tmp_path):
    args = ["check", "ou", "hille_zero", "--grid", "64"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b"), "--threads", "2"])
    for name in ("ou", "hille_zero"):
        assert (tmp_path / "a" / name / "check.json").read_bytes() == \
            (tmp_path / "b" / name / "check.json").read_bytes()


def test_bad_scenario_reports_error(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text((FIXTURES / "ou.toml").read_text().replace('c = "0"', 'c = "1"'))
    assert main(["check", str(bad), "--out", str(tmp_path)]) == 1
    assert "c must be <= 0" in capsys.readouterr().err


def test_bad_box_flag():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["solve", "ou", "--box", "3,1"])


def test_console_script_entry():
    r = subprocess.run([sys.executable, "-m", "markovfp.cli", "catalog"], capture_output=True, text=True)
    assert r.returncode == 0 and "ou_killing" in r.stdout.split()
