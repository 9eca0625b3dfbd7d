import pathlib

import pytest
import yaml

from surroconf.cli import EXIT_INFEASIBLE, EXIT_OK, EXIT_SCENARIO, main

SCEN = pathlib.Path(__file__).resolve().parents[1] / "scenarios"
THREE = str(SCEN / "three_user.yaml")


def test_run_writes_csv(tmp_path, capsys):
    assert main(["run", "--scenario", THREE, "--out", str(tmp_path), "--duration", "3", "--seed", "2"]) == EXIT_OK
    assert (tmp_path / "rates.csv").exists() and (tmp_path / "switches.csv").exists()
    assert "frames on time" in capsys.readouterr().out


def test_compare_unicast(tmp_path, capsys):
    code = main(["compare-unicast", "--scenario", THREE, "--out", str(tmp_path), "--duration", "5"])
    assert code == EXIT_OK
    assert (tmp_path / "overlay_latency.csv").exists() and (tmp_path / "unicast_latency.csv").exists()
    assert "latency variance" in capsys.readouterr().out


def test_oracle_gap_builtin(capsys):
    assert main(["oracle-gap", "--builtin", "four-node"]) == EXIT_OK
    assert "gap 0 on 1 (100%)" in capsys.readouterr().out


def test_oracle_gap_sweep(capsys):
    assert main(["oracle-gap", "--count", "3", "--seed", "5"]) == EXIT_OK
    assert "3 instances" in capsys.readouterr().out


def test_validate(capsys):
    assert main(["validate", "--scenario", THREE]) == EXIT_OK
    out = capsys.readouterr().out
    assert "flow 0" in out and "feasible" in out


def test_missing_scenario_exit_code(tmp_path, capsys):
    assert main(["run", "--scenario", str(tmp_path / "nope.yaml")]) == EXIT_SCENARIO
    assert "scenario error" in capsys.readouterr().err


def test_infeasible_exit_code(tmp_path, capsys):
    doc = yaml.safe_load(open(THREE))
    doc["D_ms"] = 100  # 40 ms of budget cannot cover a 75 ms link
    p = tmp_path / "tight.yaml"
    p.write_text(yaml.safe_dump(doc))
    assert main(["validate", "--scenario", str(p)]) == EXIT_INFEASIBLE
    assert "infeasible" in capsys.readouterr().err


def test_verb_required():
    with pytest.raises(SystemExit):
        main([])
