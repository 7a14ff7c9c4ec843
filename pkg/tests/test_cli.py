import json
import subprocess
import sys

import yaml

from platoonsec.cli import main


def test_validate_bundled(capsys):
    assert main(["validate", "--config", "case-study-3"]) == 0
    assert "ok" in capsys.readouterr().out


def test_validate_bad_time_headway(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump({
        "name": "bad", "duration": 5, "trace": {"synthetic": "urban", "seed": 1},
        "schedule": [{"t": 0, "mode": "urban"}], "modes": {"urban": {"time_headway": 0}},
    }))
    assert main(["validate", "--config", str(p)]) == 1
    assert "time_headway must be positive" in capsys.readouterr().err
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_validate_json(tmp_path, capsys):
    assert main(["validate", "--config", str(tmp_path / "nope.yaml"), "--format", "json"]) == 1
    body = json.loads(capsys.readouterr().out)
    assert body["valid"] is False and body["issues"]


def test_run_then_report_round_trip(tmp_path, capsys):
    out = tmp_path / "cs2"
    assert main(["run", "--config", "case-study-2", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "case-study-2" in text
    for name in ("log.csv", "summary.json", "config.yaml", "plotdata/velocity.csv"):
        assert (out / name).is_file(), name
    again = tmp_path / "again"
    assert main(["report", "--log", str(out / "log.csv"), "--out", str(again)]) == 0
    assert (again / "summary.json").read_bytes() == (out / "summary.json").read_bytes()
    capsys.readouterr()
    assert main(["report", "--log", str(out / "log.csv"), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["isolation"]["vehicle"] == 8


def test_overrides_reach_snapshot(tmp_path):
    out = tmp_path / "short"
    assert main(["run", "--config", "nominal-urban", "--out", str(out),
                 "--seed", "5", "--duration", "3", "--noise-sigma", "0.01"]) == 0
    snap = yaml.safe_load((out / "config.yaml").read_text())
    assert (snap["seed"], snap["duration"], snap["noise_sigma"]) == (5, 3.0, 0.01)
    assert len((out / "log.csv").read_text().splitlines()) == 1 + 61


def test_divergence_exit_code_keeps_partial_log(tmp_path, capsys):
    out = tmp_path / "div"
    code = main(["run", "--config", "nominal-highway", "--out", str(out), "--noise-sigma", "1e9", "--duration", "5"])
    assert code == 2
    assert "diverged" in capsys.readouterr().err
    rows = (out / "log.csv").read_text().splitlines()
    assert 2 <= len(rows) < 102
    summary = json.loads((out / "summary.json").read_text())
    assert summary["aborted"] is True


def test_report_on_corrupt_log(tmp_path, capsys):
    (tmp_path / "log.csv").write_text("t,x\n0,1\n")
    assert main(["report", "--log", str(tmp_path / "log.csv"), "--config", "nominal-urban"]) == 1
    assert "row 1" in capsys.readouterr().err


def test_list(capsys):
    assert main(["list"]) == 0
    assert "case-study-1" in capsys.readouterr().out


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "platoonsec", "validate", "--config", "nominal-highway"],
                          capture_output=True, text=True)
    assert done.returncode == 0
