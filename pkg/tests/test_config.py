import textwrap

import pytest
import yaml

from platoonsec import presets
from platoonsec.config import (
    ScenarioError,
    build_config,
    bundled_scenarios,
    load_config,
    validate_file,
)
from platoonsec.supervisor import HIGHWAY, URBAN

BASE = {
    "name": "t",
    "duration": 10,
    "trace": {"synthetic": "highway", "seed": 1},
    "schedule": [{"t": 0, "mode": "highway"}],
}


def write(tmp_path, data, name="scenario.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data) if isinstance(data, dict) else textwrap.dedent(data))
    return p


def test_bundled_set():
    assert set(bundled_scenarios()) == {
        "nominal-highway", "nominal-urban", "case-study-1", "case-study-2", "case-study-3",
    }
    for name, path in bundled_scenarios().items():
        assert validate_file(path) == [], name


def test_defaults_come_from_presets():
    c = build_config(BASE)
    assert c.modes[HIGHWAY] == presets.HIGHWAY_PARAMS
    assert c.thresholds.levels[URBAN] == (1.0, 3.0)
    assert c.dt == 0.05 and c.n_followers == 11 and c.road.length == 600.0
    assert c.trace.native_dt == 0.05


def test_case_study_attack_parsing():
    c = load_config("case-study-2")
    (atk,) = c.attacks
    assert atk.target_vehicle == 8 and atk.mode_override == URBAN and atk.start == 20.0


def test_zero_time_headway_message(tmp_path):
    data = dict(BASE, modes={"highway": {"time_headway": 0}})
    issues = validate_file(write(tmp_path, data))
    assert any("time_headway must be positive" in i for i in issues)


def test_literal_gain_reading_names_the_mode(tmp_path):
    data = dict(BASE, modes={"highway": {"law": "literal", "literal_ku": -2.0}})
    issues = validate_file(write(tmp_path, data))
    assert any("modes.highway" in i and "unstable" in i for i in issues)


def test_reference_highway_observer_gains_fail_the_gate(tmp_path):
    data = dict(BASE, gains={"highway": {"L": presets.REFERENCE_GAIN_ROWS[HIGHWAY]}})
    issues = validate_file(write(tmp_path, data))
    assert any("gains.highway" in i and "A - LC" in i for i in issues)
    data = dict(BASE, gains={"urban": {"L": presets.REFERENCE_GAIN_ROWS[URBAN]}})
    assert validate_file(write(tmp_path, data)) == []


def test_all_problems_reported_together(tmp_path):
    data = dict(
        BASE,
        duration=10.01,
        schedule=[{"t": 0, "mode": "rural"}],
        attacks=[{"channel": "V2V", "kind": "FDI", "vehicle": 14, "start": 1}],
        colour="red",
    )
    with pytest.raises(ScenarioError) as err:
        build_config(data)
    text = " | ".join(err.value.issues)
    for fragment in ("colour", "multiple of dt", "rural", "1..11"):
        assert fragment in text


def test_trace_coverage_and_paths(tmp_path):
    (tmp_path / "short.csv").write_text("0,10\n1,10\n")
    issues = validate_file(write(tmp_path, dict(BASE, trace={"file": "short.csv"})))
    assert any("before the 10 s horizon" in i for i in issues)
    issues = validate_file(write(tmp_path, dict(BASE, trace={"file": "missing.csv"})))
    assert any("not found" in i for i in issues)


def test_yaml_error_has_line(tmp_path):
    p = write(tmp_path, "name: x\nschedule: [\n")
    (issue,) = validate_file(p)
    assert "YAML parse error" in issue and "line" in issue


def test_overrides():
    c = load_config("nominal-urban", {"seed": 7, "duration": 30.0, "noise_sigma": 0.0})
    assert (c.noise_seed, c.duration, c.noise_sigma) == (7, 30.0, 0.0)


def test_auto_schedule_and_custom_gains():
    data = dict(
        BASE,
        schedule={"speed_threshold": 18.0, "band": 2.0},
        gains={"urban": {"L": [[0.2, 0.2, 1.2, -1.2], [0.2, 1.2, -1.8, -1.2]], "isolator_scale": 1.0}},
        thresholds={"urban": [2.0, 4.0], "window": 10},
    )
    c = build_config(data)
    assert c.schedule.threshold == 18.0
    assert (c.gains[URBAN].M == c.gains[URBAN].L).all()
    assert c.thresholds.levels[URBAN] == (2.0, 4.0) and c.thresholds.window == 10


def test_ring_too_short():
    with pytest.raises(ScenarioError, match="road"):
        build_config(dict(BASE, road={"length": 60.0}))
