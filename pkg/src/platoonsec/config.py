"""YAML scenario files: parsing, validation and snapshots.

A scenario file looks like::

    name: case-study-1
    duration: 120
    seed: 0
    trace: {file: ../traces/urban.csv, units: m/s}
    schedule: [{t: 0, mode: urban}]
    attacks:
      - {channel: V2V, kind: FDI, vehicle: 8, start: 40, bias: [-2, 0, 0]}

Every other section (``modes``, ``gains``, ``thresholds``, ``road``,
``leader``, ``followers``, ``dt``, ``noise_sigma``) falls back to the
shipped presets. Relative file paths resolve against the scenario file.
Modes are referred to by name everywhere.
"""

from __future__ import annotations

import copy
import math
from dataclasses import replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from platoonsec import presets
from platoonsec.comms import AttackConfigError, AttackSpec
from platoonsec.detection import GainError, ObserverGains, ThresholdConfig
from platoonsec.engine import ConfigError, LeaderSafety, RingRoad, ScenarioConfig, validate_geometry
from platoonsec.ingest import TraceError, TraceSeries, load_trace, resample, synthetic_cycle
from platoonsec.model import ModeParams, ParameterError, closed_loop_eigencheck
from platoonsec.supervisor import ModeSchedule, ScheduleError

SCENARIO_DIR = Path(__file__).parent / "data" / "scenarios"

_MODE_KEYS = {"id", "k1", "k2", "k3", "time_headway", "standstill", "engine_lag", "v_max", "law", "literal_ku"}
_TOP_KEYS = {
    "name", "duration", "dt", "seed", "noise_sigma", "followers", "trace", "road", "modes", "gains",
    "thresholds", "schedule", "attacks", "leader", "init_offset", "disengage_factor",
}


class ScenarioError(ConfigError):
    """A scenario file with one or more problems; ``issues`` lists them all."""

    def __init__(self, issues, source: str = ""):
        self.issues = list(issues)
        self.source = source
        head = f"{source}: " if source else ""
        super().__init__(head + "; ".join(self.issues))


def bundled_scenarios() -> dict:
    return {p.stem: p for p in sorted(SCENARIO_DIR.glob("*.yaml"))}


def resolve_scenario(ref) -> Path:
    """A path, or the name of a bundled scenario such as ``case-study-2``."""
    path = Path(ref)
    if path.exists():
        return path
    bundled = bundled_scenarios()
    if str(ref) in bundled:
        return bundled[str(ref)]
    raise ScenarioError([f"no such file or bundled scenario: {ref}"])


def read_raw(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError([f"cannot read: {exc.strerror}"], str(path)) from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ScenarioError([f"{where}YAML parse error: {getattr(exc, 'problem', exc)}"], str(path)) from None
    if not isinstance(raw, dict):
        raise ScenarioError(["top level must be a mapping"], str(path))
    return raw


class _Issues:
    def __init__(self):
        self.items: list = []

    def add(self, where: str, msg: str):
        self.items.append(f"{where}: {msg}")

    def number(self, section: dict, key: str, where: str, default=None, positive=False, minimum=None):
        val = section.get(key, default)
        if val is None:
            self.add(f"{where}.{key}", "missing")
            return None
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            self.add(f"{where}.{key}", f"expected a number, got {val!r}")
            return None
        val = float(val)
        if not math.isfinite(val):
            self.add(f"{where}.{key}", "must be finite")
            return None
        if positive and not val > 0:
            self.add(f"{where}.{key}", "must be positive")
            return None
        if minimum is not None and val < minimum:
            self.add(f"{where}.{key}", f"must be at least {minimum}")
            return None
        return val


def _parse_modes(raw, issues: _Issues) -> dict:
    defaults = {p.name: p for p in presets.default_modes().values()}
    section = raw.get("modes")
    if section is None:
        return defaults
    if not isinstance(section, dict) or not section:
        issues.add("modes", "expected a mapping of mode name to parameters")
        return defaults
    out = {}
    for name, spec in section.items():
        where = f"modes.{name}"
        spec = spec or {}
        if not isinstance(spec, dict):
            issues.add(where, "expected a mapping")
            continue
        unknown = set(spec) - _MODE_KEYS
        if unknown:
            issues.add(where, f"unknown keys {sorted(unknown)}")
        base = defaults.get(name)
        fields = {}
        if base is None:
            for key in ("id", "k1", "k2", "k3", "time_headway"):
                if key not in spec:
                    issues.add(f"{where}.{key}", "missing (not a preset mode)")
        for key in ("k1", "k2", "k3", "time_headway", "standstill", "engine_lag", "v_max", "literal_ku"):
            if key in spec:
                val = issues.number(spec, key, where)
                if val is None:
                    break
                fields[key] = val
        else:
            if "id" in spec:
                if not isinstance(spec["id"], int) or isinstance(spec["id"], bool):
                    issues.add(f"{where}.id", "expected an integer")
                    continue
                fields["mode_id"] = spec["id"]
            if "law" in spec:
                fields["law"] = spec["law"]
            try:
                if base is not None:
                    out[name] = replace(base, **fields)
                elif all(k in fields for k in ("mode_id", "k1", "k2", "k3", "time_headway")):
                    out[name] = ModeParams(name=name, **fields)
            except ParameterError as exc:
                issues.add(where, str(exc).split(": ", 1)[-1])
    ids = [p.mode_id for p in out.values()]
    if len(ids) != len(set(ids)):
        issues.add("modes", "mode ids must be unique")
    return out


def _gain_rows(val, where: str, issues: _Issues):
    arr = np.asarray(val, dtype=float) if isinstance(val, list) else None
    if arr is None or arr.shape != (2, 4) or not np.all(np.isfinite(arr)):
        issues.add(where, "expected 2 rows (headway, velocity channel) of 4 numbers")
        return None
    return arr


def _parse_gains(raw, modes: dict, issues: _Issues) -> dict:
    section = raw.get("gains") or {}
    if not isinstance(section, dict):
        issues.add("gains", "expected a mapping of mode name to {L, M}")
        section = {}
    default_rows = {presets.HIGHWAY_PARAMS.name: presets.GAIN_ROWS[presets.HIGHWAY],
                    presets.URBAN_PARAMS.name: presets.GAIN_ROWS[presets.URBAN]}
    for name in section:
        if name not in modes:
            issues.add(f"gains.{name}", "no such mode")
    out = {}
    for name, params in modes.items():
        spec = section.get(name)
        where = f"gains.{name}"
        if spec is None:
            if name not in default_rows:
                issues.add(where, "missing (no preset gains for this mode)")
                continue
            L = np.array(default_rows[name])
            M = presets.ISOLATOR_SCALE * L
        else:
            if not isinstance(spec, dict) or "L" not in spec:
                issues.add(where, "expected a mapping with L (and optionally M)")
                continue
            L = _gain_rows(spec["L"], f"{where}.L", issues)
            if "M" in spec:
                M = _gain_rows(spec["M"], f"{where}.M", issues)
            else:
                scale = issues.number(spec, "isolator_scale", where, default=presets.ISOLATOR_SCALE, minimum=0.0)
                M = None if L is None or scale is None else scale * L
            if L is None or M is None:
                continue
        out[params.mode_id] = ObserverGains.from_channel_rows(params.mode_id, L, M)
    return out


def _parse_thresholds(raw, modes: dict, issues: _Issues) -> Optional[ThresholdConfig]:
    section = raw.get("thresholds") or {}
    if not isinstance(section, dict):
        issues.add("thresholds", "expected a mapping")
        return None
    window = section.get("window", presets.WINDOW)
    if not isinstance(window, int) or isinstance(window, bool) or window < 1:
        issues.add("thresholds.window", "must be a positive integer (samples)")
        return None
    levels = {}
    for name, params in modes.items():
        val = section.get(name)
        if val is None:
            if params.mode_id in presets.THRESHOLDS and name in (presets.HIGHWAY_PARAMS.name, presets.URBAN_PARAMS.name):
                levels[params.mode_id] = presets.THRESHOLDS[params.mode_id]
            else:
                issues.add(f"thresholds.{name}", "missing")
            continue
        if (not isinstance(val, list) or len(val) != 2
                or not all(isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0 for x in val)):
            issues.add(f"thresholds.{name}", "expected [J_DS, J_IS], both positive")
            continue
        levels[params.mode_id] = (float(val[0]), float(val[1]))
    for name in section:
        if name != "window" and name not in modes:
            issues.add(f"thresholds.{name}", "no such mode")
    return ThresholdConfig(levels, window)


def _mode_id(modes: dict, name, where: str, issues: _Issues):
    if name in modes:
        return modes[name].mode_id
    issues.add(where, f"unknown mode {name!r}")
    return None


def _parse_schedule(raw, modes: dict, issues: _Issues) -> Optional[ModeSchedule]:
    section = raw.get("schedule")
    if section is None:
        issues.add("schedule", "missing")
        return None
    try:
        if isinstance(section, dict):
            hi = _mode_id(modes, section.get("high_mode", "highway"), "schedule.high_mode", issues)
            lo = _mode_id(modes, section.get("low_mode", "urban"), "schedule.low_mode", issues)
            thr = issues.number(section, "speed_threshold", "schedule", positive=True)
            band = issues.number(section, "band", "schedule", default=2.0, minimum=0.0)
            if None in (hi, lo, thr, band):
                return None
            return ModeSchedule((), thr, band, hi, lo)
        if not isinstance(section, list) or not section:
            issues.add("schedule", "expected a non-empty list of {t, mode} or an automatic rule")
            return None
        entries = []
        for j, item in enumerate(section):
            where = f"schedule[{j}]"
            if not isinstance(item, dict):
                issues.add(where, "expected {t, mode}")
                return None
            t = issues.number(item, "t", where, minimum=0.0)
            m = _mode_id(modes, item.get("mode"), f"{where}.mode", issues)
            if t is None or m is None:
                return None
            entries.append((t, m))
        return ModeSchedule(tuple(entries))
    except ScheduleError as exc:
        issues.add("schedule", str(exc))
        return None


def _parse_attacks(raw, modes: dict, n_followers: int, issues: _Issues) -> tuple:
    section = raw.get("attacks") or []
    if not isinstance(section, list):
        issues.add("attacks", "expected a list")
        return ()
    out = []
    for j, item in enumerate(section):
        where = f"attacks[{j}]"
        if not isinstance(item, dict):
            issues.add(where, "expected a mapping")
            continue
        kw: dict[str, Any] = {}
        try:
            kw["channel"] = item["channel"]
            kw["kind"] = item["kind"]
            kw["target_vehicle"] = item["vehicle"]
            kw["start"] = float(item["start"])
        except KeyError as exc:
            issues.add(where, f"missing {exc.args[0]}")
            continue
        except (TypeError, ValueError):
            issues.add(f"{where}.start", "expected a number")
            continue
        if not isinstance(kw["target_vehicle"], int) or not 1 <= kw["target_vehicle"] <= n_followers:
            issues.add(f"{where}.vehicle", f"must be a follower index 1..{n_followers}")
            continue
        for key in ("end", "period", "delay"):
            if key in item:
                kw[key] = item[key]
        for key in ("bias", "amplitude"):
            if key in item:
                kw[key] = item[key]
        if "mode" in item:
            m = _mode_id(modes, item["mode"], f"{where}.mode", issues)
            if m is None:
                continue
            kw["mode_override"] = m
        try:
            out.append(AttackSpec(**kw))
        except (AttackConfigError, ValueError, TypeError) as exc:
            issues.add(where, str(exc))
    return tuple(out)


def _parse_trace(raw, base_dir: Path, duration: float, dt: float, issues: _Issues) -> Optional[TraceSeries]:
    spec = raw.get("trace")
    if not isinstance(spec, dict):
        issues.add("trace", "expected {file: ...} or {synthetic: highway|urban}")
        return None
    try:
        if "file" in spec:
            path = Path(spec["file"])
            if not path.is_absolute():
                path = base_dir / path
            if not path.exists():
                issues.add("trace.file", f"not found: {path}")
                return None
            trace = load_trace(path, spec.get("units", "m/s"))
        elif "synthetic" in spec:
            length = max(duration, float(spec.get("duration", duration)))
            trace = synthetic_cycle(spec["synthetic"], length, int(spec.get("seed", 0)))
        else:
            issues.add("trace", "needs either file or synthetic")
            return None
    except TraceError as exc:
        issues.add("trace", str(exc))
        return None
    if not trace.covers(duration):
        issues.add("trace", f"ends at {trace.end:g} s, before the {duration:g} s horizon")
        return None
    return resample(trace, dt)


def _parse_road(raw, issues: _Issues) -> RingRoad:
    section = raw.get("road") or {}
    length = issues.number(section, "length", "road", default=600.0, positive=True)
    veh = issues.number(section, "vehicle_length", "road", default=5.0, positive=True)
    links = section.get("num_links", 20)
    if None in (length, veh):
        return RingRoad()
    return RingRoad(length, int(links), veh)


def _parse_leader(raw, issues: _Issues):
    section = raw.get("leader") or {}
    accel = issues.number(section, "accel_limit", "leader", default=3.0, positive=True)
    safety = section.get("safety", {}) or {}
    if safety is False:
        return accel, LeaderSafety(enabled=False)
    if not isinstance(safety, dict):
        issues.add("leader.safety", "expected a mapping or false")
        return accel, LeaderSafety()
    vals = {k: issues.number(safety, k, "leader.safety", default=getattr(LeaderSafety(), k), positive=True)
            for k in ("reaction_time", "decel", "min_gap")}
    if None in vals.values():
        return accel, LeaderSafety()
    return accel, LeaderSafety(bool(safety.get("enabled", True)), **vals)


def _stability_issues(modes: dict, gains: dict, issues: _Issues):
    for name, params in modes.items():
        abscissa = closed_loop_eigencheck(params)
        if not abscissa < 0:
            issues.add(f"modes.{name}", f"closed-loop spectral abscissa {abscissa:.4g} is not negative (unstable)")
        g = gains.get(params.mode_id)
        if g is None:
            continue
        for label, val in zip(("A - LC", "A - MC"), g.error_abscissae(params)):
            if not val < 0:
                issues.add(f"gains.{name}", f"observer error matrix {label} has spectral abscissa {val:.4g} (unstable)")


def build_config(raw: dict, base_dir=".", source: str = "", overrides: Optional[dict] = None) -> ScenarioConfig:
    """Turn a parsed scenario mapping into a validated :class:`ScenarioConfig`.

    All problems are collected and raised together as :class:`ScenarioError`.
    ``overrides`` may carry ``seed``, ``duration`` and ``noise_sigma``.
    """
    raw = copy.deepcopy(raw)
    for key, val in (overrides or {}).items():
        if val is not None:
            raw[key] = val
    issues = _Issues()
    for key in sorted(set(raw) - _TOP_KEYS):
        issues.add(key, "unknown key")
    base_dir = Path(base_dir)

    dt = issues.number(raw, "dt", "scenario", default=0.05, positive=True)
    duration = issues.number(raw, "duration", "scenario", default=120.0, minimum=0.0)
    sigma = issues.number(raw, "noise_sigma", "scenario", default=0.05, minimum=0.0)
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        issues.add("scenario.seed", "must be a non-negative integer")
        seed = 0
    n_followers = raw.get("followers", 11)
    if not isinstance(n_followers, int) or n_followers < 1:
        issues.add("scenario.followers", "must be a positive integer")
        n_followers = 11
    if dt and duration is not None and abs(duration / dt - round(duration / dt)) > 1e-6:
        issues.add("scenario.duration", f"must be a multiple of dt = {dt:g}")

    modes = _parse_modes(raw, issues)
    gains = _parse_gains(raw, modes, issues)
    thresholds = _parse_thresholds(raw, modes, issues)
    schedule = _parse_schedule(raw, modes, issues)
    attacks = _parse_attacks(raw, modes, n_followers, issues)
    road = _parse_road(raw, issues)
    accel_limit, safety = _parse_leader(raw, issues)
    trace = _parse_trace(raw, base_dir, duration or 0.0, dt or 0.05, issues) if dt and duration is not None else None
    _stability_issues(modes, gains, issues)
    if schedule is not None:
        known = {p.mode_id for p in modes.values()}
        for m in sorted(schedule.modes - known):
            issues.add("schedule", f"mode id {m} is not defined")

    offset = raw.get("init_offset", [0.0, 0.0, 0.0, 0.0])
    if not isinstance(offset, list) or len(offset) != 4:
        issues.add("init_offset", "expected 4 numbers")
        offset = [0.0] * 4
    factor = issues.number(raw, "disengage_factor", "scenario", default=3.0, positive=True)

    if issues.items:
        raise ScenarioError(issues.items, source)
    config = ScenarioConfig(
        name=str(raw.get("name", Path(source).stem if source else "scenario")),
        trace=trace,
        modes={p.mode_id: p for p in modes.values()},
        gains=gains,
        schedule=schedule,
        thresholds=thresholds,
        road=road,
        n_followers=n_followers,
        attacks=attacks,
        noise_seed=seed,
        noise_sigma=sigma,
        duration=duration,
        dt=dt,
        leader_accel_limit=accel_limit,
        leader_safety=safety,
        init_offset=tuple(float(x) for x in offset),
        disengage_factor=factor,
        mode_names={p.mode_id: name for name, p in modes.items()},
        source=_snapshot(raw, base_dir),
    )
    try:
        validate_geometry(config)
    except ConfigError as exc:
        raise ScenarioError([f"road: {exc}"], source) from None
    return config


def _snapshot(raw: dict, base_dir: Path) -> dict:
    """The effective raw config with the trace path made absolute."""
    snap = copy.deepcopy(raw)
    trace = snap.get("trace")
    if isinstance(trace, dict) and "file" in trace:
        path = Path(trace["file"])
        trace["file"] = str(path if path.is_absolute() else (base_dir / path).resolve())
    return snap


def load_config(path, overrides: Optional[dict] = None) -> ScenarioConfig:
    path = resolve_scenario(path)
    return build_config(read_raw(path), path.parent, str(path), overrides)


def validate_file(path) -> list:
    """All problems found in a scenario file; empty means valid."""
    try:
        load_config(path)
    except ScenarioError as exc:
        return list(exc.issues) if not exc.source else [f"{exc.source}: {i}" for i in exc.issues]
    return []


def dump_snapshot(config: ScenarioConfig, path):
    snap = dict(config.source or {})
    snap.update(seed=config.noise_seed, duration=config.duration, noise_sigma=config.noise_sigma)
    Path(path).write_text(yaml.safe_dump(snap, sort_keys=True), encoding="utf-8")
