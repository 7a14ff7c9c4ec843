"""Leader drive-cycle traces: CSV loading, resampling and synthetic cycles."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MPH_TO_MS = 0.44704
MAX_GAP = 1.0
_UNITS = {"m/s": 1.0, "mps": 1.0, "mph": MPH_TO_MS, "km/h": 1 / 3.6, "kph": 1 / 3.6}


class TraceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TraceSeries:
    times: np.ndarray
    velocities: np.ndarray
    native_dt: float
    label: str = ""

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.velocities, dtype=float)
        if t.shape != v.shape or t.ndim != 1 or t.size == 0:
            raise TraceError("times and velocities must be equal-length 1-D sequences")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise TraceError("trace contains non-finite samples")
        steps = np.diff(t)
        if np.any(steps <= 0):
            raise TraceError(f"non-monotone time at sample {int(np.argmax(steps <= 0)) + 1}")
        if np.any(steps > MAX_GAP + 1e-9):
            raise TraceError(f"gap larger than {MAX_GAP} s at sample {int(np.argmax(steps > MAX_GAP + 1e-9)) + 1}")
        if np.any(v < 0):
            raise TraceError(f"negative velocity at sample {int(np.argmax(v < 0))}")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "velocities", v)

    def __len__(self):
        return self.times.size

    def __eq__(self, other):
        if not isinstance(other, TraceSeries):
            return NotImplemented
        return (
            np.array_equal(self.times, other.times)
            and np.array_equal(self.velocities, other.velocities)
            and self.native_dt == other.native_dt
        )

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    @property
    def samples(self) -> list:
        return list(zip(self.times.tolist(), self.velocities.tolist()))

    def velocity_at(self, t):
        return np.interp(t, self.times, self.velocities)

    def covers(self, duration: float) -> bool:
        return self.start <= 1e-9 and self.end >= duration - 1e-9


def _native_dt(times) -> float:
    if len(times) < 2:
        return 0.0
    return float(np.median(np.diff(times)))


def load_trace(path, units: str = "m/s", label: str | None = None) -> TraceSeries:
    """Read a two-column ``time_s, speed`` CSV; a single header line is allowed."""
    path = Path(path)
    try:
        scale = _UNITS[units]
    except KeyError:
        raise TraceError(f"unknown speed unit {units!r}") from None
    times, speeds = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise TraceError(f"{path}:{lineno}: expected two columns")
            try:
                t, v = float(row[0]), float(row[1])
            except ValueError:
                if lineno == 1 and not times:
                    continue  # header
                raise TraceError(f"{path}:{lineno}: cannot parse {row[:2]}") from None
            if times and t <= times[-1]:
                raise TraceError(f"{path}:{lineno}: non-monotone time {t} after {times[-1]}")
            if times and t - times[-1] > MAX_GAP + 1e-9:
                raise TraceError(f"{path}:{lineno}: gap of {t - times[-1]:.3g} s exceeds {MAX_GAP} s")
            if v < 0:
                raise TraceError(f"{path}:{lineno}: negative velocity {v}")
            times.append(t)
            speeds.append(v * scale)
    if not times:
        raise TraceError(f"{path}: no samples")
    return TraceSeries(np.array(times), np.array(speeds), _native_dt(times), label or path.stem)


def save_trace(trace: TraceSeries, path, header: bool = True):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(["time_s", "speed"])
        for t, v in trace.samples:
            writer.writerow([f"{t:.10g}", f"{v:.10g}"])


def _grid(start: float, end: float, dt: float) -> np.ndarray:
    n = int(np.floor((end - start) / dt + 1e-9))
    grid = np.round(start + dt * np.arange(n + 1), 10)
    if end - grid[-1] > 1e-9:
        grid = np.append(grid, end)
    return grid


def resample(trace: TraceSeries, dt: float) -> TraceSeries:
    """Linear interpolation onto a uniform grid; both endpoints are kept exactly."""
    if not dt > 0:
        raise TraceError("dt must be positive")
    grid = _grid(trace.start, trace.end, dt)
    v = np.interp(grid, trace.times, trace.velocities)
    return TraceSeries(grid, v, dt, trace.label)


def concat(first: TraceSeries, second: TraceSeries, at: float, label: str = "", ramp: float = 0.0) -> TraceSeries:
    """``first`` up to time ``at`` followed by ``second`` shifted to start at ``at``.

    With ``ramp > 0`` the last ``ramp`` seconds of ``first`` are blended
    linearly into the starting speed of ``second``, so the join has no jump.
    """
    if ramp < 0 or ramp >= at:
        raise TraceError("ramp must lie in [0, at)")
    keep = first.times < at - 1e-9
    head_t = first.times[keep]
    head_v = first.velocities[keep].copy()
    if ramp > 0:
        sel = head_t > at - ramp
        w = (head_t[sel] - (at - ramp)) / ramp
        head_v[sel] = (1 - w) * head_v[sel] + w * second.velocities[0]
    t = np.concatenate([head_t, second.times - second.start + at])
    v = np.concatenate([head_v, second.velocities])
    return TraceSeries(t, v, min(first.native_dt, second.native_dt), label or f"{first.label}+{second.label}")


def _highway(duration: float, rng: np.random.Generator, dt: float):
    mean, tau_a, pull, jerk_sigma = 28.0, 2.0, 0.02, 0.35
    n = int(round(duration / dt)) + 1
    v = np.empty(n)
    v[0] = mean
    a = 0.0
    for k in range(1, n):
        a += dt * (-a / tau_a - pull * (v[k - 1] - mean)) + jerk_sigma * np.sqrt(dt) * rng.standard_normal()
        a = float(np.clip(a, -2.0, 2.0))
        v[k] = v[k - 1] + a * dt
    return v


def _urban(duration: float, rng: np.random.Generator, dt: float):
    accel, decel = 1.2, 1.5
    n = int(round(duration / dt)) + 1
    out = []
    v = float(rng.uniform(11.0, 14.0))
    phase, remaining, target = "cruise", float(rng.uniform(6.0, 10.0)), v
    while len(out) < n:
        out.append(v)
        if phase == "cruise":
            remaining -= dt
            if remaining <= 0:
                phase = "brake"
        elif phase == "brake":
            v = max(0.0, v - decel * dt)
            if v == 0.0:
                phase, remaining = "dwell", float(rng.uniform(5.0, 9.0))
        elif phase == "dwell":
            remaining -= dt
            if remaining <= 0:
                phase, target = "accel", float(rng.uniform(10.0, 15.0))
        else:
            v = min(target, v + accel * dt)
            if v >= target:
                phase, remaining = "cruise", float(rng.uniform(8.0, 16.0))
    return np.array(out)


def synthetic_cycle(kind: str, duration: float, seed: int = 0, dt: float = 0.1) -> TraceSeries:
    """Deterministic stand-in for NGSIM-like highway or UDDS-like urban traces.

    highway: mean about 28 m/s with a smooth, acceleration-bounded (2 m/s^2)
    random fluctuation. urban: cruise / brake / dwell-at-zero / accelerate
    cycles between 0 and 15 m/s.
    """
    if not duration > 0:
        raise TraceError("duration must be positive")
    rng = np.random.default_rng(seed)
    if kind == "highway":
        v = _highway(duration, rng, dt)
    elif kind == "urban":
        v = _urban(duration, rng, dt)
    else:
        raise TraceError(f"unknown cycle kind {kind!r}")
    t = np.round(dt * np.arange(v.size), 10)
    return TraceSeries(t, v, dt, f"synthetic-{kind}-{seed}")
