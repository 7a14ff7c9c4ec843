"""Supervisory mode selection (the trusted mode signal)."""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Optional

HIGHWAY = 1
URBAN = 2


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ModeSchedule:
    """Scripted ``(switch_time, mode_id)`` entries plus an optional speed rule.

    When ``entries`` is non-empty it fully determines the mode. The speed
    rule picks ``high_mode`` above ``threshold + band`` and ``low_mode``
    below ``threshold - band``, keeping the previous mode in between.
    """

    entries: tuple = ()
    threshold: Optional[float] = None
    band: float = 2.0
    high_mode: int = HIGHWAY
    low_mode: int = URBAN

    def __post_init__(self):
        entries = tuple((float(t), int(m)) for t, m in self.entries)
        object.__setattr__(self, "entries", entries)
        if entries:
            if entries[0][0] != 0.0:
                raise ScheduleError("first schedule entry must be at t = 0")
            times = [t for t, _ in entries]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ScheduleError("schedule switch times must be strictly increasing")
        elif self.threshold is None:
            raise ScheduleError("empty schedule with no automatic rule")
        if self.band < 0:
            raise ScheduleError("hysteresis band must be non-negative")

    @property
    def modes(self) -> set:
        if self.entries:
            return {m for _, m in self.entries}
        return {self.high_mode, self.low_mode}

    def switch_times(self) -> list:
        return [t for t, _ in self.entries[1:]]


def commanded_mode(
    schedule: ModeSchedule,
    t: float,
    leader_velocity: float = 0.0,
    previous: Optional[int] = None,
) -> int:
    if t < 0:
        raise ValueError("t must be non-negative")
    if schedule.entries:
        times = [s for s, _ in schedule.entries]
        # right-continuous: a switch at 57 s is already in force at t = 57
        idx = bisect.bisect_right(times, t + 1e-9) - 1
        return schedule.entries[idx][1]
    thr, band = schedule.threshold, schedule.band
    if leader_velocity > thr + band:
        return schedule.high_mode
    if leader_velocity < thr - band:
        return schedule.low_mode
    if previous is not None:
        return previous
    return schedule.high_mode if leader_velocity >= thr else schedule.low_mode
