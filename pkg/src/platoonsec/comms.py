"""V2V / V2I message passing and message-level attack injection."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Optional, Sequence

from platoonsec.model import VehicleState

# float time grid tolerance
_EPS = 1e-9


class Channel(str, Enum):
    V2V = "V2V"
    V2I = "V2I"


class AttackKind(str, Enum):
    FDI = "FDI"
    DOS = "DoS"
    REPLAY = "Replay"
    BLACKHOLE = "Blackhole"


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class V2VPayload:
    pred_velocity: float
    pred_acceleration: float
    pred_control: float
    link_active: bool = True
    timestamp: float = 0.0

    @classmethod
    def absent(cls, timestamp: float = 0.0) -> "V2VPayload":
        nan = math.nan
        return cls(nan, nan, nan, False, timestamp)

    @classmethod
    def from_state(cls, state: VehicleState, timestamp: float = 0.0) -> "V2VPayload":
        return cls(state.velocity, state.acceleration, state.control_input, True, timestamp)


@dataclass(frozen=True)
class ModeCommand:
    commanded_mode: int
    issue_time: float = 0.0


@dataclass(frozen=True)
class AttackSpec:
    """One attack on one vehicle's incoming channel.

    ``bias`` is added to (velocity, acceleration, control) of a V2V payload;
    ``amplitude``/``period`` superimpose a sinusoid on the same fields.
    ``mode_override`` is the forged mode of a V2I FDI and ``delay`` the replay
    lag in seconds.
    """

    channel: Channel
    kind: AttackKind
    target_vehicle: int
    start: float
    end: float = math.inf
    bias: tuple = (0.0, 0.0, 0.0)
    amplitude: tuple = (0.0, 0.0, 0.0)
    period: float = 0.0
    mode_override: Optional[int] = None
    delay: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "channel", Channel(self.channel))
        object.__setattr__(self, "kind", AttackKind(self.kind))
        object.__setattr__(self, "bias", tuple(float(b) for b in self.bias))
        object.__setattr__(self, "amplitude", tuple(float(b) for b in self.amplitude))
        if not self.start < self.end:
            raise AttackConfigError(f"attack start {self.start} must precede end {self.end}")
        if self.start < 0:
            raise AttackConfigError("attack start must be non-negative")
        if self.target_vehicle < 1:
            raise AttackConfigError(f"target_vehicle must be a follower index, got {self.target_vehicle}")
        if len(self.bias) != 3 or len(self.amplitude) != 3:
            raise AttackConfigError("bias and amplitude need 3 entries (velocity, acceleration, control)")
        if self.kind is AttackKind.REPLAY:
            if self.channel is not Channel.V2V:
                raise AttackConfigError("replay is only defined for V2V")
            if self.delay is None or not self.delay > 0:
                raise AttackConfigError("replay attack needs a positive delay")
        if self.kind is AttackKind.FDI and self.channel is Channel.V2I and self.mode_override is None:
            raise AttackConfigError("V2I FDI needs mode_override")
        if any(self.amplitude) and not self.period > 0:
            raise AttackConfigError("sinusoidal FDI needs a positive period")

    def active(self, t: float) -> bool:
        return self.start - _EPS <= t < self.end - _EPS

    def fdi_offset(self, t: float) -> tuple:
        if not any(self.amplitude):
            return self.bias
        s = math.sin(2.0 * math.pi * (t - self.start) / self.period)
        return tuple(b + a * s for b, a in zip(self.bias, self.amplitude))


class ReplayBuffer:
    """Recent true payloads of one V2V link, oldest first."""

    def __init__(self, horizon: float, dt: float = 0.05):
        self.dt = dt
        self.capacity = int(math.ceil(horizon / dt + _EPS)) + 2
        self._items: deque = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self._items)

    def push(self, timestamp: float, payload: V2VPayload):
        if self._items and timestamp <= self._items[-1][0] + _EPS:
            if abs(timestamp - self._items[-1][0]) <= _EPS:
                self._items[-1] = (timestamp, payload)
                return
            raise ValueError("replay buffer timestamps must increase")
        self._items.append((timestamp, payload))

    def lookup(self, timestamp: float) -> Optional[V2VPayload]:
        tol = self.dt / 2
        for ts, payload in reversed(self._items):
            if abs(ts - timestamp) <= tol:
                return payload
            if ts < timestamp - tol:
                break
        return None

    def timestamps(self):
        return [ts for ts, _ in self._items]


def attacks_for(attacks: Iterable[AttackSpec], vehicle: int, channel: Channel) -> list:
    return [a for a in attacks if a.target_vehicle == vehicle and a.channel is channel]


def transmit_v2v(
    truth: VehicleState,
    attacks: Sequence[AttackSpec],
    t: float,
    buffer: Optional[ReplayBuffer] = None,
    vehicle: Optional[int] = None,
) -> V2VPayload:
    """Deliver the predecessor's broadcast, applying active V2V attacks.

    ``attacks`` are taken to concern this link unless ``vehicle`` is given,
    in which case only specs targeting that receiver apply. A replay that
    reaches back before recorded history degrades to DoS for that step.
    """
    honest = V2VPayload.from_state(truth, t)
    if buffer is not None:
        buffer.push(t, honest)
    specs = [a for a in attacks if a.channel is Channel.V2V and a.active(t)]
    if vehicle is not None:
        specs = [a for a in specs if a.target_vehicle == vehicle]
    payload = honest
    for spec in specs:
        if spec.kind in (AttackKind.DOS, AttackKind.BLACKHOLE):
            return V2VPayload.absent(t)
        if spec.kind is AttackKind.REPLAY:
            old = buffer.lookup(t - spec.delay) if buffer is not None and t - spec.delay >= -_EPS else None
            if old is None:
                return V2VPayload.absent(t)
            payload = replace(old, timestamp=t)
        elif spec.kind is AttackKind.FDI:
            dv, da, du = spec.fdi_offset(t)
            payload = replace(
                payload,
                pred_velocity=payload.pred_velocity + dv,
                pred_acceleration=payload.pred_acceleration + da,
                pred_control=payload.pred_control + du,
            )
    return payload


def transmit_v2i(
    command: ModeCommand,
    attacks: Sequence[AttackSpec],
    vehicle: int,
    t: float,
    last_received: Optional[ModeCommand] = None,
) -> ModeCommand:
    """Mode command as received by ``vehicle``.

    DoS freezes the last delivered command (the very first command is always
    delivered so the vehicle has a mode to run).
    """
    received = command
    for spec in attacks:
        if spec.channel is not Channel.V2I or spec.target_vehicle != vehicle or not spec.active(t):
            continue
        if spec.kind in (AttackKind.DOS, AttackKind.BLACKHOLE):
            if last_received is not None:
                return last_received
        elif spec.kind is AttackKind.FDI:
            received = ModeCommand(int(spec.mode_override), command.issue_time)
    return received
