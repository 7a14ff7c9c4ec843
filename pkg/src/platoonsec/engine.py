"""Ring-road world and the fixed-step closed loop.

A step at ``t_k`` measures, updates residuals, takes the supervisor's
command, decides (starting isolators), delivers V2I commands and logs the
row. It then delivers V2V payloads and advances plant, leader and observers
to ``t_{k+1}``. The loop is vectorised over vehicles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from platoonsec.comms import (
    AttackSpec,
    Channel,
    AttackKind,
    ModeCommand,
    ReplayBuffer,
    V2VPayload,
    transmit_v2i,
    transmit_v2v,
)
from platoonsec.detection import DecisionState, ObserverBank, ObserverGains, ThresholdConfig, decide
from platoonsec.ingest import TraceSeries
from platoonsec.model import (
    ACCEL,
    CONTROL,
    HEADWAY,
    VELOCITY,
    ModeParams,
    VehicleState,
    build_matrices,
    closed_loop_rhs,
    euler_chi,
    governed_input,
)
from platoonsec.supervisor import ModeSchedule, commanded_mode

DIVERGENCE_LIMIT = 1e6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RingRoad:
    length: float = 600.0
    num_links: int = 20
    vehicle_length: float = 5.0


@dataclass(frozen=True)
class LeaderSafety:
    """Safe-speed rule keeping the trace-driven leader off its circular predecessor."""

    enabled: bool = True
    reaction_time: float = 1.0
    decel: float = 3.0
    min_gap: float = 2.0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    trace: TraceSeries
    modes: Mapping[int, ModeParams]
    gains: Mapping[int, ObserverGains]
    schedule: ModeSchedule
    thresholds: ThresholdConfig
    road: RingRoad = RingRoad()
    n_followers: int = 11
    attacks: tuple = ()
    noise_seed: int = 0
    noise_sigma: float = 0.05
    duration: float = 120.0
    dt: float = 0.05
    leader_accel_limit: float = 3.0
    leader_safety: LeaderSafety = LeaderSafety()
    init_offset: tuple = (0.0, 0.0, 0.0, 0.0)
    diagnostic_isolators: bool = False
    disengage_factor: float = 3.0
    mode_names: Mapping[int, str] = field(default_factory=dict)
    source: Optional[dict] = None

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def attack_starts(self, vehicle: int, channel: Optional[Channel] = None) -> list:
        return sorted(a.start for a in self.attacks
                      if a.target_vehicle == vehicle and (channel is None or a.channel is channel))

    @property
    def targeted(self) -> set:
        return {a.target_vehicle for a in self.attacks}


@dataclass
class SimLog:
    """Per-step record; every array has ``n_steps + 1`` rows, vehicle columns 0..n."""

    t: np.ndarray
    pos: np.ndarray
    v: np.ndarray
    a: np.ndarray
    u: np.ndarray
    h: np.ndarray
    mode: np.ndarray
    rc: np.ndarray
    gamma: np.ndarray
    v2x_flag: np.ndarray
    v2i_flag: np.ndarray
    psi_at_activation: dict = field(default_factory=dict)
    chi_at_activation: dict = field(default_factory=dict)
    aborted: bool = False
    herr: Optional[np.ndarray] = None
    chi_hat: Optional[np.ndarray] = None
    psi_hat: Optional[np.ndarray] = None

    @property
    def n_vehicles(self) -> int:
        return self.pos.shape[1]

    @property
    def n_rows(self) -> int:
        return self.t.size

    @classmethod
    def allocate(cls, rows: int, n_vehicles: int) -> "SimLog":
        f = lambda: np.zeros((rows, n_vehicles))
        return cls(
            t=np.zeros(rows), pos=f(), v=f(), a=f(), u=f(), h=f(),
            mode=np.zeros((rows, n_vehicles), dtype=int), rc=f(), gamma=f(),
            v2x_flag=np.zeros((rows, n_vehicles), dtype=int), v2i_flag=np.zeros(rows, dtype=int),
        )

    def truncate(self, rows: int) -> "SimLog":
        cut = {k: getattr(self, k)[:rows] for k in
               ("t", "pos", "v", "a", "u", "h", "mode", "rc", "gamma", "v2x_flag", "v2i_flag")}
        extra = {k: getattr(self, k)[:rows] if getattr(self, k) is not None else None
                 for k in ("herr", "chi_hat", "psi_hat")}
        return SimLog(**cut, **extra, psi_at_activation=self.psi_at_activation,
                      chi_at_activation=self.chi_at_activation, aborted=self.aborted)


def ring_gap(pos_pred: float, pos: float, road: RingRoad):
    """Bumper-to-bumper gap on the ring; returns ``(headway, collided)`` with headway clamped at 0."""
    raw = (pos_pred - pos) % road.length - road.vehicle_length
    if raw < 0:
        return 0.0, True
    return raw, False


def _ring_gaps(pos: np.ndarray, road: RingRoad) -> np.ndarray:
    return (np.roll(pos, 1) - pos) % road.length - road.vehicle_length


def leader_step(
    trace: TraceSeries,
    t: float,
    state: VehicleState,
    dt: float = 0.05,
    accel_limit: float = 3.0,
    ring_length: float = 600.0,
    safe_velocity: float = math.inf,
) -> VehicleState:
    """Track the trace velocity at ``t + dt`` under an acceleration limit.

    ``safe_velocity`` caps the target (see :func:`leader_safe_velocity`).
    """
    v, accel = _leader_track(float(trace.velocity_at(t + dt)), state.velocity, dt, accel_limit, safe_velocity)
    pos = (state.position + state.velocity * dt) % ring_length
    return VehicleState(state.headway, v, accel, accel, pos)


def _leader_track(target: float, v: float, dt: float, accel_limit: float, safe_velocity: float):
    target = min(target, safe_velocity)
    accel = min(max((target - v) / dt, -accel_limit), accel_limit)
    return max(0.0, v + accel * dt), accel


def leader_safe_velocity(gap: float, v: float, v_pred: float, safety: LeaderSafety) -> float:
    """Krauss-type safe speed behind the circular predecessor."""
    if not safety.enabled:
        return math.inf
    g = gap - safety.min_gap
    tau, b = safety.reaction_time, safety.decel
    return max(0.0, v_pred + (g - v_pred * tau) / ((v + v_pred) / (2 * b) + tau))


@dataclass
class SummaryReport:
    detection: Optional[dict]
    detections: list
    isolation: Optional[dict]
    false_alarms: int
    min_headway: dict
    collisions: list
    disengagements: list
    velocity: dict
    aborted: bool

    def to_dict(self) -> dict:
        return {
            "detection": self.detection,
            "detections": self.detections,
            "isolation": self.isolation,
            "false_alarms": self.false_alarms,
            "min_headway": self.min_headway,
            "collisions": self.collisions,
            "disengagements": self.disengagements,
            "velocity": self.velocity,
            "aborted": self.aborted,
        }

    def verdict(self) -> str:
        parts = []
        if self.detections:
            parts.append("v2x: " + ", ".join(
                f"veh {d['vehicle']} @ {d['time']:.2f}s" + (f" (+{d['delay']:.2f}s)" if d["delay"] is not None else "")
                for d in self.detections))
        else:
            parts.append("v2x: none")
        if self.isolation:
            iso = self.isolation
            parts.append(f"v2i: @ {iso['time']:.2f}s" + (f" (+{iso['delay']:.2f}s)" if iso["delay"] is not None else ""))
        else:
            parts.append("v2i: none")
        parts.append(f"false alarms: {self.false_alarms}")
        if self.aborted:
            parts.append("ABORTED (divergence)")
        return "; ".join(parts)


def _initial_state(config: ScenarioConfig):
    N = config.n_followers + 1
    road = config.road
    v0 = float(config.trace.velocity_at(0.0))
    mode0 = commanded_mode(config.schedule, 0.0, v0)
    params = config.modes[mode0]
    h0 = params.desired_headway(v0)
    x = np.zeros((N, 4))
    x[:, VELOCITY] = v0
    x[1:, HEADWAY] = h0
    pos = np.zeros(N)
    spacing = h0 + road.vehicle_length
    pos[:] = (config.n_followers - np.arange(N)) * spacing
    pos %= road.length
    x[0, HEADWAY] = _ring_gaps(pos, road)[0]
    return x, pos


def validate_geometry(config: ScenarioConfig):
    road = config.road
    N = config.n_followers + 1
    min_mode = min(p.standstill for p in config.modes.values())
    if not road.length > N * (road.vehicle_length + min_mode):
        raise ConfigError("ring too short for the platoon at standstill")
    x, pos = _initial_state(config)
    if _ring_gaps(pos, road)[0] < 0:
        raise ConfigError("initial equilibrium spacing does not fit on the ring")


def run_scenario(config: ScenarioConfig, record_estimates: bool = False):
    """Simulate ``config``; returns ``(SimLog, SummaryReport)``.

    ``record_estimates`` additionally stores every detector and isolator
    estimate in the log (``chi_hat``/``psi_hat``, shape ``(rows, N, 4)``).
    """
    if not config.trace.covers(config.duration):
        raise ConfigError(f"trace {config.trace.label!r} ends at {config.trace.end}s, before {config.duration}s")
    road, dt = config.road, config.dt
    n = config.n_followers
    N = n + 1
    K = config.n_steps
    log = SimLog.allocate(K + 1, N)
    log.herr = np.zeros((K + 1, N))
    if record_estimates:
        log.chi_hat = np.zeros((K + 1, N, 4))
        log.psi_hat = np.full((K + 1, N, 4), np.nan)
    rng = np.random.default_rng(config.noise_seed)

    mode_ids = sorted(config.modes)
    mats = {m: build_matrices(config.modes[m]) for m in mode_ids}
    A_stack = np.stack([mats[m].A for m in mode_ids])
    D_stack = np.stack([mats[m].D for m in mode_ids])
    S_stack = np.stack([mats[m].S for m in mode_ids])
    s_arr = np.array([config.modes[m].standstill for m in mode_ids])
    vmax_arr = np.array([config.modes[m].v_max for m in mode_ids])
    mode_index = {m: j for j, m in enumerate(mode_ids)}
    obs_A = {m: np.broadcast_to(mats[m].A, (n, 4, 4)).copy() for m in mode_ids}
    obs_D = {m: np.broadcast_to(mats[m].D, (n, 4, 4)).copy() for m in mode_ids}

    x, pos = _initial_state(config)
    bank = ObserverBank(n, config.thresholds.window)
    chi_hat0 = x.copy()
    chi_hat0[1:] += np.asarray(config.init_offset, dtype=float)
    bank.reset(chi_hat0)

    v2v_attacked = sorted({a.target_vehicle for a in config.attacks if a.channel is Channel.V2V})
    buffers = {}
    for i in v2v_attacked:
        delays = [a.delay for a in config.attacks
                  if a.target_vehicle == i and a.kind is AttackKind.REPLAY]
        buffers[i] = ReplayBuffer(max(delays, default=dt), dt)
    v2i_attacks = [a for a in config.attacks if a.channel is Channel.V2I]
    v2i_targets = sorted({a.target_vehicle for a in v2i_attacks})
    # leader targets on the step grid, one step ahead
    trace_next = config.trace.velocity_at(np.round((np.arange(K + 1) + 1) * dt, 10))
    vehicle_length = road.vehicle_length

    decisions = DecisionState()
    last_cmd: list = [None] * N
    prev_mode = None
    diag_started = False

    for k in range(K + 1):
        t = round(k * dt, 10)
        y = x[:, :2].copy()
        err, rc, gamma = bank.record(y[:, 0], x[0])

        cmd = commanded_mode(config.schedule, t, x[0, VELOCITY], prev_mode)
        prev_mode = cmd
        rc_map = {i: float(rc[i]) for i in range(1, N)}
        gamma_map = {i: float(gamma[i]) for i in range(1, N) if bank.active[i] and i in decisions.v2x}
        decisions = decide(rc_map, gamma_map, config.thresholds, cmd, decisions, t)
        if decisions.newly_flagged:
            bank.activate(decisions.newly_flagged, t)
            for i in decisions.newly_flagged:
                log.psi_at_activation[i] = bank.psi_hat[i].copy()
                log.chi_at_activation[i] = bank.chi_hat[i].copy()
        if config.diagnostic_isolators and not diag_started:
            bank.activate(range(1, N), t)
            diag_started = True

        command = ModeCommand(cmd, t)
        exec_modes = np.full(N, cmd)
        for i in v2i_targets:
            rx = transmit_v2i(command, v2i_attacks, i, t, last_cmd[i])
            last_cmd[i] = rx
            exec_modes[i] = rx.commanded_mode

        log.t[k] = t
        log.pos[k] = pos
        log.v[k] = x[:, VELOCITY]
        log.a[k] = x[:, ACCEL]
        log.u[k] = x[:, CONTROL]
        log.h[k] = x[:, HEADWAY]
        log.mode[k] = exec_modes
        log.rc[k] = rc
        log.gamma[k] = gamma
        for i, t_flag in decisions.v2x.items():
            log.v2x_flag[k, i] = 1
        log.v2i_flag[k] = int(decisions.v2i_flag)
        log.herr[k] = err
        if record_estimates:
            log.chi_hat[k] = bank.chi_hat
            log.psi_hat[k, bank.active] = bank.psi_hat[bank.active]

        if not (np.all(np.isfinite(x)) and np.max(np.abs(x)) <= DIVERGENCE_LIMIT
                and np.all(np.isfinite(bank.chi_hat)) and np.max(np.abs(bank.chi_hat)) <= DIVERGENCE_LIMIT):
            log = log.truncate(k + 1)
            log.aborted = True
            break
        if k == K:
            break

        # V2V delivery to followers
        ff = np.zeros((N, 4))
        ff[1:, 1:] = x[:-1, 1:]
        link = np.ones(N, dtype=bool)
        for i in v2v_attacked:
            truth = VehicleState.from_chi(x[i - 1])
            payload = transmit_v2v(truth, config.attacks, t, buffers[i], vehicle=i)
            link[i] = payload.link_active
            if payload.link_active:
                ff[i, 1:] = (payload.pred_velocity, payload.pred_acceleration, payload.pred_control)
            else:
                ff[i, 1:] = (x[i - 1, VELOCITY], x[i - 1, ACCEL], 0.0)

        # plant
        midx = np.array([mode_index[m] for m in exec_modes[1:]])
        A_f = A_stack[midx]
        D_f = D_stack[midx].copy()
        D_f[~link[1:], CONTROL, CONTROL] = 0.0
        noise = rng.standard_normal(n) * config.noise_sigma
        xf = x[1:]
        d = closed_loop_rhs(xf, x[:-1, VELOCITY], ff[1:], A_f, D_f, S_stack[midx], s_arr[midx])
        d[:, ACCEL] += noise
        new_xf = euler_chi(xf.copy(), d, dt)
        new_xf[:, CONTROL] = governed_input(new_xf[:, CONTROL], new_xf[:, VELOCITY], vmax_arr[midx])

        gap0 = (pos[-1] - pos[0]) % road.length - vehicle_length
        safe = leader_safe_velocity(gap0, x[0, VELOCITY], x[-1, VELOCITY], config.leader_safety)
        lead_v, lead_a = _leader_track(trace_next[k], x[0, VELOCITY], dt, config.leader_accel_limit, safe)

        new_pos = (pos + x[:, VELOCITY] * dt) % road.length

        # observers use the pre-step measurement and the trusted mode
        bank.advance(y, x[0], _ObsMats(obs_A[cmd], obs_D[cmd], mats[cmd].S), config.gains[cmd],
                     config.modes[cmd], ff, link, dt)

        x[1:] = new_xf
        x[0] = (0.0, lead_v, lead_a, lead_a)
        pos = new_pos
        if (x[1:, HEADWAY] < 0).any():
            _resolve_contacts(x, pos, road)
        x[0, HEADWAY] = max(0.0, (pos[-1] - pos[0]) % road.length - vehicle_length)

    return log, summarize(log, config)


def _resolve_contacts(x: np.ndarray, pos: np.ndarray, road: RingRoad):
    """Push overlapping followers back to the bumper ahead; they take that vehicle's speed.

    The shift also shortens the gap of the vehicle behind, which may cascade
    down the platoon.
    """
    for i in range(1, x.shape[0]):
        overlap = -x[i, HEADWAY]
        if overlap <= 0:
            continue
        x[i, HEADWAY] = 0.0
        x[i, VELOCITY] = min(x[i, VELOCITY], x[i - 1, VELOCITY])
        pos[i] = (pos[i] - overlap) % road.length
        if i + 1 < x.shape[0]:
            x[i + 1, HEADWAY] -= overlap


@dataclass(frozen=True)
class _ObsMats:
    A: np.ndarray
    D: np.ndarray
    S: np.ndarray


def _onsets(mask: np.ndarray, t: np.ndarray, vehicles) -> list:
    events = []
    for i in vehicles:
        col = mask[:, i]
        rises = np.flatnonzero(col & ~np.concatenate([[False], col[:-1]]))
        events.extend({"vehicle": int(i), "time": _r(t[r])} for r in rises)
    return sorted(events, key=lambda e: (e["time"], e["vehicle"]))


def _r(x) -> float:
    return round(float(x), 6)


def summarize(log: SimLog, config: ScenarioConfig) -> SummaryReport:
    """Detection / isolation timing, false alarms and traffic outcomes from a log."""
    t = log.t
    N = log.n_vehicles
    followers = range(1, N)
    detections = []
    for i in followers:
        rows = np.flatnonzero(log.v2x_flag[:, i])
        if rows.size:
            tf = float(t[rows[0]])
            starts = [s for s in config.attack_starts(i) if s <= tf + 1e-9]
            detections.append({"vehicle": i, "time": _r(tf), "delay": _r(tf - starts[0]) if starts else None})
    detections.sort(key=lambda d: (d["time"], d["vehicle"]))
    detection = detections[0] if detections else None

    isolation = None
    iso_rows = np.flatnonzero(log.v2i_flag)
    if iso_rows.size:
        r = iso_rows[0]
        ti = float(t[r])
        flagged = [d for d in detections if d["time"] <= ti + 1e-9]
        culprit = max(flagged, key=lambda d: abs(log.gamma[r, d["vehicle"]]))["vehicle"] if flagged else None
        v2i_starts = sorted(a.start for a in config.attacks if a.channel is Channel.V2I and a.start <= ti + 1e-9)
        activation = next((d["time"] for d in detections if d["vehicle"] == culprit), None)
        isolation = {
            "time": _r(ti),
            "delay": _r(ti - v2i_starts[0]) if v2i_starts else None,
            "vehicle": culprit,
            "activation_time": activation,
            "delay_after_activation": _r(ti - activation) if activation is not None else None,
        }

    targeted = config.targeted
    false_alarms = sum(1 for d in detections if d["vehicle"] not in targeted)
    if isolation and not any(a.channel is Channel.V2I for a in config.attacks):
        false_alarms += 1

    hf = log.h[:, 1:]
    per_vehicle = {str(i): _r(log.h[:, i].min()) for i in followers}
    if hf.size:
        flat = int(np.argmin(hf))
        r, c = divmod(flat, hf.shape[1])
        min_headway = {"value": _r(hf[r, c]), "vehicle": c + 1, "time": _r(t[r]), "per_vehicle": per_vehicle}
    else:
        min_headway = {"value": None, "vehicle": None, "time": None, "per_vehicle": {}}

    collisions = _onsets(log.h <= 0.0, t, followers)

    T = np.zeros_like(log.h)
    s = np.zeros_like(log.h)
    for m, p in config.modes.items():
        sel = log.mode == m
        T[sel] = p.time_headway
        s[sel] = p.standstill
    desired = T * log.v + s
    disengaged = log.h > config.disengage_factor * desired
    disengagements = _onsets(disengaged, t, followers)

    window = max(1, int(round(5.0 / config.dt)))
    onset_t = min((a.start for a in config.attacks), default=None)
    velocity = {"final_mean": _r(log.v[-window:].mean()) if log.n_rows else None}
    if onset_t is not None and log.n_rows:
        r0 = min(int(np.searchsorted(t, onset_t - 1e-9)), log.n_rows - 1)
        velocity["onset_mean"] = _r(log.v[r0].mean())
    else:
        velocity["onset_mean"] = None

    return SummaryReport(detection, detections, isolation, int(false_alarms), min_headway,
                         collisions, disengagements, velocity, bool(log.aborted))
