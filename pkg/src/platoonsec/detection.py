"""Switched-mode detector / isolator banks, residuals and flag logic.

Every follower ``i`` has a detector that integrates the trusted-mode model
driven only by its own measurements and by the predecessor's *estimate*,

    d chi_hat_i/dt = A chi_hat_i + D chi_hat_{i-1} - S s + L (y_i - C chi_hat_i)

and, once that detector has flagged, an isolator ``psi_hat_i`` that also
consumes the V2V payload the vehicle actually received, so V2V corruption is
reproduced inside the isolator and only a V2I (mode) corruption excites its
residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from platoonsec.comms import V2VPayload
from platoonsec.model import (
    C_MATRIX,
    CONTROL,
    HEADWAY,
    ModeParams,
    SystemMatrices,
    build_matrices,
    closed_loop_rhs,
    euler_chi,
    feedforward_vector,
    spectral_abscissa,
)

DEFAULT_WINDOW = 20


class GainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ObserverGains:
    """Detector gain ``L`` and isolator gain ``M``, both 4 x 2 (headway, velocity columns)."""

    mode_id: int
    L: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        for name in ("L", "M"):
            g = np.array(getattr(self, name), dtype=float)
            if g.shape != (4, 2):
                raise GainError(f"mode {self.mode_id}: {name} must be 4x2, got {g.shape}")
            if not np.all(np.isfinite(g)):
                raise GainError(f"mode {self.mode_id}: {name} has non-finite entries")
            g.setflags(write=False)
            object.__setattr__(self, name, g)

    @classmethod
    def from_channel_rows(cls, mode_id: int, L_rows, M_rows=None) -> "ObserverGains":
        """Build from 2 x 4 arrays whose rows are the headway and velocity channels."""
        L = np.asarray(L_rows, dtype=float).T
        M = L if M_rows is None else np.asarray(M_rows, dtype=float).T
        return cls(mode_id, L, M)

    def error_abscissae(self, params: ModeParams) -> tuple:
        A = build_matrices(params).A
        return (
            spectral_abscissa(A - self.L @ C_MATRIX),
            spectral_abscissa(A - self.M @ C_MATRIX),
        )

    def require_stable(self, params: ModeParams):
        lab = params.label
        for name, val in zip(("A - LC", "A - MC"), self.error_abscissae(params)):
            if not val < 0:
                raise GainError(f"{lab}: observer error matrix {name} has spectral abscissa {val:.4g}")


@dataclass(frozen=True)
class ThresholdConfig:
    """``levels`` maps mode id to ``(J_DS [m^2], J_IS [m])``; ``window`` is in samples."""

    levels: Mapping[int, tuple]
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least one sample")
        for mode, (j_ds, j_is) in self.levels.items():
            if not (j_ds > 0 and j_is > 0):
                raise ValueError(f"thresholds for mode {mode} must be positive")

    def j_ds(self, mode: int) -> float:
        return float(self.levels[mode][0])

    def j_is(self, mode: int) -> float:
        return float(self.levels[mode][1])


@dataclass(frozen=True, eq=False)
class DetectorState:
    chi_hat: np.ndarray
    window: tuple = ()
    window_size: int = DEFAULT_WINDOW
    innovation: float = 0.0

    @property
    def energy(self) -> float:
        return float(sum(self.window))


@dataclass(frozen=True, eq=False)
class IsolatorState:
    psi_hat: np.ndarray = field(default_factory=lambda: np.zeros(4))
    active: bool = False
    activation_time: Optional[float] = None
    gamma: float = 0.0


@dataclass(frozen=True)
class DecisionState:
    """Latching flags. ``v2x`` maps vehicle id to its detection time."""

    v2x: Mapping[int, float] = field(default_factory=dict)
    v2i_time: Optional[float] = None
    v2i_vehicle: Optional[int] = None
    newly_flagged: tuple = ()

    @property
    def compromised(self) -> list:
        return sorted(self.v2x, key=lambda i: (self.v2x[i], i))

    @property
    def v2i_flag(self) -> bool:
        return self.v2i_time is not None


def observer_rhs(est, pred_velocity, ff, y, A, D, S, standstill, gain):
    """Model right-hand side plus output injection ``gain (y - C est)``."""
    est = np.asarray(est, dtype=float)
    deriv = closed_loop_rhs(est, pred_velocity, ff, A, D, S, standstill)
    innov = np.asarray(y, dtype=float) - est[..., :2]
    return deriv + np.einsum("...ij,...j->...i", gain, innov)


def _pred_vector(pred) -> np.ndarray:
    if isinstance(pred, DetectorState):
        return np.asarray(pred.chi_hat, dtype=float)
    if hasattr(pred, "chi"):
        return pred.chi
    return np.asarray(pred, dtype=float)


def _y(y) -> np.ndarray:
    return y.y if hasattr(y, "y") else np.asarray(y, dtype=float)


def detector_step(
    state: DetectorState,
    pred_state,
    y,
    mode: int,
    gains: ObserverGains,
    params: ModeParams,
    dt: float = 0.05,
    matrices: Optional[SystemMatrices] = None,
) -> DetectorState:
    """Record the headway innovation at the current sample, then advance one Euler step.

    ``pred_state`` is the predecessor's detector estimate (or, for vehicle
    1, the leader's true state). The model always runs with the V2V link
    assumed healthy.
    """
    if gains.mode_id != mode or params.mode_id != mode:
        raise ContractError(f"gains/params do not belong to trusted mode {mode}")
    mats = matrices or build_matrices(params)
    pred = _pred_vector(pred_state)
    yv = _y(y)
    e = float(yv[0] - state.chi_hat[HEADWAY])
    window = (state.window + (e * e,))[-state.window_size:]
    deriv = observer_rhs(state.chi_hat, pred[1], pred, yv, mats.A, mats.D, mats.S, params.standstill, gains.L)
    chi_next = euler_chi(np.array(state.chi_hat, dtype=float), deriv, dt)
    return DetectorState(chi_next, window, state.window_size, e)


def activate_isolator(detector: DetectorState, t: float) -> IsolatorState:
    """Isolator initial condition at detection time: a copy of the detector estimate."""
    return IsolatorState(np.array(detector.chi_hat, dtype=float), True, t, 0.0)


def isolator_step(
    state: IsolatorState,
    pred_estimate,
    y,
    received: V2VPayload,
    mode: int,
    gains: ObserverGains,
    params: ModeParams,
    dt: float = 0.05,
    matrices: Optional[SystemMatrices] = None,
) -> IsolatorState:
    """Evaluate ``gamma`` at the current sample and advance ``psi_hat`` one step.

    The headway row uses ``pred_estimate``'s velocity; the controller row uses
    the payload the vehicle received (falling back to the estimate when the
    link is down).
    """
    if not state.active:
        raise ContractError("isolator_step called on an inactive isolator")
    if gains.mode_id != mode or params.mode_id != mode:
        raise ContractError(f"gains/params do not belong to trusted mode {mode}")
    mats = matrices or build_matrices(params, v2v_active=received.link_active)
    pred = _pred_vector(pred_estimate)
    yv = _y(y)
    gamma = is_residual(yv, state.psi_hat[HEADWAY])
    ff = feedforward_vector(received, pred[1], pred[2])
    D = mats.D
    if not received.link_active and D[CONTROL, CONTROL] != 0.0:
        D = build_matrices(params, v2v_active=False).D
    deriv = observer_rhs(state.psi_hat, pred[1], ff, yv, mats.A, D, mats.S, params.standstill, gains.M)
    psi_next = euler_chi(np.array(state.psi_hat, dtype=float), deriv, dt)
    return replace(state, psi_hat=psi_next, gamma=gamma)


def ds_residual(own_window: Sequence[float], pred_window: Sequence[float]) -> float:
    """Clamped difference of windowed squared headway-error energy."""
    return max(0.0, float(np.sum(own_window)) - float(np.sum(pred_window)))


def is_residual(y, H_hat: float) -> float:
    """Headway-channel isolator residual ``y_h - H_hat``."""
    yv = y.y if hasattr(y, "y") else np.atleast_1d(np.asarray(y, dtype=float))
    return float(yv[0] - H_hat)


def decide(
    rc: Mapping[int, float],
    gamma: Mapping[int, float],
    thresholds: ThresholdConfig,
    mode: int,
    decisions: DecisionState,
    t: float,
) -> DecisionState:
    """One pass of the detection / isolation decision.

    ``rc`` holds the detector residual of every follower and ``gamma`` the
    isolator residual of every *active* isolator. Newly flagged vehicles are
    listed in ``newly_flagged`` so the caller can start their isolators.
    """
    j_ds, j_is = thresholds.j_ds(mode), thresholds.j_is(mode)
    v2x = dict(decisions.v2x)
    new = []
    for i in sorted(rc):
        if i not in v2x and rc[i] >= j_ds:
            v2x[i] = t
            new.append(i)
    v2i_time, v2i_vehicle = decisions.v2i_time, decisions.v2i_vehicle
    if v2i_time is None:
        for i in sorted(gamma):
            g = gamma[i]
            if i in v2x and math.isfinite(g) and abs(g) >= j_is:
                v2i_time, v2i_vehicle = t, i
                break
    return DecisionState(v2x, v2i_time, v2i_vehicle, tuple(new))


class ObserverBank:
    """Vectorised detectors and isolators for followers ``1..n``.

    Arrays are indexed by vehicle with row 0 reserved for the leader, whose
    "estimate" is its true state.
    """

    def __init__(self, n_followers: int, window: int = DEFAULT_WINDOW):
        N = n_followers + 1
        self.n = n_followers
        self.window = window
        self.chi_hat = np.zeros((N, 4))
        self.psi_hat = np.zeros((N, 4))
        self.active = np.zeros(N, dtype=bool)
        self.activation_time = np.full(N, np.nan)
        self._err2 = np.zeros((window, N))
        self._slot = 0

    def reset(self, chi_hat0):
        self.chi_hat[:] = chi_hat0
        self.psi_hat[:] = 0.0
        self.active[:] = False
        self._err2[:] = 0.0
        self._slot = 0

    def record(self, y_headway, leader_chi):
        """Push the current headway innovations; returns ``(errors, r_c, gamma)``."""
        self.chi_hat[0] = leader_chi
        err = y_headway - self.chi_hat[:, HEADWAY]
        err[0] = 0.0
        self._err2[self._slot] = err * err
        self._slot = (self._slot + 1) % self.window
        energy = self._err2.sum(axis=0)
        rc = np.zeros_like(energy)
        rc[1:] = np.maximum(0.0, energy[1:] - energy[:-1])
        gamma = np.where(self.active, y_headway - self.psi_hat[:, HEADWAY], 0.0)
        gamma[0] = 0.0
        return err, rc, gamma

    def activate(self, vehicles, t):
        for i in vehicles:
            self.psi_hat[i] = self.chi_hat[i]
            self.active[i] = True
            self.activation_time[i] = t

    def advance(self, y, leader_chi, mats: SystemMatrices, gains: ObserverGains, params: ModeParams,
                ff_rx, link_rx, dt):
        """Advance all detectors and active isolators by one Euler step.

        ``y`` is ``(N, 2)``; ``ff_rx`` is the ``(N, 4)`` feed-forward vector each
        vehicle received and ``link_rx`` its link flag. ``mats.A``/``mats.D`` may
        be pre-broadcast to ``(n, 4, 4)`` so the arithmetic matches the plant's.
        """
        chi = self.chi_hat
        chi[0] = leader_chi
        pred = chi[:-1]
        own = chi[1:]
        yf = y[1:]
        d = observer_rhs(own, pred[:, 1], pred, yf, mats.A, mats.D, mats.S, params.standstill, gains.L)
        new_chi = euler_chi(own.copy(), d, dt)

        if self.active.any():
            idx = np.flatnonzero(self.active)
            psi = self.psi_hat[idx]
            # isolator predecessor: its isolator if running, else its detector
            pred_idx = idx - 1
            pred_est = np.where(self.active[pred_idx][:, None], self.psi_hat[pred_idx], chi[pred_idx])
            pred_est[pred_idx == 0] = leader_chi
            link = link_rx[idx]
            ff = np.where(link[:, None], ff_rx[idx], np.column_stack([
                np.zeros(idx.size), pred_est[:, 1], pred_est[:, 2], np.zeros(idx.size)]))
            A = mats.A[idx - 1] if mats.A.ndim == 3 else mats.A
            D = mats.D[idx - 1] if mats.D.ndim == 3 else mats.D
            D = np.broadcast_to(D, (idx.size, 4, 4)).copy()
            D[~link, CONTROL, CONTROL] = 0.0
            dpsi = observer_rhs(psi, pred_est[:, 1], ff, y[idx], A, D, mats.S, params.standstill, gains.M)
            self.psi_hat[idx] = euler_chi(psi.copy(), dpsi, dt)

        self.chi_hat[1:] = new_chi


@dataclass(frozen=True)
class ThresholdCalibration:
    """Calibrated thresholds plus the nominal maxima they came from.

    ``maxima`` maps mode id to ``(max r_c, max |gamma|)``; ``defaults_clear``
    says, per mode, whether the reference thresholds sit strictly above them.
    """

    thresholds: ThresholdConfig
    maxima: Mapping[int, tuple]
    defaults_clear: Mapping[int, bool]


def calibrate_thresholds(
    nominal_log,
    margin: float = 1.25,
    floor: float = 1e-3,
    reference: Optional[Mapping[int, tuple]] = None,
    window: int = DEFAULT_WINDOW,
) -> ThresholdCalibration:
    """Thresholds at ``margin`` times the largest residual of an attack-free log.

    Maxima are grouped by each follower's executed mode. The isolator maxima
    are only meaningful if the run kept isolators active (diagnostic mode);
    otherwise they are 0 and the floor applies. ``reference`` defaults to the
    shipped thresholds.
    """
    if not margin >= 1.0:
        raise CalibrationError("margin must be at least 1")
    if not floor > 0:
        raise CalibrationError("floor must be positive")
    if np.any(nominal_log.v2x_flag) or np.any(nominal_log.v2i_flag):
        raise CalibrationError("log contains attack flags; calibrate on an attack-free run")
    if reference is None:
        from platoonsec.presets import THRESHOLDS as reference
    modes = nominal_log.mode[:, 1:]
    rc = nominal_log.rc[:, 1:]
    gamma = np.abs(nominal_log.gamma[:, 1:])
    levels, maxima, clear = {}, {}, {}
    for m in sorted(int(x) for x in np.unique(modes)):
        sel = modes == m
        max_rc, max_gamma = float(rc[sel].max()), float(gamma[sel].max())
        maxima[m] = (max_rc, max_gamma)
        levels[m] = (max(margin * max_rc, floor), max(margin * max_gamma, floor))
        if m in reference:
            j_ds, j_is = reference[m]
            clear[m] = bool(j_ds > max_rc and j_is > max_gamma)
    return ThresholdCalibration(ThresholdConfig(levels, window), maxima, clear)
