"""Vehicle and mode types, system matrices and single-vehicle closed-loop dynamics.

Each follower carries the augmented state ``chi = [h, v, a, u]`` (headway,
velocity, acceleration, commanded input) and evolves as

    d chi / dt = A chi + D chi_pre - S s + w

where ``A``, ``D`` and ``S`` depend on the operating mode. The fourth row of
``A``/``D`` encodes a constant time-gap CACC law

    du/dt = (1/T) [k1 e + k2 de/dt + k3 (a_pre - a) + phi u_pre - u]

with spacing error ``e = h - T v - s`` and ``de/dt = v_pre - v - T a``, so
``h = T v + s`` with matching velocities is an equilibrium.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from platoonsec.comms import V2VPayload

STATE_DIM = 4
HEADWAY, VELOCITY, ACCEL, CONTROL = range(STATE_DIM)

# both headway and velocity are measured
C_MATRIX = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])


class ParameterError(ValueError):
    """Invalid mode or vehicle parameters."""


class UnstableModeError(ParameterError):
    """A mode whose closed-loop matrix is not Hurwitz."""


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModeParams:
    """Controller constants for one operating mode.

    ``law="canonical"`` builds the fourth matrix row from the time-gap CACC
    law in the module docstring. ``law="literal"`` places ``k1, k2, k3, ku``
    verbatim in that row; it exists so configs can express (and the
    validator can reject) that reading of the gain triple.
    """

    mode_id: int
    k1: float
    k2: float
    k3: float
    time_headway: float
    name: str = ""
    standstill: float = 2.0
    engine_lag: float = 0.1
    v_max: float = math.inf
    law: str = "canonical"
    literal_ku: float = -1.0

    def __post_init__(self):
        label = self.name or f"mode {self.mode_id}"
        if not self.time_headway > 0:
            raise ParameterError(f"{label}: time_headway must be positive")
        if not self.engine_lag > 0:
            raise ParameterError(f"{label}: engine_lag must be positive")
        if self.standstill < 0:
            raise ParameterError(f"{label}: standstill must be non-negative")
        if not self.v_max > 0:
            raise ParameterError(f"{label}: v_max must be positive")
        if self.law not in ("canonical", "literal"):
            raise ParameterError(f"{label}: unknown law {self.law!r}")
        for k in ("k1", "k2", "k3", "time_headway", "engine_lag", "standstill"):
            if not math.isfinite(getattr(self, k)):
                raise ParameterError(f"{label}: {k} must be finite")

    @property
    def label(self) -> str:
        return self.name or f"mode {self.mode_id}"

    @property
    def ku(self) -> float:
        if self.law == "literal":
            return self.literal_ku
        return -1.0 / self.time_headway

    @property
    def kbar2(self) -> float:
        if self.law == "literal":
            return self.k2
        return self.k2 / self.time_headway

    @property
    def kbar3(self) -> float:
        if self.law == "literal":
            return self.k3
        return self.k3 / self.time_headway

    def desired_headway(self, velocity):
        return self.time_headway * velocity + self.standstill


@dataclass(frozen=True)
class SystemMatrices:
    A: np.ndarray
    D: np.ndarray
    S: np.ndarray
    C: np.ndarray = field(default_factory=lambda: C_MATRIX.copy())


@dataclass(frozen=True)
class VehicleState:
    headway: float
    velocity: float
    acceleration: float = 0.0
    control_input: float = 0.0
    position: float = 0.0

    @property
    def chi(self) -> np.ndarray:
        return np.array([self.headway, self.velocity, self.acceleration, self.control_input])

    @classmethod
    def from_chi(cls, chi, position: float = 0.0) -> "VehicleState":
        h, v, a, u = (float(c) for c in chi)
        return cls(h, v, a, u, float(position))


@dataclass(frozen=True)
class Measurement:
    headway: float
    velocity: float
    timestamp: float

    @property
    def y(self) -> np.ndarray:
        return np.array([self.headway, self.velocity])


def state_matrix(params: ModeParams) -> np.ndarray:
    T, lag = params.time_headway, params.engine_lag
    A = np.zeros((STATE_DIM, STATE_DIM))
    A[HEADWAY, VELOCITY] = -1.0
    A[VELOCITY, ACCEL] = 1.0
    A[ACCEL, ACCEL] = -1.0 / lag
    A[ACCEL, CONTROL] = 1.0 / lag
    if params.law == "literal":
        A[CONTROL] = [params.k1, params.k2, params.k3, params.ku]
    else:
        k1, k2, k3 = params.k1, params.k2, params.k3
        A[CONTROL] = [k1 / T, -(k1 * T + k2) / T, -(k2 * T + k3) / T, -1.0 / T]
    return A


def build_matrices(params: ModeParams, v2v_active: bool = True) -> SystemMatrices:
    """Assemble ``A``, ``D``, ``S`` and ``C`` for one mode.

    Only ``D[3, 3]`` (the wireless feed-forward of the predecessor's input)
    depends on ``v2v_active``.
    """
    A = state_matrix(params)
    D = np.zeros((STATE_DIM, STATE_DIM))
    D[HEADWAY, VELOCITY] = 1.0
    D[CONTROL, VELOCITY] = params.kbar2
    D[CONTROL, ACCEL] = params.kbar3
    D[CONTROL, CONTROL] = (1.0 / params.time_headway) if v2v_active else 0.0
    S = np.zeros(STATE_DIM)
    # the standstill enters through the spacing error, hence the same 1/T scale as k1
    S[CONTROL] = params.k1 / params.time_headway if params.law == "canonical" else params.k1
    return SystemMatrices(A=A, D=D, S=S)


def spectral_abscissa(M: np.ndarray) -> float:
    try:
        eig = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigenvalue solver failed: {exc}") from exc
    return float(np.max(eig.real))


def closed_loop_eigencheck(params: ModeParams) -> float:
    """Spectral abscissa of the single-vehicle closed-loop matrix."""
    return spectral_abscissa(state_matrix(params))


def require_stable(params: ModeParams) -> float:
    abscissa = closed_loop_eigencheck(params)
    if not abscissa < 0:
        raise UnstableModeError(
            f"{params.label}: closed-loop spectral abscissa {abscissa:.4g} is not negative"
        )
    return abscissa


def feedforward_vector(received: "V2VPayload", pred_true_velocity: float, pred_true_acceleration: float):
    """Predecessor vector that multiplies the fourth row of ``D``.

    Without a V2V link the onboard sensors still provide the predecessor's
    velocity and acceleration; the input ``u_pre`` is lost (and gated out by
    ``D[3, 3] = 0`` anyway).
    """
    if received.link_active:
        return np.array([0.0, received.pred_velocity, received.pred_acceleration, received.pred_control])
    return np.array([0.0, pred_true_velocity, pred_true_acceleration, 0.0])


GOVERNOR_GAIN = 0.5
GOVERNOR_DECEL = 2.0


def governed_input(u, v, v_max, gain: float = GOVERNOR_GAIN, decel: float = GOVERNOR_DECEL):
    """Commanded input after the speed governor.

    Applied to the controller state itself, so the value broadcast over V2V
    is the one the drivetrain receives. Below ``v_max`` it only trims the
    input so the vehicle eases into the cap. Above it, the vehicle brakes at
    no more than ``decel``.
    """
    ceiling = np.maximum(gain * (np.asarray(v_max, dtype=float) - v), -decel)
    return np.minimum(u, ceiling)


def closed_loop_rhs(chi, pred_velocity, ff, A, D, S, standstill):
    """Vectorised right-hand side; every argument may carry a leading batch axis.

    ``pred_velocity`` feeds the kinematic headway row and ``ff`` (a 4-vector
    per vehicle) the controller row.
    """
    chi = np.asarray(chi, dtype=float)
    deriv = np.einsum("...ij,...j->...i", A, chi)
    deriv = deriv - S * np.asarray(standstill)[..., None]
    deriv[..., HEADWAY] += pred_velocity
    deriv[..., CONTROL] += np.einsum("...j,...j->...", D[..., CONTROL, :], ff)
    return deriv


def vehicle_derivative(
    state: VehicleState,
    received: "V2VPayload",
    pred_true_velocity: float,
    matrices: SystemMatrices,
    params: ModeParams,
    noise=None,
    pred_true_acceleration: float = 0.0,
) -> np.ndarray:
    """Time derivative of ``chi`` for one follower.

    The headway row always uses the predecessor's physical velocity; the
    controller row uses whatever arrived over V2V.
    """
    ff = feedforward_vector(received, pred_true_velocity, pred_true_acceleration)
    D = matrices.D
    if not received.link_active and D[CONTROL, CONTROL] != 0.0:
        D = D.copy()
        D[CONTROL, CONTROL] = 0.0
    deriv = closed_loop_rhs(state.chi, pred_true_velocity, ff, matrices.A, D, matrices.S, params.standstill)
    if noise is not None:
        deriv = deriv + np.asarray(noise, dtype=float)
    return deriv


def step_euler(
    state: VehicleState,
    deriv,
    dt: float = 0.05,
    ring_length: float = 600.0,
    v_max: float = math.inf,
) -> VehicleState:
    """One explicit Euler step.

    Velocity is clamped at 0, the input passes the speed governor and the
    position advances with the pre-step velocity.
    """
    chi = state.chi + dt * np.asarray(deriv, dtype=float)
    chi[VELOCITY] = max(chi[VELOCITY], 0.0)
    if math.isfinite(v_max):
        chi[CONTROL] = float(governed_input(chi[CONTROL], chi[VELOCITY], v_max))
    position = (state.position + state.velocity * dt) % ring_length
    return VehicleState.from_chi(chi, position)


def euler_chi(chi, deriv, dt):
    """Batched counterpart of :func:`step_euler` on raw state arrays."""
    out = chi + dt * deriv
    out[..., VELOCITY] = np.maximum(out[..., VELOCITY], 0.0)
    return out
