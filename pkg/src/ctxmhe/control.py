from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import lu_factor, lu_solve

from .dynamics import E3, Disturbance, QuadParams, RigidBodyState, hat, motor_mixing_matrix, vee

DEGENERATE_FORCE_NORM = 1e-9


class DegenerateReferenceError(ValueError):
    """The desired thrust direction (or heading) is undefined."""


@dataclass(frozen=True)
class ControlGains:
    """Positive gains of the geometric controller, plus the rotor thrust limits."""

    k_x: float = 0.4
    k_v: float = 0.2
    k_R: float = 1e-3
    k_Omega: float = 2e-4
    motor_min: float = 0.0
    motor_max: float = 0.15

    def __post_init__(self):
        for name in ("k_x", "k_v", "k_R", "k_Omega"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")
        if self.motor_min < 0.0 or self.motor_max <= self.motor_min:
            raise ValueError("motor limits must satisfy 0 <= motor_min < motor_max")


@dataclass(frozen=True)
class ReferencePoint:
    """Setpoint of the tracking controller.

    ``omega_d`` and ``omega_dot_d`` are the desired body rate and its
    derivative; setpoint streams that do not provide them leave them at zero.
    """

    x_d: NDArray
    v_d: NDArray = field(default_factory=lambda: np.zeros(3))
    a_d: NDArray = field(default_factory=lambda: np.zeros(3))
    yaw_d: float = 0.0
    omega_d: NDArray = field(default_factory=lambda: np.zeros(3))
    omega_dot_d: NDArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("x_d", "v_d", "a_d", "omega_d", "omega_dot_d"):
            value = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, value)
        if not np.isfinite(self.yaw_d):
            raise ValueError("yaw_d must be finite")

    @classmethod
    def hold(cls, position) -> "ReferencePoint":
        return cls(x_d=np.asarray(position, dtype=float))


@dataclass(frozen=True)
class ThrustMoment:
    """Collective thrust f (N) and body moment M (N m)."""

    f: float
    M: NDArray

    def __post_init__(self):
        object.__setattr__(self, "M", np.asarray(self.M, dtype=float).reshape(3))
        if not (np.isfinite(self.f) and np.all(np.isfinite(self.M))):
            raise ValueError("thrust and moment must be finite")

    @property
    def vector(self) -> NDArray:
        return np.concatenate([[self.f], self.M])


def desired_attitude(force: NDArray, yaw_d: float) -> NDArray:
    """Builds R_c with b3 along the desired force and b1 from the heading."""
    norm = np.linalg.norm(force)
    if norm < DEGENERATE_FORCE_NORM:
        raise DegenerateReferenceError(f"desired force norm {norm:.3e} is below {DEGENERATE_FORCE_NORM}")
    b3 = force / norm
    b1_d = np.array([np.cos(yaw_d), np.sin(yaw_d), 0.0])
    b2 = np.cross(b3, b1_d)
    b2_norm = np.linalg.norm(b2)
    if b2_norm < DEGENERATE_FORCE_NORM:
        raise DegenerateReferenceError("desired heading is parallel to the thrust direction")
    b2 = b2 / b2_norm
    b1 = np.cross(b2, b3)
    return np.column_stack([b1, b2, b3])


def lee_control(
    state: RigidBodyState,
    ref: ReferencePoint,
    gains: ControlGains,
    params: QuadParams,
    dist_estimate: Disturbance,
) -> ThrustMoment:
    """Disturbance-aware geometric tracking controller on SE(3).

    The world frame is z-up with gravity along -e3, so the translational law
    reads f = (-k_x e_x - k_v e_v + m g e3 + m a_d - F_dist) . R e3; the
    estimated torque is subtracted from the attitude moment.

    Args:
        state: Current (estimated) state; R and Omega are used as given.
        ref: Position setpoint with feed-forward velocity and acceleration.
        gains: Controller gains.
        params: Vehicle constants.
        dist_estimate: Estimated wind force and torque. Pass
            :meth:`Disturbance.zero` for the disturbance-unaware controller.

    Returns:
        Collective thrust and body moment.

    Raises:
        DegenerateReferenceError: If the desired force vanishes.
    """
    R, Omega = state.R, state.Omega
    inertia = params.J

    e_x = state.p - ref.x_d
    e_v = state.v - ref.v_d
    force = (
        -gains.k_x * e_x
        - gains.k_v * e_v
        + params.mass * params.gravity * E3
        + params.mass * ref.a_d
        - dist_estimate.force
    )
    R_c = desired_attitude(force, ref.yaw_d)
    f = float(force @ (R @ E3))

    e_R = 0.5 * vee(R_c.T @ R - R.T @ R_c)
    transported = R.T @ R_c
    e_Omega = Omega - transported @ ref.omega_d
    M = (
        -gains.k_R * e_R
        - gains.k_Omega * e_Omega
        + np.cross(Omega, inertia @ Omega)
        - inertia @ (hat(Omega) @ transported @ ref.omega_d - transported @ ref.omega_dot_d)
        - dist_estimate.torque
    )
    return ThrustMoment(f=f, M=M)


class MotorMixer:
    """Inverts the rotor mixing map; rejects singular geometries at construction."""

    def __init__(self, params: QuadParams):
        self.params = params
        self.matrix = motor_mixing_matrix(params)
        if abs(np.linalg.det(self.matrix)) < 1e-15:
            raise ValueError("motor mixing matrix is singular")
        self._lu = lu_factor(self.matrix)

    def mix(self, tm: ThrustMoment) -> NDArray:
        """Rotor thrusts that realise (f, M) exactly."""
        return lu_solve(self._lu, tm.vector)

    def unmix(self, thrusts: NDArray) -> ThrustMoment:
        wrench = self.matrix @ np.asarray(thrusts, dtype=float)
        return ThrustMoment(f=float(wrench[0]), M=wrench[1:])


@lru_cache(maxsize=16)
def _mixer(params: QuadParams) -> MotorMixer:
    return MotorMixer(params)


def mix_motors(tm: ThrustMoment, params: QuadParams) -> NDArray:
    """Solves the 4x4 mixing system for the four rotor thrusts."""
    return _mixer(params).mix(tm)


def saturate(thrusts: NDArray, gains: ControlGains) -> NDArray:
    """Clips rotor thrusts to the physical range."""
    return np.clip(thrusts, gains.motor_min, gains.motor_max)


def unmix_motors(thrusts: NDArray, params: QuadParams) -> ThrustMoment:
    """Thrust and moment produced by four rotor thrusts."""
    return _mixer(params).unmix(thrusts)
