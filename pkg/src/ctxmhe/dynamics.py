from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import expm

E3 = np.array([0.0, 0.0, 1.0])
ORTHONORMAL_TOL = 1e-9
MAX_DT = 0.1


def hat(omega: NDArray) -> NDArray:
    """Maps a 3-vector to its skew-symmetric matrix, so that hat(a) @ b = a x b."""
    wx, wy, wz = omega
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def vee(matrix: NDArray) -> NDArray:
    """Inverse of :func:`hat` for skew-symmetric matrices."""
    return np.array([matrix[2, 1], matrix[0, 2], matrix[1, 0]])


def so3_exp(phi: NDArray) -> NDArray:
    """Exponential map from a rotation vector to SO(3)."""
    return expm(hat(phi))


def project_to_so3(matrix: NDArray) -> NDArray:
    """Closest rotation matrix in the Frobenius norm (SVD re-projection)."""
    u, _, vt = np.linalg.svd(matrix)
    rotation = u @ vt
    if np.linalg.det(rotation) < 0.0:
        u[:, -1] *= -1.0
        rotation = u @ vt
    return rotation


def _require_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise ValueError(f"{name} contains non-finite entries: {value}")


@dataclass(frozen=True)
class QuadParams:
    """Physical constants of the quadrotor.

    Attributes:
        mass: Vehicle mass m in kg.
        inertia: Diagonal of the inertia matrix J in kg m^2.
        arm_length: Distance d from each rotor to the center in m.
        c_tau: Thrust-to-torque ratio of the rotors.
        gravity: Gravitational acceleration g in m/s^2.
    """

    mass: float = 0.033
    inertia: tuple[float, float, float] = (1.66e-5, 1.66e-5, 2.93e-5)
    arm_length: float = 0.0397
    c_tau: float = 0.005
    gravity: float = 9.81

    def __post_init__(self):
        object.__setattr__(self, "inertia", tuple(float(j) for j in self.inertia))
        if len(self.inertia) != 3:
            raise ValueError("inertia must hold the three diagonal entries of J")
        if self.mass <= 0.0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if min(self.inertia) <= 0.0:
            raise ValueError(f"inertia diagonal must be positive, got {self.inertia}")
        if self.arm_length <= 0.0:
            raise ValueError(f"arm_length must be positive, got {self.arm_length}")
        if self.c_tau <= 0.0:
            raise ValueError(f"c_tau must be positive, got {self.c_tau}")
        if self.gravity <= 0.0:
            raise ValueError(f"gravity must be positive, got {self.gravity}")

    @property
    def J(self) -> NDArray:
        return np.diag(self.inertia)

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.gravity


@dataclass(frozen=True)
class RigidBodyState:
    """Pose and twist of the quadrotor.

    Attributes:
        p: Position in the world frame (m).
        v: Velocity in the world frame (m/s).
        R: Attitude as a body-to-world rotation matrix.
        Omega: Angular velocity in the body frame (rad/s).
    """

    p: NDArray = field(default_factory=lambda: np.zeros(3))
    v: NDArray = field(default_factory=lambda: np.zeros(3))
    R: NDArray = field(default_factory=lambda: np.eye(3))
    Omega: NDArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("p", "v", "Omega"):
            value = np.asarray(getattr(self, name), dtype=float).reshape(3)
            object.__setattr__(self, name, value)
        rotation = np.asarray(self.R, dtype=float).reshape(3, 3)
        object.__setattr__(self, "R", rotation)
        _require_finite("state", np.concatenate([self.p, self.v, self.Omega, rotation.ravel()]))
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("R is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("R is not a proper rotation")

    @classmethod
    def at_rest(cls, position) -> "RigidBodyState":
        return cls(p=np.asarray(position, dtype=float))

    def with_translation(self, p: NDArray, v: NDArray) -> "RigidBodyState":
        """Copy of this state with position and velocity replaced (e.g. by estimates)."""
        return RigidBodyState(p=p, v=v, R=self.R, Omega=self.Omega)


@dataclass(frozen=True)
class Disturbance:
    """Additive wind force (world frame, N) and torque (body frame, N m)."""

    force: NDArray = field(default_factory=lambda: np.zeros(3))
    torque: NDArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "force", np.asarray(self.force, dtype=float).reshape(3))
        object.__setattr__(self, "torque", np.asarray(self.torque, dtype=float).reshape(3))
        _require_finite("disturbance", np.concatenate([self.force, self.torque]))

    @classmethod
    def zero(cls) -> "Disturbance":
        return cls()


@dataclass(frozen=True)
class Measurement:
    """Measured position and velocity, y = (p, v) + noise."""

    y: NDArray
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).reshape(6))
        _require_finite("measurement", self.y)

    @property
    def position(self) -> NDArray:
        return self.y[:3]

    @property
    def velocity(self) -> NDArray:
        return self.y[3:]


def motor_mixing_matrix(params: QuadParams) -> NDArray:
    """The 4x4 map from rotor thrusts to (f, M1, M2, M3)."""
    d, c = params.arm_length, params.c_tau
    return np.array(
        [
            [1.0, 1.0, 1.0, 1.0],
            [0.0, -d, 0.0, d],
            [d, 0.0, -d, 0.0],
            [-c, c, -c, c],
        ]
    )


def _derivatives(R, v, Omega, thrust, moment, disturbance, params):
    inertia = params.J
    v_dot = -params.gravity * E3 + (thrust * (R @ E3) + disturbance.force) / params.mass
    omega_dot = np.linalg.solve(
        inertia, moment - np.cross(Omega, inertia @ Omega) + disturbance.torque
    )
    return v_dot, omega_dot


def step_dynamics(
    state: RigidBodyState,
    motor_thrusts: NDArray,
    disturbance: Disturbance,
    params: QuadParams,
    dt: float,
) -> RigidBodyState:
    """Advances the rigid body by one step of length dt.

    Newton-Euler dynamics are integrated with a classical RK4 scheme in which
    the attitude stages are propagated through the SO(3) exponential map; the
    final attitude is re-projected onto SO(3).

    Args:
        state: Current state.
        motor_thrusts: Four rotor thrusts in N, held constant over the step.
        disturbance: Wind force and torque, held constant over the step.
        params: Vehicle constants.
        dt: Step length in s, within (0, 0.1].

    Returns:
        The state after dt.
    """
    motor_thrusts = np.asarray(motor_thrusts, dtype=float).reshape(4)
    _require_finite("motor_thrusts", motor_thrusts)
    if not np.isfinite(dt) or dt <= 0.0 or dt > MAX_DT:
        raise ValueError(f"dt must lie in (0, {MAX_DT}], got {dt}")
    if np.any(motor_thrusts < 0.0):
        raise ValueError(f"motor thrusts must be non-negative, got {motor_thrusts}")

    wrench = motor_mixing_matrix(params) @ motor_thrusts
    thrust, moment = wrench[0], wrench[1:]

    p0, v0, R0, w0 = state.p, state.v, state.R, state.Omega

    def stage(R, v, w):
        v_dot, w_dot = _derivatives(R, v, w, thrust, moment, disturbance, params)
        return v, v_dot, w, w_dot

    k1 = stage(R0, v0, w0)
    R2 = R0 @ so3_exp(0.5 * dt * k1[2])
    k2 = stage(R2, v0 + 0.5 * dt * k1[1], w0 + 0.5 * dt * k1[3])
    R3 = R0 @ so3_exp(0.5 * dt * k2[2])
    k3 = stage(R3, v0 + 0.5 * dt * k2[1], w0 + 0.5 * dt * k2[3])
    R4 = R0 @ so3_exp(dt * k3[2])
    k4 = stage(R4, v0 + dt * k3[1], w0 + dt * k3[3])

    def combine(i):
        return (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0

    p1 = p0 + dt * combine(0)
    v1 = v0 + dt * combine(1)
    w1 = w0 + dt * combine(3)
    R1 = project_to_so3(R0 @ so3_exp(dt * combine(2)))
    return RigidBodyState(p=p1, v=v1, R=R1, Omega=w1)


def measure(state: RigidBodyState, noise_std, rng_seed: int, timestamp: float = 0.0) -> Measurement:
    """Noisy position/velocity measurement y = (p, v) + eps.

    Args:
        state: True state.
        noise_std: Per-axis standard deviations (6-vector), all >= 0.
        rng_seed: Seed of the Gaussian noise draw; identical seeds give identical y.
        timestamp: Time stamp attached to the measurement.
    """
    noise_std = np.asarray(noise_std, dtype=float).reshape(6)
    _require_finite("noise_std", noise_std)
    if np.any(noise_std < 0.0):
        raise ValueError(f"noise_std must be non-negative, got {noise_std}")
    rng = np.random.default_rng(rng_seed)
    truth = np.concatenate([state.p, state.v])
    return Measurement(y=truth + noise_std * rng.standard_normal(6), timestamp=timestamp)


def measure_gyro(state: RigidBodyState, noise_std: float, rng_seed: int) -> NDArray:
    """Noisy body-rate measurement used by the rotational estimator."""
    if noise_std < 0.0:
        raise ValueError(f"noise_std must be non-negative, got {noise_std}")
    rng = np.random.default_rng(rng_seed)
    return state.Omega + noise_std * rng.standard_normal(3)
