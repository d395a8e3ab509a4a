from abc import ABC, abstractmethod

import numpy as np
from numpy.typing import NDArray

from .dynamics import E3, hat


class ProcessModel(ABC):
    """Discrete-time model x+ = f(x, u, w) with measurement y = h(x) used by the estimators.

    Attributes:
        n: State dimension.
        ny: Measurement dimension.
        nu: Control dimension.
        dt: Sampling interval in s.
    """

    n: int
    ny: int
    nu: int

    def __init__(self, dt: float):
        if dt <= 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.dt = dt

    @property
    def is_linear(self) -> bool:
        return False

    @abstractmethod
    def f(self, x: NDArray, u: NDArray, w: NDArray) -> NDArray:
        """Propagates the state one step."""
        raise NotImplementedError()

    @abstractmethod
    def jacobian_x(self, x: NDArray, u: NDArray, w: NDArray) -> NDArray:
        """Jacobian of f with respect to the state (F-bar)."""
        raise NotImplementedError()

    def jacobian_w(self, x: NDArray, u: NDArray, w: NDArray) -> NDArray:
        """Jacobian of f with respect to the process noise; the noise is additive."""
        return np.eye(self.n)

    @abstractmethod
    def h(self, x: NDArray) -> NDArray:
        """Measurement map."""
        raise NotImplementedError()

    @abstractmethod
    def jacobian_h(self, x: NDArray) -> NDArray:
        raise NotImplementedError()


class TranslationalModel(ProcessModel):
    """Point-mass model augmented with a random-walk wind force.

    The state is (p, v, F_dist) and the control is the specific thrust
    (f/m) R e3; gravity is applied by the model::

        p+ = p + v dt + w_p
        v+ = v + (u + F_dist/m - g e3) dt + w_v
        F+ = F_dist + w_F
    """

    n = 9
    ny = 6
    nu = 3

    def __init__(self, mass: float, gravity: float, dt: float):
        super().__init__(dt)
        if mass <= 0.0 or gravity <= 0.0:
            raise ValueError("mass and gravity must be positive")
        self.mass = mass
        self.gravity = gravity
        eye = np.eye(3)
        self.A = np.eye(9)
        self.A[0:3, 3:6] = dt * eye
        self.A[3:6, 6:9] = (dt / mass) * eye
        self.B = np.zeros((9, 3))
        self.B[3:6, :] = dt * eye
        self.c = np.zeros(9)
        self.c[3:6] = -gravity * dt * E3
        self.H = np.hstack([np.eye(6), np.zeros((6, 3))])

    @property
    def is_linear(self) -> bool:
        return True

    def f(self, x, u, w):
        return self.A @ x + self.B @ u + self.c + w

    def jacobian_x(self, x, u, w):
        return self.A

    def h(self, x):
        return self.H @ x

    def jacobian_h(self, x):
        return self.H


class RotationalModel(ProcessModel):
    """Body-rate model augmented with a random-walk wind torque.

    The state is (Omega, tau_dist), the control the commanded moment M and the
    measurement the gyro rate::

        Omega+ = Omega + J^-1 (M - Omega x J Omega + tau) dt + w_Omega
        tau+   = tau + w_tau
    """

    n = 6
    ny = 3
    nu = 3

    def __init__(self, inertia, dt: float):
        super().__init__(dt)
        self.J = np.diag(np.asarray(inertia, dtype=float))
        self.J_inv = np.linalg.inv(self.J)
        self.H = np.hstack([np.eye(3), np.zeros((3, 3))])

    def f(self, x, u, w):
        omega, tau = x[:3], x[3:]
        omega_dot = self.J_inv @ (u - np.cross(omega, self.J @ omega) + tau)
        return np.concatenate([omega + self.dt * omega_dot, tau]) + w

    def jacobian_x(self, x, u, w):
        omega = x[:3]
        F = np.eye(6)
        gyroscopic = hat(omega) @ self.J - hat(self.J @ omega)
        F[:3, :3] -= self.dt * self.J_inv @ gyroscopic
        F[:3, 3:] = self.dt * self.J_inv
        return F

    def h(self, x):
        return self.H @ x

    def jacobian_h(self, x):
        return self.H
