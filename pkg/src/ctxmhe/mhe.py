from dataclasses import dataclass, field
from typing import Optional
import logging

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve

from .dynamics import Measurement
from .models import ProcessModel

logger = logging.getLogger(__name__)

EPSILON = 1e-4
GAMMA_MIN = 1e-3
MAX_HALVINGS = 30
_TINY = np.finfo(float).tiny


class MheWeightError(ValueError):
    """MHE weights violate positivity or the forgetting-factor range."""


@dataclass(frozen=True)
class MheWeights:
    """Diagonal MHE weighting with a forgetting factor.

    Stage k of a window ending at t is weighted by R_k = gamma^(t-k) R_base and
    Q_k = gamma^(t-k) Q_base; the arrival weight P is fixed per solve.

    Attributes:
        p_diag: Diagonal of the arrival weight P (n entries).
        r_diag: Diagonal of R_base (ny entries).
        q_diag: Diagonal of Q_base (n entries).
        gamma: Forgetting factor in (1e-3, 1].
    """

    p_diag: NDArray
    r_diag: NDArray
    q_diag: NDArray
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("p_diag", "r_diag", "q_diag"):
            value = np.asarray(getattr(self, name), dtype=float).ravel()
            if not np.all(np.isfinite(value)):
                raise MheWeightError(f"{name} must be finite")
            if np.any(value < EPSILON):
                raise MheWeightError(f"{name} has entries below {EPSILON}: {value.min():.3e}")
            object.__setattr__(self, name, value)
        if len(self.p_diag) != len(self.q_diag):
            raise MheWeightError("P and Q_base must have the same dimension")
        gamma = float(self.gamma)
        if not (GAMMA_MIN < gamma <= 1.0):
            raise MheWeightError(f"gamma must lie in ({GAMMA_MIN}, 1], got {gamma}")
        object.__setattr__(self, "gamma", gamma)

    @property
    def n(self) -> int:
        return len(self.p_diag)

    @property
    def ny(self) -> int:
        return len(self.r_diag)

    @property
    def size(self) -> int:
        return 2 * self.n + self.ny + 1

    @property
    def theta(self) -> NDArray:
        """Flat parameter vector (P diagonal, R_base diagonal, Q_base diagonal, gamma)."""
        return np.concatenate([self.p_diag, self.r_diag, self.q_diag, [self.gamma]])

    @classmethod
    def from_theta(cls, theta: NDArray, n: int = 9, ny: int = 6) -> "MheWeights":
        theta = np.asarray(theta, dtype=float).ravel()
        if len(theta) != 2 * n + ny + 1:
            raise MheWeightError(f"theta must have {2 * n + ny + 1} entries, got {len(theta)}")
        return cls(
            p_diag=theta[:n],
            r_diag=theta[n : n + ny],
            q_diag=theta[n + ny : 2 * n + ny],
            gamma=theta[-1],
        )

    @property
    def P(self) -> NDArray:
        return np.diag(self.p_diag)

    @property
    def R_base(self) -> NDArray:
        return np.diag(self.r_diag)

    @property
    def Q_base(self) -> NDArray:
        return np.diag(self.q_diag)

    def r_stage(self, age: int) -> NDArray:
        """Diagonal of R_k for a stage `age` steps before the newest one."""
        return self.gamma**age * self.r_diag

    def q_stage(self, age: int) -> NDArray:
        return self.gamma**age * self.q_diag

    def scaled(self, factor: float) -> "MheWeights":
        """P, R_base and Q_base multiplied by the same factor."""
        return MheWeights(
            p_diag=factor * self.p_diag,
            r_diag=factor * self.r_diag,
            q_diag=factor * self.q_diag,
            gamma=self.gamma,
        )


@dataclass(frozen=True)
class HorizonWindow:
    """Measurements, controls and prior of one MHE window.

    The window holds ``steps + 1`` measurements y_{t-steps..t} and ``steps``
    controls; ``steps`` grows up to ``horizon`` during start-up and then stays.
    """

    measurements: tuple
    controls: tuple
    prior: NDArray
    horizon: int
    model: ProcessModel
    timestamps: tuple = ()

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be at least 1, got {self.horizon}")
        if len(self.measurements) != len(self.controls) + 1:
            raise ValueError("a window needs exactly one more measurement than controls")
        if len(self.controls) > self.horizon:
            raise ValueError(f"window holds {len(self.controls)} steps, horizon is {self.horizon}")
        prior = np.asarray(self.prior, dtype=float).reshape(self.model.n)
        object.__setattr__(self, "prior", prior)
        object.__setattr__(
            self, "measurements", tuple(np.asarray(y, dtype=float).reshape(self.model.ny) for y in self.measurements)
        )
        object.__setattr__(
            self, "controls", tuple(np.asarray(u, dtype=float).reshape(self.model.nu) for u in self.controls)
        )
        if self.timestamps and len(self.timestamps) != len(self.measurements):
            raise ValueError("timestamps must match the measurements")

    @classmethod
    def start(
        cls, y0, prior: NDArray, horizon: int, model: ProcessModel, timestamp: float = 0.0
    ) -> "HorizonWindow":
        """A one-measurement window used at start-up."""
        y = y0.y if isinstance(y0, Measurement) else y0
        return cls((y,), (), prior, horizon, model, (timestamp,))

    @property
    def steps(self) -> int:
        return len(self.controls)

    @property
    def dt(self) -> float:
        return self.model.dt

    @property
    def is_full(self) -> bool:
        return self.steps == self.horizon

    def __len__(self):
        return self.steps


@dataclass(frozen=True)
class MheSolution:
    """Minimiser of the MHE cost over one window.

    Attributes:
        states: Estimated states x_{t-steps..t|t}, shape (steps + 1, n).
        noises: Estimated process noises, shape (steps, n).
        cost: Objective value J at the solution.
        iterations: Gauss-Newton iterations performed.
        converged: Whether the relative cost change met the tolerance.
        gradient_norm: Norm of the objective gradient at the solution.
        cost_history: Cost after every accepted iteration, starting with the initial guess.
    """

    states: NDArray
    noises: NDArray
    cost: float
    iterations: int
    converged: bool
    gradient_norm: float = 0.0
    cost_history: tuple = field(default_factory=tuple)

    @property
    def terminal(self) -> NDArray:
        return self.states[-1]


class _WindowProblem:
    """Least-squares form of the MHE objective over z = (x_0, w_0, ..., w_{s-1})."""

    def __init__(self, window: HorizonWindow, weights: MheWeights):
        model = window.model
        if weights.n != model.n or weights.ny != model.ny:
            raise MheWeightError(
                f"weights are sized for n={weights.n}, ny={weights.ny}; model has n={model.n}, ny={model.ny}"
            )
        self.window = window
        self.model = model
        self.steps = window.steps
        self.n = model.n
        self.nz = model.n * (self.steps + 1)
        self.sqrt_p = np.sqrt(weights.p_diag)
        self.sqrt_r = [np.sqrt(weights.r_stage(self.steps - k)) for k in range(self.steps + 1)]
        self.sqrt_q = [np.sqrt(weights.q_stage(self.steps - k)) for k in range(self.steps)]

    def split(self, z: NDArray) -> tuple[NDArray, NDArray]:
        return z[: self.n], z[self.n :].reshape(self.steps, self.n)

    def rollout(self, z: NDArray, with_jacobian: bool = False):
        x0, noises = self.split(z)
        states = [x0]
        jacobians = []
        if with_jacobian:
            d = np.zeros((self.n, self.nz))
            d[:, : self.n] = np.eye(self.n)
            jacobians.append(d)
        for k in range(self.steps):
            x, u, w = states[-1], self.window.controls[k], noises[k]
            if with_jacobian:
                F = self.model.jacobian_x(x, u, w)
                G = self.model.jacobian_w(x, u, w)
                d = F @ jacobians[-1]
                block = slice(self.n * (k + 1), self.n * (k + 2))
                d[:, block] += G
                jacobians.append(d)
            states.append(self.model.f(x, u, w))
        return np.array(states), noises, jacobians

    def residuals(self, z: NDArray, with_jacobian: bool = False):
        states, noises, jacobians = self.rollout(z, with_jacobian)
        blocks = [self.sqrt_p * (states[0] - self.window.prior)]
        rows = [self.sqrt_p[:, None] * jacobians[0]] if with_jacobian else []
        for k, y in enumerate(self.window.measurements):
            blocks.append(self.sqrt_r[k] * (y - self.model.h(states[k])))
            if with_jacobian:
                H = self.model.jacobian_h(states[k])
                rows.append(-self.sqrt_r[k][:, None] * (H @ jacobians[k]))
        for k in range(self.steps):
            blocks.append(self.sqrt_q[k] * noises[k])
            if with_jacobian:
                row = np.zeros((self.n, self.nz))
                row[:, self.n * (k + 1) : self.n * (k + 2)] = np.diag(self.sqrt_q[k])
                rows.append(row)
        residual = np.concatenate(blocks)
        jacobian = np.vstack(rows) if with_jacobian else None
        return residual, jacobian

    def cost(self, z: NDArray) -> float:
        residual, _ = self.residuals(z)
        return 0.5 * float(residual @ residual)


def solve_mhe(
    window: HorizonWindow,
    weights: MheWeights,
    max_iterations: int = 50,
    tolerance: float = 1e-10,
    initial_guess: Optional[NDArray] = None,
) -> MheSolution:
    """Solves the MHE problem of one window by damped Gauss-Newton.

    The decision variables are the first state and the process noises; the
    remaining states follow from the dynamics. Steps are halved until the cost
    does not increase. For the linear translational model the first step is
    the exact global minimiser.

    Args:
        window: Measurements, controls and prior.
        weights: Positive-definite weighting.
        max_iterations: Iteration cap; hitting it reports ``converged=False``.
        tolerance: Relative cost-change tolerance.
        initial_guess: Optional start (x_0 followed by the noises); defaults
            to the prior with zero noise.

    Returns:
        The solution, flagged as converged or not.
    """
    problem = _WindowProblem(window, weights)
    if initial_guess is None:
        z = np.concatenate([window.prior, np.zeros(problem.nz - problem.n)])
    else:
        z = np.asarray(initial_guess, dtype=float).reshape(problem.nz)

    residual, jacobian = problem.residuals(z, with_jacobian=True)
    cost = 0.5 * float(residual @ residual)
    history = [cost]
    converged = False
    iterations = 0
    gradient = jacobian.T @ residual

    while iterations < max_iterations:
        iterations += 1
        delta = -cho_solve(cho_factor(jacobian.T @ jacobian), gradient)
        predicted = -0.5 * float(gradient @ delta)
        if predicted <= tolerance * max(cost, _TINY):
            converged = True
            break

        alpha, accepted = 1.0, False
        for _ in range(MAX_HALVINGS):
            trial = z + alpha * delta
            trial_cost = problem.cost(trial)
            if trial_cost <= cost:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            logger.debug("line search failed at iteration %d (cost %.6e)", iterations, cost)
            break

        change = cost - trial_cost
        previous = cost
        z, cost = trial, trial_cost
        history.append(cost)
        residual, jacobian = problem.residuals(z, with_jacobian=True)
        gradient = jacobian.T @ residual
        logger.debug("iteration %d: cost %.6e, step %.3g", iterations, cost, alpha)
        if change <= tolerance * max(previous, _TINY):
            converged = True
            break

    if not converged:
        logger.warning("MHE did not converge after %d iterations (cost %.6e)", iterations, cost)

    states, noises, _ = problem.rollout(z)
    return MheSolution(
        states=states,
        noises=np.array(noises),
        cost=cost,
        iterations=iterations,
        converged=converged,
        gradient_norm=float(np.linalg.norm(gradient)),
        cost_history=tuple(history),
    )


def cost_terms(window: HorizonWindow, weights: MheWeights, states: NDArray, noises: NDArray) -> dict:
    """Arrival, measurement and process parts of the MHE objective."""
    model = window.model
    steps = window.steps
    arrival = 0.5 * float(weights.p_diag @ (states[0] - window.prior) ** 2)
    measurement = 0.5 * sum(
        float(weights.r_stage(steps - k) @ (y - model.h(states[k])) ** 2)
        for k, y in enumerate(window.measurements)
    )
    process = 0.5 * sum(float(weights.q_stage(steps - k) @ noises[k] ** 2) for k in range(steps))
    return {"arrival": arrival, "measurement": measurement, "process": process}


def slide_window(
    window: HorizonWindow,
    new_y,
    new_u: NDArray,
    solution: MheSolution,
    timestamp: Optional[float] = None,
) -> HorizonWindow:
    """Appends a measurement/control pair to the window.

    While the window is shorter than the horizon it grows. Once full, the
    oldest sample is dropped and the new prior is the solution's second state
    x_{t-N+1|t}.
    """
    y = new_y.y if isinstance(new_y, Measurement) else new_y
    if timestamp is None and isinstance(new_y, Measurement):
        timestamp = new_y.timestamp
    measurements = window.measurements + (np.asarray(y, dtype=float),)
    controls = window.controls + (np.asarray(new_u, dtype=float),)
    timestamps = window.timestamps + (timestamp,) if window.timestamps and timestamp is not None else ()
    prior = window.prior
    if len(controls) > window.horizon:
        measurements, controls = measurements[1:], controls[1:]
        timestamps = timestamps[1:]
        prior = solution.states[1]
    return HorizonWindow(measurements, controls, prior, window.horizon, window.model, timestamps)
