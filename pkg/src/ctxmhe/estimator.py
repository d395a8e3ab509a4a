from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .dynamics import Disturbance, Measurement
from .ekf import EkfNoise, ekf_estimate, ekf_update
from .mhe import HorizonWindow, MheSolution, MheWeights, slide_window, solve_mhe
from .models import ProcessModel

FEATURE_MODES = ("innovation", "raw")


@dataclass(frozen=True)
class Estimate:
    """Latest estimate of an estimator.

    Attributes:
        state: Augmented state estimate at the newest time.
        solution: MHE solution of the current window, if any.
        window: The window the solution belongs to, if any.
    """

    state: NDArray
    solution: Optional[MheSolution] = None
    window: Optional[HorizonWindow] = None

    @property
    def position(self) -> NDArray:
        return self.state[0:3]

    @property
    def velocity(self) -> NDArray:
        return self.state[3:6]

    @property
    def disturbance(self) -> Disturbance:
        """Estimated wind force; the translational estimator leaves the torque at zero."""
        return Disturbance(force=self.state[6:9], torque=np.zeros(3))


class DisturbanceEstimator(ABC):
    """Abstract base class for closed-loop state and disturbance estimators.

    Estimators are fed one measurement per control period. Used as a context
    manager they start from a clean state and are reset again on exit.

    Attributes:
        model: Process model of the estimator.
        prior: State the estimator restarts from.
    """

    def __init__(self, model: ProcessModel, prior: NDArray):
        self.model = model
        self.prior = np.asarray(prior, dtype=float).reshape(model.n)

    def __enter__(self):
        self.reset()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.reset()

    @abstractmethod
    def reset(self, prior: Optional[NDArray] = None):
        """Discards all buffered data.

        Args:
            prior: New prior state; keeps the previous one when omitted.
        """
        pass

    @abstractmethod
    def latest(self) -> Estimate:
        """The most recent estimate (the prior before the first measurement)."""
        pass


class MheEstimator(DisturbanceEstimator):
    """Sliding-window MHE whose weights are supplied at every step.

    Attributes:
        horizon: Window length N in steps.
        max_iterations: Gauss-Newton iteration cap.
        tolerance: Gauss-Newton relative cost tolerance.
        features_mode: ``innovation`` or ``raw`` (see :meth:`features`).
    """

    def __init__(
        self,
        model: ProcessModel,
        prior: NDArray,
        horizon: int = 10,
        max_iterations: int = 50,
        tolerance: float = 1e-10,
        features_mode: str = "innovation",
    ):
        super().__init__(model, prior)
        if features_mode not in FEATURE_MODES:
            raise ValueError(f"features_mode must be one of {FEATURE_MODES}, got {features_mode!r}")
        self.horizon = horizon
        self.max_iterations = max_iterations
        self.tolerance = tolerance
        self.features_mode = features_mode
        self.reset()

    def reset(self, prior: Optional[NDArray] = None):
        if prior is not None:
            self.prior = np.asarray(prior, dtype=float).reshape(self.model.n)
        self.window: Optional[HorizonWindow] = None
        self.solution: Optional[MheSolution] = None
        self._latest = Estimate(state=self.prior.copy())

    def latest(self) -> Estimate:
        return self._latest

    def features(self, measurement) -> NDArray:
        """Network input for the next step.

        ``innovation``: position innovation against the one-step prediction of
        the latest estimate, followed by the latest velocity estimate.
        ``raw``: the measurement itself.
        """
        y = measurement.y if isinstance(measurement, Measurement) else np.asarray(measurement, dtype=float)
        if self.features_mode == "raw":
            return y.copy()
        state = self._latest.state
        predicted = state[0:3] + self.model.dt * state[3:6]
        return np.concatenate([y[0:3] - predicted, state[3:6]])

    def next_window(self, measurement, control: Optional[NDArray]) -> HorizonWindow:
        """The window obtained by appending a measurement, without solving it."""
        if self.window is None:
            timestamp = measurement.timestamp if isinstance(measurement, Measurement) else 0.0
            return HorizonWindow.start(measurement, self.prior, self.horizon, self.model, timestamp)
        if control is None:
            raise ValueError("a control is required after the first measurement")
        return slide_window(self.window, measurement, control, self.solution)

    def step(self, measurement, control: Optional[NDArray], weights: MheWeights) -> Estimate:
        """Appends one measurement and re-solves the window.

        Args:
            measurement: Newest measurement.
            control: Control applied since the previous measurement (None at start-up).
            weights: Weights to solve the new window with.
        """
        window = self.next_window(measurement, control)
        solution = solve_mhe(window, weights, self.max_iterations, self.tolerance)
        self.commit(window, solution)
        return self._latest

    def commit(self, window: HorizonWindow, solution: MheSolution):
        """Adopts an externally solved window as the estimator's current one."""
        self.window = window
        self.solution = solution
        self._latest = Estimate(state=solution.terminal.copy(), solution=solution, window=window)


class EkfEstimator(DisturbanceEstimator):
    """Extended Kalman filter on the same augmented model."""

    def __init__(self, model: ProcessModel, prior: NDArray, prior_cov: NDArray, noise: EkfNoise):
        super().__init__(model, prior)
        self.prior_cov = np.asarray(prior_cov, dtype=float)
        self.noise = noise
        self.reset()

    def reset(self, prior: Optional[NDArray] = None):
        if prior is not None:
            self.prior = np.asarray(prior, dtype=float).reshape(self.model.n)
        self.mean = self.prior.copy()
        self.cov = self.prior_cov.copy()
        self._started = False

    def latest(self) -> Estimate:
        return Estimate(state=self.mean.copy())

    def step(self, measurement, control: Optional[NDArray]) -> Estimate:
        """Filters one measurement; the first one only corrects the prior."""
        if not self._started:
            self.mean, self.cov = ekf_update(self.mean, self.cov, measurement, self.model, self.noise)
            self._started = True
        else:
            if control is None:
                raise ValueError("a control is required after the first measurement")
            self.mean, self.cov = ekf_estimate(self.mean, self.cov, control, measurement, self.noise, self.model)
        return self.latest()
