from dataclasses import dataclass
from typing import Callable, Union
import logging

import numpy as np
from numpy.typing import NDArray

from .config import Config, EstimatorConfig, NoiseConfig
from .control import ControlGains, ThrustMoment, lee_control, mix_motors, saturate, unmix_motors
from .dynamics import E3, Disturbance, Measurement, QuadParams, RigidBodyState, measure, measure_gyro, step_dynamics
from .ekf import EkfNoise
from .estimator import EkfEstimator, MheEstimator
from .models import RotationalModel, TranslationalModel
from .trajectory import Trajectory
from .wind import WindContext, wind_disturbance

logger = logging.getLogger(__name__)

MEASUREMENT_STREAM = 1
WIND_STREAM = 2
GYRO_STREAM = 3


def stream_seed(seed: int, stream: int, index: int) -> int:
    """Independent, reproducible seed for one draw of one random stream."""
    return int(np.random.SeedSequence([int(seed), stream, int(index)]).generate_state(1)[0])


@dataclass(frozen=True)
class SimStack:
    """Everything a closed-loop flight needs besides the estimator weights."""

    params: QuadParams
    gains: ControlGains
    noise: NoiseConfig
    estimator: EstimatorConfig

    @classmethod
    def from_config(cls, config: Config) -> "SimStack":
        return cls(config.params, config.control, config.noise, config.estimator)

    @property
    def dt(self) -> float:
        return self.estimator.dt

    def translational_model(self) -> TranslationalModel:
        return TranslationalModel(self.params.mass, self.params.gravity, self.dt)

    def rotational_model(self) -> RotationalModel:
        return RotationalModel(self.params.inertia, self.dt)

    def mhe_estimator(self, start: NDArray, features_mode: str = "innovation") -> MheEstimator:
        prior = np.concatenate([start, np.zeros(6)])
        return MheEstimator(
            self.translational_model(),
            prior,
            self.estimator.horizon,
            self.estimator.max_iterations,
            self.estimator.tolerance,
            features_mode,
        )

    def rotational_estimator(self) -> MheEstimator:
        return MheEstimator(
            self.rotational_model(),
            np.zeros(6),
            self.estimator.horizon,
            self.estimator.max_iterations,
            self.estimator.tolerance,
            "raw",
        )

    def ekf_estimator(self, start: NDArray) -> EkfEstimator:
        prior = np.concatenate([start, np.zeros(6)])
        noise = EkfNoise.from_std(self.estimator.ekf_process_std, self.noise.measurement_std)
        prior_cov = np.diag(np.asarray(self.estimator.ekf_prior_std) ** 2)
        return EkfEstimator(self.translational_model(), prior, prior_cov, noise)


WindSource = Union[WindContext, Callable[[NDArray], WindContext]]


class ClosedLoop:
    """Plant, sensors and controller of one seeded flight.

    The wind is either one fixed context or a map from the true position to
    the active context. Attitude and body rate are taken as measured
    exactly; the estimators supply position, velocity and the disturbance.

    Attributes:
        state: True rigid-body state.
        step: Index of the next control step.
        time: Simulated time of the next step (s).
        last_disturbance: Wind applied over the previous step.
        last_control: Thrust and moment applied over the previous step.
    """

    def __init__(self, stack: SimStack, wind: WindSource, trajectory: Trajectory, seed: int):
        self.stack = stack
        self.wind = wind
        self.trajectory = trajectory
        self.seed = int(seed)
        self.state = RigidBodyState.at_rest(trajectory.start)
        self.step = 0
        self.last_disturbance = Disturbance.zero()
        self.last_control = ThrustMoment(f=stack.params.hover_thrust, M=np.zeros(3))

    @property
    def time(self) -> float:
        return self.step * self.stack.dt

    def context(self) -> WindContext:
        if isinstance(self.wind, WindContext):
            return self.wind
        return self.wind(self.state.p)

    def setpoint(self):
        return self.trajectory.setpoint(self.time)

    def measure(self) -> Measurement:
        return measure(
            self.state,
            self.stack.noise.measurement_std,
            stream_seed(self.seed, MEASUREMENT_STREAM, self.step),
            timestamp=self.time,
        )

    def measure_gyro(self) -> NDArray:
        return measure_gyro(self.state, self.stack.noise.gyro_std, stream_seed(self.seed, GYRO_STREAM, self.step))

    def truth(self, with_disturbance: bool = False) -> NDArray:
        """True (p, v, F) with F the mean force of the active context, or zeros."""
        force = np.asarray(self.context().mean_force) if with_disturbance else np.zeros(3)
        return np.concatenate([self.state.p, self.state.v, force])

    def act(self, estimate: NDArray, dist_estimate: Disturbance) -> NDArray:
        """Computes, saturates and applies one control, then advances the plant.

        Args:
            estimate: Estimated (p, v, ...) used in place of the true translation.
            dist_estimate: Disturbance compensated by the controller.

        Returns:
            The specific thrust (f/m) R e3 of the applied control, i.e. the
            control input of the translational estimator model.
        """
        params = self.stack.params
        believed = self.state.with_translation(estimate[0:3], estimate[3:6])
        command = lee_control(believed, self.setpoint(), self.stack.gains, params, dist_estimate)
        demanded = mix_motors(command, params)
        thrusts = saturate(demanded, self.stack.gains)
        if np.any(thrusts != demanded):
            logger.debug("t=%.2f: rotor thrusts saturated", self.time)
        applied = unmix_motors(thrusts, params)
        rotation = self.state.R
        disturbance = wind_disturbance(self.context(), self.time, stream_seed(self.seed, WIND_STREAM, 0))
        self.state = step_dynamics(self.state, thrusts, disturbance, params, self.stack.dt)
        self.last_disturbance = disturbance
        self.last_control = applied
        self.step += 1
        return (applied.f / params.mass) * (rotation @ E3)
