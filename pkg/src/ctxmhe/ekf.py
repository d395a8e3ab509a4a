from dataclasses import dataclass
import logging

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import pinvh

from .dynamics import Measurement
from .models import ProcessModel

logger = logging.getLogger(__name__)

INNOVATION_TOL = 1e-9
RANK_TOL = 1e-14


class SingularInnovationError(ArithmeticError):
    """The innovation covariance of an EKF update cannot explain the innovation."""


@dataclass(frozen=True)
class EkfNoise:
    """Process and measurement noise covariances of the EKF.

    Attributes:
        process_cov: Covariance of w (n x n).
        measurement_cov: Covariance of the measurement noise (ny x ny).
    """

    process_cov: NDArray
    measurement_cov: NDArray

    @classmethod
    def from_std(cls, process_std, measurement_std) -> "EkfNoise":
        return cls(
            process_cov=np.diag(np.asarray(process_std, dtype=float) ** 2),
            measurement_cov=np.diag(np.asarray(measurement_std, dtype=float) ** 2),
        )


def _symmetrize(matrix: NDArray) -> NDArray:
    return 0.5 * (matrix + matrix.T)


def ekf_predict(x: NDArray, cov: NDArray, u: NDArray, model: ProcessModel, noise: EkfNoise):
    """Propagates mean and covariance through the process model."""
    w = np.zeros(model.n)
    F = model.jacobian_x(x, u, w)
    G = model.jacobian_w(x, u, w)
    x_pred = model.f(x, u, w)
    cov_pred = F @ cov @ F.T + G @ noise.process_cov @ G.T
    return x_pred, _symmetrize(cov_pred)


def _innovation_gain(S: NDArray, HP: NDArray, innovation: NDArray) -> NDArray:
    """K = P H^T S^+, with S^+ the pseudo-inverse of the innovation covariance.

    S loses rank once the covariance collapses under zero noise; the update is
    then consistent only if the innovation lies in the range of S. Eigenvalues
    below RANK_TOL count as zero, so rounding residue of a collapsed covariance
    produces no gain.
    """
    S_pinv, rank = pinvh(S, atol=RANK_TOL, return_rank=True)
    if rank < len(S):
        unexplained = innovation - S @ (S_pinv @ innovation)
        if np.linalg.norm(unexplained) > INNOVATION_TOL * max(1.0, float(np.linalg.norm(innovation))):
            raise SingularInnovationError("innovation lies outside the range of a singular innovation covariance")
        logger.debug("innovation covariance has rank %d of %d", rank, len(S))
    return (S_pinv @ HP).T


def ekf_update(x: NDArray, cov: NDArray, y, model: ProcessModel, noise: EkfNoise):
    """Corrects mean and covariance with one measurement (Joseph form)."""
    y = y.y if isinstance(y, Measurement) else np.asarray(y, dtype=float)
    H = model.jacobian_h(x)
    innovation = y - model.h(x)
    S = _symmetrize(H @ cov @ H.T + noise.measurement_cov)
    gain = _innovation_gain(S, H @ cov, innovation)
    x_new = x + gain @ innovation
    eye_kh = np.eye(model.n) - gain @ H
    cov_new = eye_kh @ cov @ eye_kh.T + gain @ noise.measurement_cov @ gain.T
    return x_new, _symmetrize(cov_new)


def ekf_estimate(
    prev: NDArray,
    prev_cov: NDArray,
    u: NDArray,
    y,
    noise_cfg: EkfNoise,
    model: ProcessModel,
) -> tuple[NDArray, NDArray]:
    """One predict-update cycle of the extended Kalman filter.

    Args:
        prev: Previous augmented state estimate.
        prev_cov: Its covariance (symmetric positive definite).
        u: Control applied over the step.
        y: New measurement.
        noise_cfg: Process and measurement noise covariances.
        model: Process model shared with the MHE.

    Returns:
        The updated estimate and covariance.
    """
    x_pred, cov_pred = ekf_predict(np.asarray(prev, dtype=float), prev_cov, u, model, noise_cfg)
    return ekf_update(x_pred, cov_pred, y, model, noise_cfg)
