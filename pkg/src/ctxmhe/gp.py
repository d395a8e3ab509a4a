from dataclasses import dataclass, field
import logging

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e12
MAX_JITTER = 1e-2
MIN_JITTER = 1e-10


class GpConditioningError(ArithmeticError):
    """K + sigma^2 I stays ill-conditioned after jitter escalation."""


def _point(query) -> NDArray:
    vector = getattr(query, "vector", query)
    return np.atleast_1d(np.asarray(vector, dtype=float))


@dataclass(frozen=True)
class GpModel:
    """Gaussian process over context coordinates with an RBF kernel.

    k(c, c') = signal_variance * exp(-||c - c'||^2 / (2 length_scale^2)).
    Hyperparameters are fixed; models are immutable and
    :meth:`with_observation` returns an extended copy.

    Attributes:
        length_scale: RBF length scale.
        signal_variance: Kernel amplitude k(c, c).
        noise_variance: Observation noise sigma^2.
        prior_mean: Constant prior mean.
        inputs: Observed coordinates, shape (m, d).
        targets: Observed values, shape (m,).
    """

    length_scale: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 1e-6
    prior_mean: float = 0.0
    inputs: NDArray = field(default_factory=lambda: np.zeros((0, 0)))
    targets: NDArray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.length_scale <= 0.0 or self.signal_variance <= 0.0 or self.noise_variance < 0.0:
            raise ValueError("length_scale and signal_variance must be positive, noise_variance non-negative")
        inputs = np.asarray(self.inputs, dtype=float)
        targets = np.asarray(self.targets, dtype=float).ravel()
        if inputs.ndim != 2 or len(inputs) != len(targets):
            raise ValueError("inputs must be (m, d) with one target per row")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    @property
    def size(self) -> int:
        return len(self.targets)

    def kernel(self, a: NDArray, b: NDArray) -> NDArray:
        distances = cdist(np.atleast_2d(a), np.atleast_2d(b), "sqeuclidean")
        return self.signal_variance * np.exp(-0.5 * distances / self.length_scale**2)

    def with_observation(self, point, value: float) -> "GpModel":
        point = _point(point)
        inputs = point[None, :] if self.size == 0 else np.vstack([self.inputs, point])
        return GpModel(
            self.length_scale,
            self.signal_variance,
            self.noise_variance,
            self.prior_mean,
            inputs,
            np.append(self.targets, float(value)),
        )

    def _factor(self):
        gram = self.kernel(self.inputs, self.inputs)
        eye = np.eye(self.size)
        jitter = self.noise_variance
        while True:
            system = gram + jitter * eye
            if np.linalg.cond(system) <= MAX_CONDITION:
                return cho_factor(system)
            jitter = max(jitter * 10.0, MIN_JITTER)
            if jitter > MAX_JITTER:
                raise GpConditioningError(f"K + jitter I ill-conditioned up to jitter {MAX_JITTER}")
            logger.warning("GP kernel matrix ill-conditioned, raising jitter to %.1e", jitter)

    def posterior(self, query) -> tuple[float, float]:
        return gp_posterior(self, query)


def gp_posterior(gp: GpModel, query) -> tuple[float, float]:
    """Posterior mean and variance at one query point.

    mu(c) = m + k^T (K + sigma^2 I)^-1 (y - m) and
    var(c) = k(c, c) - k^T (K + sigma^2 I)^-1 k, clipped at zero.

    Raises:
        GpConditioningError: If jitter escalation up to 1e-2 cannot make the system well-conditioned.
    """
    point = _point(query)
    prior_variance = float(gp.signal_variance)
    if gp.size == 0:
        return float(gp.prior_mean), prior_variance
    factor = gp._factor()
    k = gp.kernel(gp.inputs, point)[:, 0]
    mean = gp.prior_mean + float(k @ cho_solve(factor, gp.targets - gp.prior_mean))
    variance = prior_variance - float(k @ cho_solve(factor, k))
    return mean, max(variance, 0.0)
