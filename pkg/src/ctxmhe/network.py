from dataclasses import dataclass
from pathlib import Path
from typing import Optional
import json
import logging
import os

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logit

from .mhe import EPSILON, GAMMA_MIN, MheWeights

logger = logging.getLogger(__name__)

ARCHITECTURE = (6, 30, 30, 25)
STATE_DIM = 9
MEASUREMENT_DIM = 6


@dataclass(frozen=True)
class ThetaMapping:
    """Positivity map from raw network outputs z to MHE weights theta.

    theta_i = softplus(z_i) + epsilon for the 24 diagonal entries and
    gamma = gamma_min + (1 - gamma_min) sigmoid(z_25). Gamma is kept strictly
    above gamma_min, where the sigmoid rounds to zero for very negative z.
    """

    epsilon: float = EPSILON
    gamma_min: float = GAMMA_MIN

    def __call__(self, z: NDArray) -> NDArray:
        z = np.asarray(z, dtype=float)
        theta = np.empty_like(z)
        theta[:-1] = np.logaddexp(0.0, z[:-1]) + self.epsilon
        gamma = self.gamma_min + (1.0 - self.gamma_min) * expit(z[-1])
        theta[-1] = np.clip(gamma, np.nextafter(self.gamma_min, 1.0), 1.0)
        return theta

    def derivative(self, z: NDArray) -> NDArray:
        """d theta_i / d z_i; the map is elementwise so its Jacobian is diagonal."""
        z = np.asarray(z, dtype=float)
        d = np.empty_like(z)
        d[:-1] = expit(z[:-1])
        s = expit(z[-1])
        d[-1] = (1.0 - self.gamma_min) * s * (1.0 - s)
        return d

    def inverse(self, theta: NDArray) -> NDArray:
        """Raw outputs that map to theta; gamma = 1 is pulled just below one."""
        theta = np.asarray(theta, dtype=float)
        shifted = theta[:-1] - self.epsilon
        if np.any(shifted <= 0.0):
            raise ValueError(f"diagonal weights must exceed {self.epsilon}")
        z = np.empty_like(theta)
        # softplus^-1(s) = s + log(1 - exp(-s)), stable for large s
        z[:-1] = shifted + np.log(-np.expm1(-shifted))
        fraction = (theta[-1] - self.gamma_min) / (1.0 - self.gamma_min)
        z[-1] = logit(np.clip(fraction, 1e-12, 1.0 - 1e-9))
        return z

    def weights(self, z: NDArray) -> MheWeights:
        return MheWeights.from_theta(self(z), STATE_DIM, MEASUREMENT_DIM)


@dataclass
class ForwardCache:
    """Activations of one forward pass, kept for backpropagation."""

    inputs: list
    pre_activations: list
    raw: NDArray
    theta: NDArray


class WeightNet:
    """Fully connected 6 -> 30 -> 30 -> 25 network with ReLU hidden layers.

    Layer l computes a_l = W_l h_{l-1} + b_l with W_l of shape (out, in).

    Attributes:
        weights: Weight matrices per layer.
        biases: Bias vectors per layer.
        mapping: Positivity map applied to the raw output.
    """

    def __init__(self, weights: list, biases: list, mapping: Optional[ThetaMapping] = None):
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        self.mapping = mapping or ThetaMapping()
        shapes = [w.shape for w in self.weights]
        expected = [(ARCHITECTURE[i + 1], ARCHITECTURE[i]) for i in range(len(ARCHITECTURE) - 1)]
        if shapes != expected or [b.shape for b in self.biases] != [(s[0],) for s in expected]:
            raise ValueError(f"layer shapes {shapes} do not match the architecture {ARCHITECTURE}")

    @classmethod
    def zeros(cls) -> "WeightNet":
        sizes = ARCHITECTURE
        return cls(
            [np.zeros((sizes[i + 1], sizes[i])) for i in range(len(sizes) - 1)],
            [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)],
        )

    @classmethod
    def initialise(
        cls, rng: np.random.Generator, initial_weights: MheWeights, scale: float = 0.05
    ) -> "WeightNet":
        """Small uniform weights; the output bias makes the untrained net emit `initial_weights`."""
        net = cls.zeros()
        for layer in net.weights:
            layer[...] = rng.uniform(-scale, scale, size=layer.shape)
        net.biases[-1] = net.mapping.inverse(initial_weights.theta)
        return net

    @property
    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self) -> NDArray:
        """All weights and biases as one flat vector, layer by layer."""
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def set_parameters(self, flat: NDArray):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.parameter_count,):
            raise ValueError(f"expected {self.parameter_count} parameters, got {flat.shape}")
        offset = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = flat[offset : offset + w.size].reshape(w.shape)
            offset += w.size
            b[...] = flat[offset : offset + b.size]
            offset += b.size

    def copy(self) -> "WeightNet":
        return WeightNet(self.weights, self.biases, self.mapping)

    def forward_cached(self, features: NDArray) -> ForwardCache:
        h = np.asarray(features, dtype=float).reshape(ARCHITECTURE[0])
        if not np.all(np.isfinite(h)):
            raise ValueError(f"features must be finite, got {h}")
        inputs, pre = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            a = w @ h + b
            pre.append(a)
            h = np.maximum(a, 0.0) if i < len(self.weights) - 1 else a
        return ForwardCache(inputs=inputs, pre_activations=pre, raw=h, theta=self.mapping(h))

    def backward(self, cache: ForwardCache, grad_theta: NDArray) -> NDArray:
        """Flat gradient d(loss)/d(parameters) given d(loss)/d(theta)."""
        grad = np.asarray(grad_theta, dtype=float) * self.mapping.derivative(cache.raw)
        grads = []
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                grad = grad * (cache.pre_activations[i] > 0.0)
            grads.append((np.outer(grad, cache.inputs[i]), grad.copy()))
            grad = self.weights[i].T @ grad
        grads.reverse()
        return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])

    def __call__(self, features: NDArray) -> MheWeights:
        return forward(self, features)


def forward(net: WeightNet, features: NDArray) -> MheWeights:
    """MHE weights the network emits for a 6-D feature vector."""
    return MheWeights.from_theta(net.forward_cached(features).theta, STATE_DIM, MEASUREMENT_DIM)


class Adam:
    """Adam optimizer over a flat parameter vector."""

    def __init__(self, size: int, learning_rate: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: NDArray, gradient: NDArray) -> NDArray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * gradient
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * gradient**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def checkpoint_dict(net: WeightNet, metadata: Optional[dict] = None) -> dict:
    return {
        "architecture": list(ARCHITECTURE),
        "activation": "relu",
        "layers": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in zip(net.weights, net.biases)],
        "mapping": {"epsilon": net.mapping.epsilon, "gamma_min": net.mapping.gamma_min},
        "metadata": metadata or {},
    }


def net_from_dict(data: dict) -> tuple[WeightNet, dict]:
    if tuple(data.get("architecture", ())) != ARCHITECTURE:
        raise ValueError(f"checkpoint architecture {data.get('architecture')} is not {list(ARCHITECTURE)}")
    mapping = ThetaMapping(**data["mapping"])
    layers = data["layers"]
    net = WeightNet([layer["weight"] for layer in layers], [layer["bias"] for layer in layers], mapping)
    return net, data.get("metadata", {})


def save_checkpoint(net: WeightNet, path: os.PathLike, metadata: Optional[dict] = None):
    """Writes the network as JSON; floats are stored in their shortest round-trip form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(checkpoint_dict(net, metadata), handle, sort_keys=True)
    logger.debug("saved checkpoint %s", path)


def load_checkpoint(path: os.PathLike) -> tuple[WeightNet, dict]:
    with open(Path(path), "r", encoding="utf-8") as handle:
        return net_from_dict(json.load(handle))
