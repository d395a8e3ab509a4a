from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from numpy.typing import NDArray

from .dynamics import Disturbance

DIRECTION_NAMES = (
    "none",
    "left_crosswind",
    "right_crosswind",
    "headwind",
    "tailwind",
    "updraft",
    "downdraft",
)
LEVEL_NAMES = ("none", "low", "high")

# World-frame unit vectors of the wind force per direction code.
DIRECTION_VECTORS = {
    0: (0.0, 0.0, 0.0),
    1: (0.0, 1.0, 0.0),
    2: (0.0, -1.0, 0.0),
    3: (-1.0, 0.0, 0.0),
    4: (1.0, 0.0, 0.0),
    5: (0.0, 0.0, 1.0),
    6: (0.0, 0.0, -1.0),
}


def is_valid_pair(direction_code: int, speed_level: int) -> bool:
    if direction_code == 0 or speed_level == 0:
        return direction_code == 0 and speed_level == 0
    return direction_code in DIRECTION_VECTORS and speed_level in (1, 2)


def parse_direction(value) -> int:
    """Accepts a direction code or one of :data:`DIRECTION_NAMES`."""
    if isinstance(value, str):
        if value not in DIRECTION_NAMES:
            raise ValueError(f"unknown wind direction {value!r}")
        return DIRECTION_NAMES.index(value)
    return int(value)


def parse_level(value) -> int:
    if isinstance(value, str):
        if value not in LEVEL_NAMES:
            raise ValueError(f"unknown wind level {value!r}")
        return LEVEL_NAMES.index(value)
    return int(value)


@dataclass(frozen=True)
class ContextPoint:
    """A context as a point of R^2: (direction_code, speed_level)."""

    direction_code: float
    speed_level: float

    @property
    def vector(self) -> NDArray:
        return np.array([self.direction_code, self.speed_level], dtype=float)

    @property
    def key(self) -> tuple[int, int]:
        return int(round(self.direction_code)), int(round(self.speed_level))

    def distance(self, other: "ContextPoint") -> float:
        return float(np.linalg.norm(self.vector - other.vector))


@dataclass(frozen=True)
class WindContext:
    """A wind regime with stationary Gaussian force statistics.

    Attributes:
        direction_code: 0 (none) .. 6, see :data:`DIRECTION_NAMES`.
        speed_level: 0 (none), 1 (low) or 2 (high).
        mean_force: Mean world-frame wind force (N).
        turbulence_std: Per-axis standard deviation of the force turbulence (N).
        torque_ratio: Torque turbulence std per N of force turbulence (m).
    """

    direction_code: int
    speed_level: int
    mean_force: tuple[float, float, float] = (0.0, 0.0, 0.0)
    turbulence_std: float = 0.0
    torque_ratio: float = 1e-3

    def __post_init__(self):
        if not is_valid_pair(self.direction_code, self.speed_level):
            raise ValueError(
                f"invalid wind context (direction={self.direction_code}, level={self.speed_level})"
            )
        object.__setattr__(self, "mean_force", tuple(float(f) for f in self.mean_force))
        if self.speed_level == 0 and any(self.mean_force):
            raise ValueError("the no-wind context must have zero mean force")
        if self.speed_level != 0 and not any(self.mean_force):
            raise ValueError("a windy context must have a non-zero mean force")
        if self.turbulence_std < 0.0 or self.torque_ratio < 0.0:
            raise ValueError("turbulence_std and torque_ratio must be non-negative")

    @property
    def name(self) -> str:
        if self.direction_code == 0:
            return "no-wind"
        return f"{DIRECTION_NAMES[self.direction_code]}-{LEVEL_NAMES[self.speed_level]}"

    @property
    def key(self) -> tuple[int, int]:
        return self.direction_code, self.speed_level

    @property
    def point(self) -> ContextPoint:
        return ContextPoint(float(self.direction_code), float(self.speed_level))

    def embed(self, embedding: str = "code") -> NDArray:
        """Context coordinates used by the Gaussian process.

        ``code`` is the (direction_code, speed_level) pair; ``angle`` is the
        unit wind direction scaled by the speed level.
        """
        if embedding == "code":
            return self.point.vector
        if embedding == "angle":
            return np.asarray(DIRECTION_VECTORS[self.direction_code]) * self.speed_level
        raise ValueError(f"unknown context embedding {embedding!r}")

    def __repr__(self):
        return f"WindContext({self.name})"


def make_context(
    direction,
    level,
    low_force: float = 0.08,
    high_force: float = 0.16,
    turbulence_std: float = 0.01,
    torque_ratio: float = 1e-3,
    mean_force: Optional[float] = None,
    no_wind_turbulence_std: float = 0.0,
) -> WindContext:
    """Builds a context from its direction and level (codes or names)."""
    direction_code, speed_level = parse_direction(direction), parse_level(level)
    if not is_valid_pair(direction_code, speed_level):
        raise ValueError(f"invalid wind context (direction={direction}, level={level})")
    if speed_level == 0:
        return WindContext(0, 0, turbulence_std=no_wind_turbulence_std, torque_ratio=torque_ratio)
    magnitude = mean_force if mean_force is not None else (low_force, high_force)[speed_level - 1]
    force = magnitude * np.asarray(DIRECTION_VECTORS[direction_code])
    return WindContext(
        direction_code,
        speed_level,
        mean_force=tuple(force),
        turbulence_std=turbulence_std,
        torque_ratio=torque_ratio,
    )


def context_pairs() -> list[tuple[int, int]]:
    """The 13 valid (direction, level) pairs in lexicographic order."""
    pairs = [(0, 0)]
    pairs += [(d, lv) for d in range(1, len(DIRECTION_NAMES)) for lv in (1, 2)]
    return pairs


def enumerate_contexts(**kwargs) -> list[WindContext]:
    """All 13 contexts; keyword arguments are forwarded to :func:`make_context`."""
    return [make_context(d, lv, **kwargs) for d, lv in context_pairs()]


def find_context(contexts: Iterable[WindContext], key) -> WindContext:
    """Looks a context up by (direction, level) pair or by name."""
    for ctx in contexts:
        if ctx.key == key or ctx.name == key:
            return ctx
    raise ValueError(f"context {key!r} is not in the pool")


def _time_key(time: float) -> int:
    if not np.isfinite(time) or time < 0.0:
        raise ValueError(f"time must be finite and non-negative, got {time}")
    return int(round(time * 1e6))


def wind_disturbance(ctx: WindContext, time: float, rng_seed: int) -> Disturbance:
    """Samples the wind force and torque acting at a given time.

    The draw is seeded by (rng_seed, time), so a context produces a stationary
    white Gaussian sequence around its mean force.
    """
    if not isinstance(ctx, WindContext) or not is_valid_pair(ctx.direction_code, ctx.speed_level):
        raise ValueError(f"invalid wind context {ctx!r}")
    if ctx.turbulence_std == 0.0:
        return Disturbance(force=np.asarray(ctx.mean_force), torque=np.zeros(3))
    rng = np.random.default_rng([int(rng_seed), _time_key(time)])
    force_noise = ctx.turbulence_std * rng.standard_normal(3)
    torque_noise = ctx.torque_ratio * ctx.turbulence_std * rng.standard_normal(3)
    return Disturbance(force=np.asarray(ctx.mean_force) + force_noise, torque=torque_noise)
