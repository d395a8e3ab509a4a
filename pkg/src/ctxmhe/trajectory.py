from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.integrate import trapezoid

from .control import ReferencePoint
from .wind import WindContext, find_context

HALF_WIDTH = 0.75
CEILING = 1.0
CORNER = 0.5
HOVER_STARTS = ((-CORNER, -CORNER), (CORNER, -CORNER), (-CORNER, CORNER), (CORNER, CORNER))


def inside_volume(position: NDArray, tolerance: float = 1e-9) -> bool:
    """Whether a point lies in the 1.5 x 1.5 x 1 m flight volume."""
    x, y, z = position
    return (
        abs(x) <= HALF_WIDTH + tolerance
        and abs(y) <= HALF_WIDTH + tolerance
        and -tolerance <= z <= CEILING + tolerance
    )


@dataclass(frozen=True)
class Trajectory:
    """A setpoint stream built from constant-speed segments and an optional closed curve.

    Attributes:
        kind: ``hover``, ``square``, ``figure8`` or ``line``.
        waypoints: Corner points visited in order at ``speed``.
        speed: Travel speed along the segments (m/s).
        hold: Time spent at the final waypoint (s).
        loop_radius: Half-width of the figure-8 (0 for segment-only trajectories).
        loop_period: Duration of one figure-8 loop (s).
        dwells: Pause at each waypoint before leaving it (s); empty for none.
    """

    kind: str
    waypoints: tuple
    speed: float
    hold: float = 0.0
    loop_radius: float = 0.0
    loop_period: float = 0.0
    dwells: tuple = ()
    _times: tuple = field(default=(), repr=False)

    def __post_init__(self):
        points = tuple(np.asarray(p, dtype=float).reshape(3) for p in self.waypoints)
        object.__setattr__(self, "waypoints", points)
        if len(points) < 1:
            raise ValueError("a trajectory needs at least one waypoint")
        if self.speed <= 0.0:
            raise ValueError("trajectory speed must be positive")
        dwells = tuple(float(d) for d in self.dwells) or (0.0,) * len(points)
        if len(dwells) != len(points) or min(dwells) < 0.0:
            raise ValueError("dwells must give one non-negative pause per waypoint")
        object.__setattr__(self, "dwells", dwells)
        # arrival and departure time of every waypoint, interleaved
        times = [0.0, dwells[0]]
        for a, b, dwell in zip(points[:-1], points[1:], dwells[1:]):
            arrival = times[-1] + np.linalg.norm(b - a) / self.speed
            times.extend([arrival, arrival + dwell])
        object.__setattr__(self, "_times", tuple(times))
        for point in points:
            if not inside_volume(point):
                raise ValueError(f"waypoint {point} leaves the flight volume")

    @property
    def start(self) -> NDArray:
        return self.waypoints[0].copy()

    @property
    def segments_end(self) -> float:
        return self._times[-1]

    @property
    def duration(self) -> float:
        return self.segments_end + self.loop_period + self.hold

    def steps(self, dt: float) -> int:
        return int(round(self.duration / dt))

    def setpoint(self, time: float) -> ReferencePoint:
        if time < self.segments_end:
            index = int(np.searchsorted(self._times, time, side="right")) - 1
            if index % 2 == 0:
                return ReferencePoint.hold(self.waypoints[index // 2])
            a, b = self.waypoints[index // 2], self.waypoints[index // 2 + 1]
            direction = (b - a) / np.linalg.norm(b - a)
            return ReferencePoint(x_d=a + direction * self.speed * (time - self._times[index]), v_d=self.speed * direction)
        end = self.waypoints[-1]
        loop_time = time - self.segments_end
        if self.loop_period > 0.0 and loop_time < self.loop_period:
            return self._figure8(end, loop_time)
        return ReferencePoint.hold(end)

    def _figure8(self, center: NDArray, time: float) -> ReferencePoint:
        # Lemniscate of Gerono: x = a sin(phi), y = a sin(phi) cos(phi), phi = w t.
        a = self.loop_radius
        w = 2.0 * np.pi / self.loop_period
        phi = w * time
        s, c = np.sin(phi), np.cos(phi)
        s2, c2 = np.sin(2 * phi), np.cos(2 * phi)
        x_d = center + np.array([a * s, 0.5 * a * s2, 0.0])
        v_d = np.array([a * w * c, a * w * c2, 0.0])
        a_d = np.array([-a * w**2 * s, -2.0 * a * w**2 * s2, 0.0])
        return ReferencePoint(x_d=x_d, v_d=v_d, a_d=a_d)


def _figure8_period(radius: float, speed: float) -> float:
    phi = np.linspace(0.0, 2.0 * np.pi, 2001)
    rate = radius * np.sqrt(np.cos(phi) ** 2 + np.cos(2 * phi) ** 2)
    return float(trapezoid(rate, phi) / speed)


def make_trajectory(kind: str, speed: float = 0.3, rise: float = 0.5, hover_hold: float = 5.0, start=None) -> Trajectory:
    """Builds one of the evaluation trajectories.

    Every trajectory starts on the ground, rises by ``rise`` and then flies its
    pattern at that height. Hover holds for ``hover_hold`` and lands where it
    took off; ``start`` picks its corner (x, y).
    """
    if kind == "hover":
        x, y = start if start is not None else HOVER_STARTS[0]
        return Trajectory(kind, ((x, y, 0.0), (x, y, rise), (x, y, 0.0)), speed, dwells=(0.0, hover_hold, 0.0))
    if kind == "square":
        c = CORNER
        corners = ((-c, -c), (c, -c), (c, c), (-c, c), (-c, -c))
        points = ((-c, -c, 0.0),) + tuple((x, y, rise) for x, y in corners)
        return Trajectory(kind, points, speed)
    if kind == "figure8":
        return Trajectory(
            kind,
            ((0.0, 0.0, 0.0), (0.0, 0.0, rise)),
            speed,
            loop_radius=CORNER,
            loop_period=_figure8_period(CORNER, speed),
        )
    if kind == "line":
        return Trajectory(kind, ((-CORNER, 0.0, 0.0), (-CORNER, 0.0, rise), (CORNER, 0.0, rise)), speed)
    raise ValueError(f"unknown trajectory kind {kind!r}")


def trajectory_variants(kind: str, speed: float = 0.3, rise: float = 0.5, hover_hold: float = 5.0) -> list[Trajectory]:
    """The runs pooled into one cell; hover flies from each of the four corners."""
    if kind == "hover":
        return [make_trajectory(kind, speed, rise, hover_hold, start) for start in HOVER_STARTS]
    return [make_trajectory(kind, speed, rise, hover_hold)]


class Environment:
    """Quadrant-wise wind layout of the flight volume.

    Quadrants are indexed (x<0,y<0), (x>=0,y<0), (x<0,y>=0), (x>=0,y>=0).
    Points closer than ``margin`` to the side walls see no wind.
    """

    def __init__(self, env_id: str, quadrants: list[WindContext], no_wind: WindContext, margin: float = 0.0):
        if len(quadrants) != 4:
            raise ValueError("an environment needs exactly four quadrant contexts")
        if no_wind.speed_level != 0:
            raise ValueError("no_wind must be the no-wind context")
        self.env_id = str(env_id)
        self.quadrants = list(quadrants)
        self.no_wind = no_wind
        self.margin = margin

    @classmethod
    def from_layout(cls, env_id: str, names: list[str], pool: list[WindContext], margin: float = 0.0) -> "Environment":
        return cls(env_id, [find_context(pool, name) for name in names], find_context(pool, (0, 0)), margin)

    def quadrant(self, position: NDArray) -> int:
        return int(position[0] >= 0.0) + 2 * int(position[1] >= 0.0)

    def context_at(self, position: NDArray) -> WindContext:
        x, y = position[0], position[1]
        if self.margin > 0.0 and max(abs(x), abs(y)) > HALF_WIDTH - self.margin:
            return self.no_wind
        return self.quadrants[self.quadrant(position)]

    def __repr__(self):
        return f"Environment({self.env_id}: {[c.name for c in self.quadrants]})"
