from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional
import hashlib
import json
import logging
import math
import os

import numpy as np

from .control import ControlGains
from .dynamics import QuadParams
from .mhe import MheWeights
from .wind import WindContext, context_pairs, find_context, make_context, parse_direction, parse_level

logger = logging.getLogger(__name__)

# JSON key -> dataclass field, per section; keys not listed map to themselves.
JSON_ALIASES = {
    "params": {
        "mass_kg": "mass",
        "inertia_diag_kgm2": "inertia",
        "arm_length_m": "arm_length",
        "torque_coefficient": "c_tau",
        "gravity_mps2": "gravity",
    },
    "wind": {
        "low_force_n": "low_force",
        "high_force_n": "high_force",
        "turbulence_std_n": "turbulence_std",
        "torque_ratio_m": "torque_ratio",
        "no_wind_turbulence_std_n": "no_wind_turbulence_std",
    },
    "control": {"motor_min_n": "motor_min", "motor_max_n": "motor_max"},
    "noise": {"position_std_m": "position_std", "velocity_std_m": "velocity_std", "gyro_std_rads": "gyro_std"},
    "estimator": {},
    "train": {"adam_eps": "eps"},
    "gp": {},
    "selection": {},
    "experiment": {
        "speed_mps": "speed",
        "rise_m": "rise",
        "hover_hold_s": "hover_hold",
        "no_wind_margin_m": "no_wind_margin",
    },
}

FEATURE_MODES = ("innovation", "raw")
LOSS_REFERENCES = ("setpoint", "truth", "truth_with_disturbance")
EMBEDDINGS = ("code", "angle")
TRAJECTORY_KINDS = ("hover", "square", "figure8", "line")
CONTROLLER_KINDS = ("base", "one", "budget", "full")
CLASSIFIERS = ("oracle", "innovation")

DEFAULT_LAYOUTS = {
    "1": ("headwind-high", "no-wind", "left_crosswind-low", "left_crosswind-high"),
    "2": ("right_crosswind-high", "tailwind-low", "no-wind", "headwind-low"),
    "3": ("updraft-high", "downdraft-low", "updraft-low", "downdraft-high"),
}


def _positive(section: str, **values):
    for name, value in values.items():
        if not value > 0.0:
            raise ValueError(f"{section}.{name} must be positive, got {value}")


@dataclass(frozen=True)
class WindConfig:
    """Force statistics of the 13 wind contexts.

    ``contexts`` holds optional per-context overrides, each a mapping with
    ``direction``, ``level`` and any of ``mean_force_n``, ``turbulence_std_n``.
    """

    low_force: float = 0.08
    high_force: float = 0.16
    turbulence_std: float = 0.01
    torque_ratio: float = 1e-3
    no_wind_turbulence_std: float = 0.0
    contexts: tuple = ()

    def __post_init__(self):
        _positive("wind", low_force=self.low_force, high_force=self.high_force)
        if self.turbulence_std < 0.0 or self.torque_ratio < 0.0 or self.no_wind_turbulence_std < 0.0:
            raise ValueError("wind turbulence and torque ratio must be non-negative")
        object.__setattr__(self, "contexts", tuple(dict(c) for c in self.contexts))
        for override in self.contexts:
            unknown = set(override) - {"direction", "level", "mean_force_n", "turbulence_std_n"}
            if unknown:
                raise ValueError(f"unknown key(s) in wind.contexts: {sorted(unknown)}")
            if "direction" not in override or "level" not in override:
                raise ValueError("wind.contexts entries need a direction and a level")

    def _override(self, key: tuple[int, int]) -> dict:
        for override in self.contexts:
            if (parse_direction(override["direction"]), parse_level(override["level"])) == key:
                return override
        return {}

    def pool(self) -> list[WindContext]:
        """The 13 contexts in lexicographic (direction, level) order."""
        contexts = []
        for direction, level in context_pairs():
            override = self._override((direction, level))
            contexts.append(
                make_context(
                    direction,
                    level,
                    low_force=self.low_force,
                    high_force=self.high_force,
                    turbulence_std=override.get("turbulence_std_n", self.turbulence_std),
                    torque_ratio=self.torque_ratio,
                    mean_force=override.get("mean_force_n"),
                    no_wind_turbulence_std=override.get("turbulence_std_n", self.no_wind_turbulence_std),
                )
            )
        return contexts


@dataclass(frozen=True)
class NoiseConfig:
    position_std: float = 0.005
    velocity_std: float = 0.01
    gyro_std: float = 0.005

    def __post_init__(self):
        if min(self.position_std, self.velocity_std, self.gyro_std) < 0.0:
            raise ValueError("noise standard deviations must be non-negative")

    @property
    def measurement_std(self) -> np.ndarray:
        return np.array([self.position_std] * 3 + [self.velocity_std] * 3)


@dataclass(frozen=True)
class EstimatorConfig:
    """MHE and EKF settings.

    Attributes:
        horizon: MHE window length N.
        dt: Control and estimation period in s (50 Hz).
        max_iterations: Gauss-Newton iteration cap.
        tolerance: Gauss-Newton relative cost tolerance.
        rotational: Adds the (Omega, tau) MHE with fixed weights.
        rotational_weights: ``p`` (6), ``r`` (3), ``q`` (6) diagonals and ``gamma``.
        ekf_process_std: Per-state process noise std of the EKF baseline.
        ekf_prior_std: Initial state std of the EKF baseline.
    """

    horizon: int = 10
    dt: float = 0.02
    max_iterations: int = 50
    tolerance: float = 1e-10
    rotational: bool = False
    rotational_weights: dict = field(
        default_factory=lambda: {"p": [1.0] * 6, "r": [1.0] * 3, "q": [10.0] * 3 + [1e3] * 3, "gamma": 0.99}
    )
    ekf_process_std: tuple = (1e-3,) * 3 + (1e-2,) * 3 + (2e-3,) * 3
    ekf_prior_std: tuple = (0.05,) * 6 + (0.1,) * 3

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"estimator.horizon must be at least 1, got {self.horizon}")
        if not (0.0 < self.dt <= 0.1):
            raise ValueError(f"estimator.dt must lie in (0, 0.1], got {self.dt}")
        if self.max_iterations < 1:
            raise ValueError("estimator.max_iterations must be at least 1")
        _positive("estimator", tolerance=self.tolerance)
        object.__setattr__(self, "ekf_process_std", tuple(float(s) for s in self.ekf_process_std))
        object.__setattr__(self, "ekf_prior_std", tuple(float(s) for s in self.ekf_prior_std))
        if len(self.ekf_process_std) != 9 or len(self.ekf_prior_std) != 9:
            raise ValueError("EKF standard deviations need 9 entries")
        self.rotational_mhe_weights()

    def rotational_mhe_weights(self) -> MheWeights:
        unknown = set(self.rotational_weights) - {"p", "r", "q", "gamma"}
        if unknown:
            raise ValueError(f"unknown key(s) in estimator.rotational_weights: {sorted(unknown)}")
        w = self.rotational_weights
        return MheWeights(p_diag=w["p"], r_diag=w["r"], q_diag=w["q"], gamma=w.get("gamma", 1.0))


@dataclass(frozen=True)
class TrainConfig:
    """Training of one weight network in one context.

    Attributes:
        learning_rate: Adam step size.
        beta1, beta2, eps: Adam moment constants.
        threshold: Convergence threshold on successive episode losses; ``inf``
            stops after one episode.
        max_episodes: Episode cap; reaching it flags the run as not converged.
        episode_steps: Control steps per episode.
        loss_weight_diag: Diagonal of W over (p, v, F_dist); PSD.
        squared_norm: Uses x^T W x instead of sqrt(x^T W x) per stage.
        features: Network input mode, ``innovation`` or ``raw``.
        loss_reference: ``setpoint``, ``truth`` or ``truth_with_disturbance``.
        initial_weights: MHE weights the untrained network emits: ``p``, ``r``, ``q`` diagonals and ``gamma``.
        init_scale: Half-width of the uniform weight initialisation.
        samples_per_episode: Seeded line passes per episode; the same passes are flown every episode.
        backtracks: Halvings of an episode update tried before it is undone.
        seed: Base seed.
    """

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    threshold: float = 1e-3
    max_episodes: int = 20
    episode_steps: int = 250
    loss_weight_diag: tuple = (1.0,) * 6 + (0.0,) * 3
    squared_norm: bool = False
    features: str = "innovation"
    loss_reference: str = "setpoint"
    initial_weights: dict = field(
        default_factory=lambda: {
            "p": [4.0] * 3 + [1.0] * 3 + [0.25] * 3,
            "r": [4.0] * 3 + [1.0] * 3,
            "q": [100.0] * 3 + [2.8] * 3 + [4.0] * 3,
            "gamma": 0.99,
        }
    )
    init_scale: float = 0.05
    samples_per_episode: int = 1
    backtracks: int = 8
    seed: int = 0

    def __post_init__(self):
        _positive("train", learning_rate=self.learning_rate, eps=self.eps, threshold=self.threshold)
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("train.beta1 and train.beta2 must lie in [0, 1)")
        if self.max_episodes < 1 or self.episode_steps < 1 or self.samples_per_episode < 1:
            raise ValueError("train.max_episodes, episode_steps and samples_per_episode must be at least 1")
        if self.backtracks < 0:
            raise ValueError("train.backtracks must be non-negative")
        object.__setattr__(self, "loss_weight_diag", tuple(float(w) for w in self.loss_weight_diag))
        if len(self.loss_weight_diag) != 9:
            raise ValueError("train.loss_weight_diag needs 9 entries")
        if min(self.loss_weight_diag) < 0.0 or max(self.loss_weight_diag) <= 0.0:
            raise ValueError("train.loss_weight_diag must be non-negative and not all zero")
        if self.features not in FEATURE_MODES:
            raise ValueError(f"train.features must be one of {FEATURE_MODES}")
        if self.loss_reference not in LOSS_REFERENCES:
            raise ValueError(f"train.loss_reference must be one of {LOSS_REFERENCES}")
        if self.init_scale < 0.0:
            raise ValueError("train.init_scale must be non-negative")
        self.initial_mhe_weights()

    @property
    def W(self) -> np.ndarray:
        return np.diag(self.loss_weight_diag)

    @property
    def converges_immediately(self) -> bool:
        return math.isinf(self.threshold)

    def initial_mhe_weights(self) -> MheWeights:
        unknown = set(self.initial_weights) - {"p", "r", "q", "gamma"}
        if unknown:
            raise ValueError(f"unknown key(s) in train.initial_weights: {sorted(unknown)}")
        w = self.initial_weights
        return MheWeights(p_diag=w["p"], r_diag=w["r"], q_diag=w["q"], gamma=w["gamma"])


@dataclass(frozen=True)
class GpConfig:
    length_scale: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 1e-6
    prior_mean: float = 0.0
    embedding: str = "code"

    def __post_init__(self):
        _positive("gp", length_scale=self.length_scale, signal_variance=self.signal_variance)
        if self.noise_variance < 0.0:
            raise ValueError("gp.noise_variance must be non-negative")
        if self.embedding not in EMBEDDINGS:
            raise ValueError(f"gp.embedding must be one of {EMBEDDINGS}")


@dataclass(frozen=True)
class SelectionConfig:
    beta: float = 1.0
    alpha: float = 1e-3
    no_model_floor: float = -1e3
    budget: int = 3

    def __post_init__(self):
        if self.beta < 0.0 or self.alpha < 0.0:
            raise ValueError("selection.beta and selection.alpha must be non-negative")
        if not 1 <= self.budget <= len(context_pairs()):
            raise ValueError(f"selection.budget must lie in [1, {len(context_pairs())}], got {self.budget}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Evaluation suite.

    Attributes:
        envs: Environment ids, keys of ``layouts``.
        trajectories: Trajectory kinds flown in every environment.
        controllers: Controller kinds compared.
        seeds: One run per seed and cell.
        workers: Worker processes for pool evaluation and suite cells.
        speed: Travel speed of square and figure-8 trajectories (m/s).
        rise: Take-off height (m).
        hover_hold: Hover duration after the rise (s).
        no_wind_margin: Border of the flight volume without wind (m).
        eval_samples: Seeded passes averaged when evaluating a model in a context.
        classifier: ``oracle`` or ``innovation`` test-time context classification.
        layouts: Per environment the context names of the four quadrants
            (x<0,y<0), (x>=0,y<0), (x<0,y>=0), (x>=0,y>=0).
    """

    envs: tuple = ("1", "2", "3")
    trajectories: tuple = ("hover", "square", "figure8")
    controllers: tuple = CONTROLLER_KINDS
    seeds: tuple = (0, 1, 2, 3, 4)
    workers: int = 1
    speed: float = 0.3
    rise: float = 0.5
    hover_hold: float = 5.0
    no_wind_margin: float = 0.0
    eval_samples: int = 5
    classifier: str = "oracle"
    layouts: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_LAYOUTS.items()})

    def __post_init__(self):
        object.__setattr__(self, "envs", tuple(str(e) for e in self.envs))
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        object.__setattr__(self, "controllers", tuple(self.controllers))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "layouts", {str(k): list(v) for k, v in self.layouts.items()})
        for kind in self.trajectories:
            if kind not in TRAJECTORY_KINDS:
                raise ValueError(f"unknown trajectory kind {kind!r}")
        for kind in self.controllers:
            if kind not in CONTROLLER_KINDS:
                raise ValueError(f"unknown controller kind {kind!r}")
        for env in self.envs:
            if env not in self.layouts:
                raise ValueError(f"environment {env!r} has no layout")
        for env, layout in self.layouts.items():
            if len(layout) != 4:
                raise ValueError(f"layout of environment {env!r} needs four quadrant contexts")
        if self.classifier not in CLASSIFIERS:
            raise ValueError(f"experiment.classifier must be one of {CLASSIFIERS}")
        if not self.seeds:
            raise ValueError("experiment.seeds must not be empty")
        if self.workers < 1 or self.eval_samples < 1:
            raise ValueError("experiment.workers and experiment.eval_samples must be at least 1")
        _positive("experiment", speed=self.speed, rise=self.rise, hover_hold=self.hover_hold)
        if self.no_wind_margin < 0.0:
            raise ValueError("experiment.no_wind_margin must be non-negative")


SECTIONS = {
    "params": QuadParams,
    "wind": WindConfig,
    "control": ControlGains,
    "noise": NoiseConfig,
    "estimator": EstimatorConfig,
    "train": TrainConfig,
    "gp": GpConfig,
    "selection": SelectionConfig,
    "experiment": ExperimentConfig,
}


@dataclass(frozen=True)
class Config:
    params: QuadParams = field(default_factory=QuadParams)
    wind: WindConfig = field(default_factory=WindConfig)
    control: ControlGains = field(default_factory=ControlGains)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gp: GpConfig = field(default_factory=GpConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def pool(self) -> list[WindContext]:
        return self.wind.pool()

    def context(self, key) -> WindContext:
        return find_context(self.pool(), key)

    def with_section(self, name: str, **changes) -> "Config":
        """Copy with some fields of one section replaced."""
        return replace(self, **{name: replace(getattr(self, name), **changes)})


def _section_from_json(name: str, data: dict):
    if not isinstance(data, dict):
        raise ValueError(f"config section {name!r} must be an object")
    cls = SECTIONS[name]
    aliases = JSON_ALIASES[name]
    names = {f.name for f in fields(cls)}
    values = {}
    for key, value in data.items():
        target = aliases.get(key, key)
        if target not in names or (key not in aliases and key in aliases.values()):
            raise ValueError(f"unknown config key {name}.{key}")
        values[target] = tuple(value) if isinstance(value, list) and target != "contexts" else value
    if name == "wind" and "contexts" in values:
        values["contexts"] = tuple(values["contexts"])
    return cls(**values)


def config_from_dict(data: dict) -> Config:
    """Builds a validated configuration from a JSON-shaped mapping; missing keys keep their defaults."""
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")
    return Config(**{name: _section_from_json(name, section) for name, section in data.items()})


def config_to_dict(config: Config) -> dict:
    """JSON-shaped mapping of a configuration, with the documented key names."""
    result = {}
    for name in SECTIONS:
        reverse = {field_name: key for key, field_name in JSON_ALIASES[name].items()}
        section = asdict(getattr(config, name))
        result[name] = {reverse.get(key, key): _plain(value) for key, value in section.items()}
    return result


def _plain(value):
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def canonical_json(config: Config) -> str:
    return json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))


def config_hash(config: Config) -> str:
    """SHA-256 of the canonical JSON of the resolved configuration."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def _parse_floats(data):
    # JSON has no infinity literal; "inf" strings are accepted for thresholds.
    if isinstance(data, dict):
        return {k: _parse_floats(v) for k, v in data.items()}
    if isinstance(data, list):
        return [_parse_floats(v) for v in data]
    if data in ("inf", "Infinity"):
        return math.inf
    if data in ("-inf", "-Infinity"):
        return -math.inf
    return data


def load_config(path: Optional[os.PathLike] = None, overrides: Optional[dict] = None) -> Config:
    """Reads a JSON configuration and resolves it over the defaults.

    Args:
        path: JSON file; the defaults are used when omitted.
        overrides: JSON-shaped mapping applied on top of the file.

    Raises:
        ValueError: For unknown keys or values violating an invariant.
    """
    data = {}
    if path is not None:
        with open(Path(path), "r", encoding="utf-8") as handle:
            data = json.load(handle)
        logger.debug("loaded configuration from %s", path)
    for name, section in (overrides or {}).items():
        data.setdefault(name, {})
        data[name] = {**data[name], **section}
    return config_from_dict(_parse_floats(data))
