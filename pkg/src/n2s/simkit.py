"""Environment-side pieces for policy training: rewards, filters, delays, randomization, augmentation."""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np
from skimage import color as skcolor

from .geometry import rotation_between
from .ingest import quat_to_matrix

TARGET_SPEED = 0.3
GOAL_RADIUS = 0.25


# --- joints ----------------------------------------------------------------


@dataclass(frozen=True)
class JointSpec:
    name: str
    reference_pose: float
    range: tuple[float, float]

    def __post_init__(self) -> None:
        lo, hi = self.range
        if not lo < hi:
            raise ValueError(f"joint {self.name}: empty range {self.range}")

    @property
    def span(self) -> float:
        return self.range[1] - self.range[0]

    @property
    def reference_in_range(self) -> bool:
        # four hip joints in the published table have references outside their limits
        return self.range[0] <= self.reference_pose <= self.range[1]


def load_joint_specs(task: str = "navigation") -> list[JointSpec]:
    data = json.loads(resources.files("n2s").joinpath("data/joints.json").read_text())
    overrides = data["ball_task_ranges"] if task == "ball_pushing" else {}
    return [
        JointSpec(j["name"], float(j["reference"]), tuple(overrides.get(j["name"], j["range"])))
        for j in data["joints"]
    ]


# --- frames ---------------------------------------------------------------------


def gravity_aligned_frame(orientation, gravity) -> np.ndarray:
    """Minimal rotation ``R`` with ``R @ (-z) = gravity`` (both in the body frame).

    Vectors in the gravity-aligned frame are ``R.T @ v_body``. The antipodal
    case (gravity along +z) rotates by pi about the body x axis.
    ``orientation`` (wxyz) is validated but does not enter the result.
    """
    q = np.asarray(orientation, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1) > 1e-6:
        raise ValueError("orientation must be a unit quaternion")
    g = np.asarray(gravity, dtype=np.float64)
    if abs(np.linalg.norm(g) - 1) > 1e-6:
        raise ValueError("gravity must be a unit vector")
    return rotation_between((0.0, 0.0, -1.0), g)


def gravity_aligned_orientation(orientation, gravity) -> np.ndarray:
    """World-from-aligned-frame rotation: the body orientation pre-rotated by ``R``."""
    return quat_to_matrix(orientation) @ gravity_aligned_frame(orientation, gravity)


# --- rewards --------------------------------------------------------------------


@dataclass(frozen=True)
class RewardInputs:
    omega_yaw: float = 0.0
    q: Sequence[float] | None = None
    v_feet: Sequence[float] = (0.0, 0.0, 0.0)
    x_goal: Sequence[float] = (0.0, 0.0)
    d_ball: float = 0.0
    d_goal: float = 0.0
    v_ball: float = 0.0
    v_goal: float = 0.0

    def __post_init__(self) -> None:
        if self.d_ball < 0 or self.d_goal < 0:
            raise ValueError("distances must be non-negative")


@dataclass(frozen=True)
class RewardConfig:
    task: str = "navigation"
    pose_sign: float = -1.0
    yaw_as_speed: bool = True
    weights: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.task not in DEFAULT_WEIGHTS:
            raise ValueError(f"unknown task {self.task!r}")
        unknown = set(self.weights) - set(DEFAULT_WEIGHTS[self.task])
        if unknown:
            raise ValueError(f"unknown reward weight {sorted(unknown)[0]!r}")

    def weight(self, name: str) -> float:
        return float(self.weights.get(name, DEFAULT_WEIGHTS[self.task][name]))

    @classmethod
    def from_dict(cls, d: dict) -> "RewardConfig":
        unknown = set(d) - {"task", "pose_sign", "yaw_as_speed", "weights"}
        if unknown:
            raise ValueError(f"unknown reward config field {sorted(unknown)[0]!r}")
        return cls(**d)


DEFAULT_WEIGHTS = {
    "navigation": {"turn": 1.0, "speed": 0.5, "pose": 0.5, "navigate_sparse": 1.0, "navigate": 0.25},
    "ball_pushing": {"turn": 1.0, "speed": 0.5, "pose": 0.5, "ball": 1.0},
}


def r_turn(omega_yaw: float, as_speed: bool = True) -> float:
    w = abs(omega_yaw) if as_speed else omega_yaw
    return -1.0 if w > math.pi else 0.0


def r_pose(q, joints: Sequence[JointSpec]) -> float:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (len(joints),):
        raise ValueError(f"expected {len(joints)} joint positions, got {q.shape}")
    ref = np.array([j.reference_pose for j in joints])
    span = np.array([j.span for j in joints])
    return float(np.sqrt(np.mean(((q - ref) / span) ** 2)))


def r_speed(v_feet) -> float:
    vx = float(np.asarray(v_feet, dtype=np.float64)[0])
    return (TARGET_SPEED - abs(vx - TARGET_SPEED)) / TARGET_SPEED


def r_navigate_sparse(x_goal) -> float:
    return 1.0 if np.linalg.norm(np.asarray(x_goal, dtype=np.float64)[:2]) < GOAL_RADIUS else 0.0


def r_navigate(v_feet, x_goal) -> float:
    v = np.asarray(v_feet, dtype=np.float64)[:2]
    x = np.asarray(x_goal, dtype=np.float64)[:2]
    dist = np.linalg.norm(x)
    if dist <= 1e-6:
        return 1.0
    return float((TARGET_SPEED - np.linalg.norm(v - TARGET_SPEED * x / dist)) / TARGET_SPEED)


def rho(d, v):
    d = np.asarray(d, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    ed = np.exp(-d * d)
    out = ed * np.exp(-v * v) + (1 - ed) * (1 - np.exp(-np.minimum(0.0, v) ** 2))
    return float(out) if out.ndim == 0 else out


def r_ball(d_goal, v_goal, d_ball, v_ball):
    rg = rho(d_goal, v_goal)
    return rg + (1 - rg) * rho(d_ball, v_ball) / 2


def reward_components(inputs: RewardInputs, config: RewardConfig, joints: Sequence[JointSpec] | None = None) -> dict:
    joints = joints if joints is not None else load_joint_specs(config.task)
    comps = {
        "turn": r_turn(inputs.omega_yaw, config.yaw_as_speed),
        "speed": r_speed(inputs.v_feet),
        "pose": r_pose(inputs.q, joints) if inputs.q is not None else 0.0,
    }
    if config.task == "navigation":
        comps["navigate_sparse"] = r_navigate_sparse(inputs.x_goal)
        comps["navigate"] = r_navigate(inputs.v_feet, inputs.x_goal)
    else:
        comps["ball"] = float(r_ball(inputs.d_goal, inputs.v_goal, inputs.d_ball, inputs.v_ball))
    return comps


def total_reward(task: str, components: dict, config: RewardConfig | None = None) -> float:
    """Weighted sum of reward components; the pose term enters with ``config.pose_sign``."""
    config = config or RewardConfig(task=task)
    if config.task != task:
        config = RewardConfig(task, config.pose_sign, config.yaw_as_speed, config.weights)
    names = DEFAULT_WEIGHTS[task]
    unknown = set(components) - set(names)
    if unknown:
        raise ValueError(f"unknown reward component {sorted(unknown)[0]!r} for task {task}")
    total = 0.0
    for name in names:
        sign = config.pose_sign if name == "pose" else 1.0
        total += sign * config.weight(name) * float(components.get(name, 0.0))
    return total


# --- control and sensing ----------------------------------------------------------


def exponential_filter(prev_output, command, strength: float = 0.8):
    return strength * np.asarray(prev_output) + (1 - strength) * np.asarray(command)


class DelayLine:
    """Sensor buffer returning the newest sample older than ``delay + jitter``."""

    def __init__(self, delay_ms: float, jitter_ms: float = 0.0, seed: int | None = 0):
        if delay_ms < 0 or jitter_ms < 0:
            raise ValueError("delay and jitter must be non-negative")
        self.delay_ms = delay_ms
        self.jitter_ms = jitter_ms
        self._rng = np.random.default_rng(seed)
        self._times: list[float] = []
        self._values: list = []

    def push(self, time_ms: float, value) -> None:
        if self._times and time_ms < self._times[-1]:
            raise ValueError("samples must be pushed in time order")
        self._times.append(float(time_ms))
        self._values.append(value)

    def query(self, time_ms: float):
        if not self._times:
            raise ValueError("empty delay line")
        jitter = self._rng.uniform(0.0, self.jitter_ms) if self.jitter_ms > 0 else 0.0
        cutoff = time_ms - (self.delay_ms + jitter)
        k = bisect.bisect_right(self._times, cutoff + 1e-9) - 1
        return self._values[max(k, 0)]


def delay_line(samples, delay_ms: float, jitter_ms: float, query_time: float, seed: int | None = 0):
    """One-shot query over ``[(time_ms, value), ...]`` ordered by time."""
    line = DelayLine(delay_ms, jitter_ms, seed)
    for t, v in samples:
        line.push(t, v)
    return line.query(query_time)


# --- domain randomization ----------------------------------------------------------

RANDOMIZATION_RANGES = {
    "sensor_delay": (10.0, 50.0),
    "jitter": (5.0, 5.0),
    "added_mass": (0.0, 0.5),
    "imu_shift": (0.0, 0.005),
    "imu_tilt": (0.0, math.radians(2.0)),
    "ball_mass": (0.5, 0.9),
    "ball_radius": (0.115, 0.125),
}
# torso half extents for the attachment point of the added mass (m)
TORSO_HALF_EXTENTS = (0.05, 0.07, 0.06)


@dataclass(frozen=True)
class EpisodeRandomization:
    sensor_delay: float
    jitter: float
    added_mass: float
    mass_position: tuple[float, float, float]
    imu_shift: tuple[float, float, float]
    imu_tilt: float
    imu_tilt_axis: tuple[float, float, float]
    ball_mass: float | None = None
    ball_radius: float | None = None
    # random pushes are not parameterized: their distribution is unspecified
    pushes: None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def sample_randomization(task: str, seed: int | None) -> EpisodeRandomization:
    if task not in DEFAULT_WEIGHTS:
        raise ValueError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    R = RANDOMIZATION_RANGES

    def draw(name):
        return float(rng.uniform(*R[name]))

    delay, jitter, mass = draw("sensor_delay"), draw("jitter"), draw("added_mass")
    position = tuple((rng.uniform(-1, 1, 3) * TORSO_HALF_EXTENTS).tolist())
    shift = tuple((_unit_vector(rng) * draw("imu_shift")).tolist())
    tilt = draw("imu_tilt")
    axis = tuple(_unit_vector(rng).tolist())
    ball_mass = ball_radius = None
    if task == "ball_pushing":
        ball_mass, ball_radius = draw("ball_mass"), draw("ball_radius")
    return EpisodeRandomization(delay, jitter, mass, position, shift, tilt, axis, ball_mass, ball_radius)


# --- image augmentation ---------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    brightness: float = 0.0
    hue: float = 0.0
    contrast: float = 1.0
    saturation: float = 1.0
    translation: tuple[float, float] = (0.0, 0.0)  # fraction of (width, height)

    def __post_init__(self) -> None:
        checks = [
            ("brightness", self.brightness, -32 / 255, 32 / 255),
            ("contrast", self.contrast, 0.5, 1.5),
            ("saturation", self.saturation, 0.5, 1.5),
            ("translation x", self.translation[0], -0.05, 0.05),
            ("translation y", self.translation[1], -0.05, 0.05),
        ]
        for name, value, lo, hi in checks:
            if not lo - 1e-12 <= value <= hi + 1e-12:
                raise ValueError(f"{name} {value} outside [{lo}, {hi}]")
        if not math.isfinite(self.hue):
            raise ValueError("hue must be finite")

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentParams":
        return cls(
            float(rng.uniform(-32 / 255, 32 / 255)),
            float(rng.uniform(-1 / 24, 1 / 24)),
            float(rng.uniform(0.5, 1.5)),
            float(rng.uniform(0.5, 1.5)),
            (float(rng.uniform(-0.05, 0.05)), float(rng.uniform(-0.05, 0.05))),
        )


def augment_image(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """brightness -> hue -> contrast -> saturation -> translation, clamped to [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if params.brightness:
        img = np.clip(img + params.brightness, 0.0, 1.0)
    turns = params.hue % 1.0
    if turns:
        hsv = skcolor.rgb2hsv(img)
        hsv[..., 0] = (hsv[..., 0] + turns) % 1.0
        img = skcolor.hsv2rgb(hsv)
    if params.contrast != 1.0:
        mean = img.mean(axis=(0, 1), keepdims=True)
        img = np.clip(mean + params.contrast * (img - mean), 0.0, 1.0)
    if params.saturation != 1.0:
        hsv = skcolor.rgb2hsv(img)
        hsv[..., 1] = np.clip(hsv[..., 1] * params.saturation, 0.0, 1.0)
        img = skcolor.hsv2rgb(hsv)
    h, w = img.shape[:2]
    dx, dy = int(round(params.translation[0] * w)), int(round(params.translation[1] * h))
    if dx or dy:
        pad = ((abs(dy), abs(dy)), (abs(dx), abs(dx))) + ((0, 0),) * (img.ndim - 2)
        padded = np.pad(img, pad, mode="edge")
        y0, x0 = abs(dy) - dy, abs(dx) - dx
        img = padded[y0:y0 + h, x0:x0 + w]
    return np.clip(img, 0.0, 1.0)
