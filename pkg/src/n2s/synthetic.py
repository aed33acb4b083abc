"""Analytic room scenes: ray-traced posed images and exact signed distances.

Serves as ground truth for reconstruction and geometry checks. Surfaces are
ambient-lit, so a pixel's color is the albedo of the first surface hit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .ingest import CameraIntrinsics, Pose, PosedImage, SceneDataset


@dataclass(frozen=True)
class Obstacle:
    type: str  # "sphere" or "box"
    center: tuple[float, float, float]
    radius: float = 0.0
    half_extents: tuple[float, float, float] = (0.0, 0.0, 0.0)
    albedo: tuple[float, float, float] = (0.8, 0.4, 0.1)
    albedo2: tuple[float, float, float] | None = None
    checker: float = 0.0

    def __post_init__(self) -> None:
        if self.type == "sphere" and self.radius <= 0:
            raise ValueError("sphere obstacle needs radius > 0")
        if self.type == "box" and min(self.half_extents) <= 0:
            raise ValueError("box obstacle needs positive half_extents")
        if self.type not in ("sphere", "box"):
            raise ValueError(f"unknown obstacle type '{self.type}'")


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Box room with the floor at z = 0, checkered walls and primitive obstacles.

    ``frame_*`` fields place the whole scene in an arbitrary similarity frame,
    mimicking the unknown frame of an SfM reconstruction:
    ``x_scene = frame_scale * R(axis, angle) @ x_room + frame_translation``.
    """

    room_half_extents: tuple[float, float, float] = (1.6, 1.6, 0.8)
    checker_frequency: tuple[float, ...] = (2.5, 2.5, 3.0, 3.0, 3.0, 3.0)
    surface_colors: tuple[tuple[tuple[float, float, float], tuple[float, float, float]], ...] = (
        ((0.55, 0.50, 0.45), (0.30, 0.28, 0.25)),  # floor
        ((0.85, 0.85, 0.80), (0.65, 0.65, 0.62)),  # ceiling
        ((0.80, 0.30, 0.25), (0.95, 0.75, 0.60)),  # -x wall
        ((0.25, 0.45, 0.75), (0.70, 0.80, 0.95)),  # +x wall
        ((0.30, 0.65, 0.35), (0.75, 0.90, 0.65)),  # -y wall
        ((0.70, 0.60, 0.20), (0.95, 0.90, 0.55)),  # +y wall
    )
    obstacles: tuple[Obstacle, ...] = (
        Obstacle("sphere", (0.25, -0.2, 0.3), radius=0.3, albedo=(0.9, 0.45, 0.1)),
        Obstacle("box", (-0.35, 0.35, 0.2), half_extents=(0.2, 0.25, 0.2), albedo=(0.2, 0.3, 0.6),
                 albedo2=(0.9, 0.9, 0.9), checker=5.0),
    )
    ambient: float = 1.0
    orbit_center: tuple[float, float, float] = (0.0, 0.0, 0.3)
    orbit_radius: float = 1.05
    orbit_height: float = 0.55
    orbit_height_jitter: float = 0.15
    look_jitter: float = 0.15
    width: int = 64
    height: int = 64
    fov_degrees: float = 70.0
    supersample: int = 3
    frame_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    frame_angle_degrees: float = 0.0
    frame_scale: float = 1.0
    frame_translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if min(self.room_half_extents) <= 0:
            raise ValueError("room_half_extents must be positive")
        if len(self.checker_frequency) != 6 or len(self.surface_colors) != 6:
            raise ValueError("need six checker frequencies and surface color pairs")
        if self.width < 1 or self.height < 1 or self.supersample < 1:
            raise ValueError("resolution and supersample must be >= 1")
        if not 0 < self.fov_degrees < 180:
            raise ValueError("fov_degrees must be in (0, 180)")
        if self.frame_scale <= 0:
            raise ValueError("frame_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        known = set(cls.__dataclass_fields__)
        for key in d:
            if key not in known:
                raise ValueError(f"unknown scene spec key '{key}'")
        d = dict(d)
        if "obstacles" in d:
            d["obstacles"] = tuple(_obstacle_from_dict(o) for o in d["obstacles"])
        for key, value in d.items():
            if isinstance(value, list) and key != "obstacles":
                d[key] = _tuplify(value)
        return cls(**d)


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, (list, tuple)) else v


def _obstacle_from_dict(o: dict) -> Obstacle:
    o = {k: _tuplify(v) for k, v in o.items()}
    return Obstacle(**o)


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation with OpenCV axes looking from ``eye`` at ``target``."""
    z = np.asarray(target, dtype=np.float64) - np.asarray(eye, dtype=np.float64)
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (0.0, 1.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


class SyntheticScene:
    """Ray tracer and SDF for a :class:`SyntheticSceneSpec`, in room coordinates."""

    def __init__(self, spec: SyntheticSceneSpec):
        self.spec = spec
        hx, hy, hz = spec.room_half_extents
        self.room_lo = np.array([-hx, -hy, 0.0])
        self.room_hi = np.array([hx, hy, 2 * hz])
        self.frame_rotation = axis_angle_matrix(spec.frame_axis, math.radians(spec.frame_angle_degrees))
        self.frame_scale = spec.frame_scale
        self.frame_translation = np.asarray(spec.frame_translation, dtype=np.float64)

    # room <-> scene frame
    def to_scene(self, x: np.ndarray) -> np.ndarray:
        return self.frame_scale * x @ self.frame_rotation.T + self.frame_translation

    def to_room(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.frame_translation) / self.frame_scale) @ self.frame_rotation

    def camera(self) -> CameraIntrinsics:
        s = self.spec
        f = 0.5 * s.width / math.tan(math.radians(s.fov_degrees) / 2)
        return CameraIntrinsics(s.width, s.height, f, f, s.width / 2, s.height / 2)

    # --- geometry ---------------------------------------------------------

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest hit distance and surface id for room-frame rays.

        Surface ids 0..5 are floor, ceiling, -x, +x, -y, +y walls; 6+ index obstacles.
        """
        n = len(origins)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t_lo = (self.room_lo - origins) * inv
            t_hi = (self.room_hi - origins) * inv
        t_exit_axis = np.where(dirs > 0, t_hi, np.where(dirs < 0, t_lo, np.inf))
        axis = np.argmin(t_exit_axis, axis=1)
        t_best = t_exit_axis[np.arange(n), axis]
        positive = dirs[np.arange(n), axis] > 0
        # axis 2 (z) -> floor/ceiling ids 0/1; axis 0 -> 2/3; axis 1 -> 4/5
        base = np.array([2, 4, 0])[axis]
        surface = base + positive.astype(int)
        for k, ob in enumerate(self.spec.obstacles):
            if ob.type == "sphere":
                t = ray_sphere(origins, dirs, np.asarray(ob.center), ob.radius)
            else:
                t = ray_box(origins, dirs, np.asarray(ob.center), np.asarray(ob.half_extents))
            closer = t < t_best
            t_best = np.where(closer, t, t_best)
            surface = np.where(closer, 6 + k, surface)
        return t_best, surface

    def shade(self, points: np.ndarray, surface: np.ndarray) -> np.ndarray:
        s = self.spec
        color = np.zeros((len(points), 3))
        # in-plane coordinate pairs for floor, ceiling, x-walls, y-walls
        planes = {0: (0, 1), 1: (0, 1), 2: (1, 2), 3: (1, 2), 4: (0, 2), 5: (0, 2)}
        for sid in range(6):
            m = surface == sid
            if not m.any():
                continue
            a, b = planes[sid]
            f = s.checker_frequency[sid]
            parity = (np.floor(points[m, a] * f) + np.floor(points[m, b] * f)) % 2
            c0, c1 = (np.asarray(c) for c in s.surface_colors[sid])
            color[m] = np.where(parity[:, None] > 0, c1, c0)
        for k, ob in enumerate(s.obstacles):
            m = surface == 6 + k
            if not m.any():
                continue
            c0 = np.asarray(ob.albedo)
            if ob.albedo2 is not None and ob.checker > 0:
                p = points[m] - np.asarray(ob.center)
                if ob.type == "box":
                    # drop the face-normal coordinate, which sits on a checker boundary
                    normal_axis = np.argmax(np.abs(p) / np.asarray(ob.half_extents), axis=1)
                    p = np.where(np.arange(3) == normal_axis[:, None], 0.0, p)
                parity = np.floor(p * ob.checker).sum(axis=1) % 2
                color[m] = np.where(parity[:, None] > 0, np.asarray(ob.albedo2), c0)
            else:
                color[m] = c0
        return np.clip(color * s.ambient, 0, 1)

    def trace(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t, surface = self.intersect(origins, dirs)
        return self.shade(origins + dirs * t[:, None], surface), t

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Signed distance to solid matter (negative inside walls or obstacles), room frame."""
        points = np.asarray(points, dtype=np.float64)
        center = 0.5 * (self.room_lo + self.room_hi)
        half = 0.5 * (self.room_hi - self.room_lo)
        d = -box_sdf(points, center, half)
        for ob in self.spec.obstacles:
            if ob.type == "sphere":
                d = np.minimum(d, np.linalg.norm(points - np.asarray(ob.center), axis=-1) - ob.radius)
            else:
                d = np.minimum(d, box_sdf(points, np.asarray(ob.center), np.asarray(ob.half_extents)))
        return d

    def scene_sdf(self, points: np.ndarray) -> np.ndarray:
        """SDF evaluated at scene-frame points, in scene units."""
        return self.sdf(self.to_room(np.asarray(points, dtype=np.float64))) * self.frame_scale

    def density(self, points: np.ndarray, beta: float = 0.01, peak: float = 100.0) -> np.ndarray:
        """Smooth occupancy density at scene-frame points; equals ``peak / 2`` on surfaces."""
        d = self.scene_sdf(points)
        return peak / (1.0 + np.exp(np.clip(d / beta, -60, 60)))

    def scene_bounds(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64)
        corners = self.room_lo + corners * (self.room_hi - self.room_lo)
        pts = self.to_scene(corners)
        return tuple(pts.min(0).tolist()), tuple(pts.max(0).tolist())

    # --- cameras and images -------------------------------------------------

    def orbit_poses(self, count: int, rng: np.random.Generator) -> list[Pose]:
        s = self.spec
        poses = []
        center = np.asarray(s.orbit_center, dtype=np.float64)
        while len(poses) < count:
            theta = rng.uniform(0, 2 * math.pi)
            eye = np.array(
                [
                    s.orbit_radius * math.cos(theta),
                    s.orbit_radius * math.sin(theta),
                    s.orbit_height + rng.uniform(-1, 1) * s.orbit_height_jitter,
                ]
            )
            if self.sdf(eye[None])[0] < 0.05:
                continue
            target = center + rng.uniform(-1, 1, 3) * s.look_jitter
            R = look_at(eye, target)
            poses.append(Pose.from_matrix(self.frame_rotation @ R, self.to_scene(eye[None])[0]))
        return poses

    def render(self, pose: Pose, camera: CameraIntrinsics | None = None, supersample: int | None = None) -> np.ndarray:
        """Anti-aliased render: each pixel averages a ``supersample^2`` grid of rays."""
        camera = camera or self.camera()
        ss = supersample or self.spec.supersample
        offs = (np.arange(ss) + 0.5) / ss
        u, v = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
        ou, ov = np.meshgrid(offs, offs)
        pu = (u[..., None] + ou.ravel()).ravel()
        pv = (v[..., None] + ov.ravel()).ravel()
        from .render import undistort

        x, y = undistort((pu - camera.cx) / camera.fx, (pv - camera.cy) / camera.fy, *camera.distortion)
        d = np.stack([x, y, np.ones_like(x)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        d_scene = d @ pose.matrix.T
        d_room = d_scene @ self.frame_rotation  # rotation only; directions are scale-free
        o_room = np.broadcast_to(self.to_room(pose.position[None]), d_room.shape)
        color, _ = self.trace(np.ascontiguousarray(o_room), d_room)
        return color.reshape(camera.height, camera.width, ss * ss, 3).mean(axis=2)

    def record(self) -> dict:
        """JSON-ready description of the ground truth, including the frame transform."""
        return {
            "spec": self.spec.to_dict(),
            "room_bounds": [self.room_lo.tolist(), self.room_hi.tolist()],
            "frame": {
                "rotation": self.frame_rotation.reshape(-1).tolist(),
                "scale": self.frame_scale,
                "translation": self.frame_translation.tolist(),
            },
        }


def ray_sphere(origins, dirs, center, radius) -> np.ndarray:
    oc = origins - center
    b = np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    return np.where(disc >= 0, t, np.inf)


def ray_box(origins, dirs, center, half) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (center - half - origins) * inv
        t2 = (center + half - origins) * inv
    t1 = np.nan_to_num(t1, nan=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf)
    t_near = np.minimum(t1, t2).max(axis=1)
    t_far = np.maximum(t1, t2).min(axis=1)
    hit = (t_far >= t_near) & (t_far > 1e-9)
    t = np.where(t_near > 1e-9, t_near, t_far)
    return np.where(hit, t, np.inf)


def box_sdf(points, center, half) -> np.ndarray:
    q = np.abs(points - center) - half
    outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0)
    return outside + inside


def generate_synthetic_scene(
    spec: SyntheticSceneSpec, n_train: int, n_test: int, seed: int
) -> tuple[SceneDataset, SceneDataset | None, SyntheticScene]:
    """Ray-traced train/test datasets on the camera orbit, plus the analytic scene."""
    if n_train < 1:
        raise ValueError("n_train must be >= 1")
    scene = SyntheticScene(spec)
    rng = np.random.default_rng(seed)
    camera = scene.camera()
    poses = scene.orbit_poses(n_train + n_test, rng)
    bounds = scene.scene_bounds()

    def make(sub: list[Pose], prefix: str) -> SceneDataset:
        images = tuple(
            PosedImage(f"{prefix}_{i:04d}.png", scene.render(p, camera), p, camera) for i, p in enumerate(sub)
        )
        return SceneDataset(images, camera, bounds, metadata={"synthetic": True})

    train = make(poses[:n_train], "train")
    test = make(poses[n_train:], "test") if n_test > 0 else None
    return train, test, scene
