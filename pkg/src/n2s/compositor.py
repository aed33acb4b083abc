"""Overlay dynamic objects on top of a static radiance-field render."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ingest import CameraIntrinsics, Pose
from .render import distort, generate_rays, pixel_grid

LIGHT_DIRECTION = np.array([0.0, 0.0, -1.0])
AMBIENT = 0.3


class BehindCamera(ValueError):
    pass


@dataclass
class DynamicLayer:
    rgba: np.ndarray

    def __post_init__(self) -> None:
        self.rgba = np.asarray(self.rgba, dtype=np.float64)
        if self.rgba.ndim != 3 or self.rgba.shape[2] != 4:
            raise ValueError("layer must be H x W x 4")

    @property
    def alpha(self) -> np.ndarray:
        return self.rgba[..., 3]

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgba.shape[:2]


@dataclass
class SceneComposite:
    static_rgb: np.ndarray
    layers: list[DynamicLayer] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return overlay(self.static_rgb, self.layers)


def project_point(point, camera: CameraIntrinsics, pose: Pose) -> tuple[float, float]:
    """World point to distorted pixel coordinates. Raises :class:`BehindCamera`."""
    p = pose.matrix.T @ (np.asarray(point, dtype=np.float64) - pose.position)
    if p[2] <= 1e-9:
        raise BehindCamera("behind camera")
    xd, yd = distort(p[0] / p[2], p[1] / p[2], *camera.distortion)
    return camera.cx + camera.fx * xd, camera.cy + camera.fy * yd


def rasterize_sphere(center, radius: float, color, camera: CameraIntrinsics, pose: Pose, resolution=None) -> DynamicLayer:
    """Analytic ray-sphere coverage with Lambertian shading under a fixed light."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    if resolution is not None and tuple(resolution) != (camera.width, camera.height):
        camera = camera.scaled(*resolution)
    w, h = camera.width, camera.height
    rays = generate_rays(camera, pose, pixel_grid(w, h), dtype=None)
    o = rays.origins.double().numpy()
    d = rays.directions.double().numpy()
    c = np.asarray(center, dtype=np.float64)
    oc = o - c
    b = np.einsum("ij,ij->i", oc, d)
    disc = b * b - (np.einsum("ij,ij->i", oc, oc) - radius * radius)
    root = np.sqrt(np.maximum(disc, 0.0))
    t_near, t_far = -b - root, -b + root
    t = np.where(t_near > 0, t_near, t_far)
    hit = (disc >= 0) & (t > 0)
    normal = (o + t[:, None] * d - c) / radius
    lambert = np.clip(normal @ -LIGHT_DIRECTION, 0.0, None)
    shade = np.clip(AMBIENT + (1 - AMBIENT) * lambert, 0.0, 1.0)
    rgb = np.clip(np.asarray(color, dtype=np.float64)[None, :] * shade[:, None], 0.0, 1.0)
    rgba = np.zeros((h * w, 4))
    rgba[hit, :3] = rgb[hit]
    rgba[hit, 3] = 1.0
    return DynamicLayer(rgba.reshape(h, w, 4))


def overlay(static_rgb, layers) -> np.ndarray:
    """Straight-alpha "over" of ``layers`` (back to front) onto ``static_rgb``; no depth test."""
    out = np.asarray(static_rgb, dtype=np.float64).copy()
    for layer in layers:
        rgba = layer.rgba if isinstance(layer, DynamicLayer) else np.asarray(layer, dtype=np.float64)
        if rgba.shape[:2] != out.shape[:2]:
            raise ValueError(f"layer resolution {rgba.shape[:2]} does not match render {out.shape[:2]}")
        a = rgba[..., 3:4]
        out = a * rgba[..., :3] + (1 - a) * out
    return out


def render_objects(objects: list[dict], camera: CameraIntrinsics, pose: Pose, resolution=None) -> list[DynamicLayer]:
    """Layers for a JSON object list ``[{type: "sphere", center, radius, color}, ...]``."""
    layers = []
    for obj in objects:
        kind = obj.get("type")
        if kind != "sphere":
            raise ValueError(f"unsupported object type {kind!r}")
        layers.append(rasterize_sphere(obj["center"], float(obj["radius"]), obj["color"], camera, pose, resolution))
    return layers
