"""Collision-mesh extraction and alignment to a simulator world frame."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage
from skimage import measure

from .field import RadianceField
from .render import to_unit_cube


@dataclass(frozen=True)
class DensityGrid:
    resolution: tuple[int, int, int]
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]]
    values: np.ndarray

    def __post_init__(self) -> None:
        if min(self.resolution) < 2:
            raise ValueError("grid resolution must be >= 2 per axis")
        if self.values.shape != tuple(self.resolution):
            raise ValueError("values do not match resolution")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @property
    def cell_size(self) -> np.ndarray:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        return (hi - lo) / np.asarray(self.resolution)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    units: str = "scene"

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @classmethod
    def empty(cls, units: str = "scene") -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), units)

    def __len__(self) -> int:
        return len(self.triangles)

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        return np.sort(e, axis=1)

    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def signed_volume(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def compact(self) -> "TriangleMesh":
        """Drop unreferenced vertices."""
        used, inverse = np.unique(self.triangles.ravel(), return_inverse=True)
        return TriangleMesh(self.vertices[used], inverse.reshape(-1, 3), self.units)

    def subset(self, keep: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles[keep], self.units).compact()


@dataclass(frozen=True)
class SimilarityTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self) -> None:
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if abs(np.linalg.det(R) - 1) > 1e-9 or not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal with det +1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "scale": float(self.scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(np.asarray(d["rotation"]).reshape(3, 3), np.asarray(d["translation"]), float(d["scale"]))


@dataclass(frozen=True)
class FloorPlane:
    """Flat floor primitive at z = 0 covering an xy rectangle (world units)."""

    z: float
    xy_min: tuple[float, float]
    xy_max: tuple[float, float]

    def to_dict(self) -> dict:
        return {"type": "plane", "z": self.z, "xy_min": list(self.xy_min), "xy_max": list(self.xy_max)}


@dataclass(frozen=True)
class FreeSpaceMap:
    origin: tuple[float, float]
    cell_size: float
    free: np.ndarray  # (ny, nx) bool, row index along y

    def __post_init__(self) -> None:
        if not self.cell_size > 0:
            raise ValueError("cell size must be positive")

    def centers(self) -> np.ndarray:
        ny, nx = self.free.shape
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.cell_size
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def sample(self, rng: np.random.Generator) -> tuple[float, float, float]:
        """Random (x, y, yaw) inside a free cell."""
        idx = np.argwhere(self.free)
        if len(idx) == 0:
            raise ValueError("no free cells")
        j, i = idx[rng.integers(len(idx))]
        x = self.origin[0] + (i + rng.random()) * self.cell_size
        y = self.origin[1] + (j + rng.random()) * self.cell_size
        return float(x), float(y), float(rng.uniform(-math.pi, math.pi))

    def to_dict(self) -> dict:
        return {
            "origin": list(self.origin),
            "cell_size": self.cell_size,
            "shape": list(self.free.shape),
            "free": self.free.astype(int).tolist(),
        }


# --- voxelization and isosurface -------------------------------------------


def cell_centers(bounds, resolution) -> np.ndarray:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    axes = [lo[k] + (np.arange(resolution[k]) + 0.5) * (hi[k] - lo[k]) / resolution[k] for k in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack(g, axis=-1)


def field_density_fn(field_: RadianceField, chunk: int = 65536) -> Callable[[np.ndarray], np.ndarray]:
    """Main-field density at scene points (view- and Σ-independent path)."""
    dtype = field_.grid.tables.dtype

    def fn(points: np.ndarray) -> np.ndarray:
        out = []
        with torch.no_grad():
            for start in range(0, len(points), chunk):
                p = torch.as_tensor(points[start:start + chunk], dtype=dtype)
                out.append(field_.density(to_unit_cube(p)).double().numpy())
        return np.concatenate(out) if out else np.zeros(0)

    return fn


def voxelize_density(source, bounds, resolution) -> DensityGrid:
    """Sample density at cell centers. ``source`` is a field or a callable on ``(N, 3)`` points."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if np.any(hi <= lo):
        raise ValueError("degenerate bounds")
    resolution = tuple(int(r) for r in resolution)
    fn = field_density_fn(source) if isinstance(source, RadianceField) else source
    pts = cell_centers(bounds, resolution)
    # z-slabs keep peak memory bounded
    values = np.empty(resolution)
    for k in range(resolution[2]):
        values[:, :, k] = np.asarray(fn(pts[:, :, k].reshape(-1, 3))).reshape(resolution[:2])
    return DensityGrid(resolution, (tuple(lo), tuple(hi)), values)


def weld(vertices: np.ndarray, triangles: np.ndarray, tol: float = 1e-7):
    key = np.round(vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    return vertices[first], inverse[triangles]


def marching_cubes(grid: DensityGrid, iso_threshold: float = 0.5) -> TriangleMesh:
    """Isosurface at ``iso_threshold``; triangles wind outward (away from high density)."""
    if not math.isfinite(iso_threshold):
        raise ValueError("threshold must be finite")
    vals = grid.values
    if not (vals.min() < iso_threshold < vals.max()):
        return TriangleMesh.empty()
    spacing = tuple(grid.cell_size)
    verts, faces, _, _ = measure.marching_cubes(
        vals, level=iso_threshold, spacing=spacing, allow_degenerate=False, method="lewiner"
    )
    verts = verts + np.asarray(grid.bounds[0]) + 0.5 * np.asarray(spacing)
    verts, faces = weld(verts, faces)
    mesh = TriangleMesh(verts, faces)
    a = mesh.areas()
    mesh = TriangleMesh(verts, faces[a > 1e-12]).compact()
    if len(mesh) and _outward_score(mesh, grid) < 0:
        mesh.triangles = mesh.triangles[:, ::-1].copy()
    return mesh


def _outward_score(mesh: TriangleMesh, grid: DensityGrid) -> float:
    """Positive when face normals point toward decreasing density."""
    v = mesh.vertices[mesh.triangles]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    c = v.mean(axis=1)
    cell = grid.cell_size
    eps = 0.25 * cell.min()

    def sample(p):
        idx = (p - np.asarray(grid.bounds[0])) / cell - 0.5
        return ndimage.map_coordinates(grid.values, idx.T, order=1, mode="nearest")

    return float((sample(c - eps * n) - sample(c + eps * n)).sum())


# --- frame alignment --------------------------------------------------------


def fit_floor_plane(points, toward=None) -> tuple[np.ndarray, float]:
    """Total-least-squares plane ``normal . x = offset``.

    The normal is oriented toward ``toward`` (e.g. the mean camera position)
    when given, otherwise toward +z.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise ValueError("need at least 3 points to fit a plane")
    mean = pts.mean(axis=0)
    cov = (pts - mean).T @ (pts - mean) / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        raise ValueError("degenerate (collinear or coincident) floor points")
    normal = evecs[:, 0]
    ref = (np.asarray(toward, dtype=np.float64) - mean) if toward is not None else np.array([0.0, 0.0, 1.0])
    if normal @ ref < 0:
        normal = -normal
    return normal, float(normal @ mean)


def rotation_between(a, b) -> np.ndarray:
    """Smallest rotation taking unit vector ``a`` onto unit vector ``b``.

    Antipodal inputs rotate by pi about the x axis (or y if ``a`` is along x).
    """
    a = np.asarray(a, dtype=np.float64) / np.linalg.norm(a)
    b = np.asarray(b, dtype=np.float64) / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(a @ b)
    s = np.linalg.norm(v)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        axis = np.array([1.0, 0.0, 0.0])
        if abs(a @ axis) > 0.9:
            axis = np.array([0.0, 1.0, 0.0])
        axis = axis - (axis @ a) * a
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    axis = v / s
    angle = math.atan2(s, c)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def compute_alignment(plane, yaw: float = 0.0, scale_reference: tuple[float, float] = (1.0, 1.0)) -> SimilarityTransform:
    """Map the floor plane to z = 0 with its normal on +z, spin by ``yaw``, and rescale.

    ``scale_reference`` is ``(length measured in the mesh, same length in the world)``.
    """
    normal, offset = plane
    measured, real = scale_reference
    if measured == 0:
        raise ValueError("measured mesh length is zero")
    if real <= 0 or measured < 0:
        raise ValueError("reference lengths must be positive")
    scale = real / measured
    R = rot_z(yaw) @ rotation_between(normal, (0.0, 0.0, 1.0))
    return SimilarityTransform(R, np.array([0.0, 0.0, -scale * offset]), scale)


def apply_transform(mesh: TriangleMesh, transform: SimilarityTransform) -> TriangleMesh:
    return TriangleMesh(transform.apply(mesh.vertices), mesh.triangles.copy(), "world")


# --- post-processing -------------------------------------------------------


def replace_floor(mesh: TriangleMesh, z_tolerance: float = 0.02) -> tuple[TriangleMesh, FloorPlane]:
    """Remove floor triangles (all vertices within ``z_tolerance`` of z = 0) and emit a flat plane."""
    if len(mesh.vertices):
        xy_min = tuple(mesh.vertices[:, :2].min(axis=0).tolist())
        xy_max = tuple(mesh.vertices[:, :2].max(axis=0).tolist())
    else:
        xy_min = xy_max = (0.0, 0.0)
    if len(mesh) == 0:
        return mesh, FloorPlane(0.0, xy_min, xy_max)
    z = mesh.vertices[mesh.triangles, 2]
    floor = np.all(np.abs(z) <= z_tolerance, axis=1)
    return mesh.subset(~floor), FloorPlane(0.0, xy_min, xy_max)


def _triangle_box_overlap(tri: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Separating-axis test for triangles ``(N, 3, 3)`` against one box."""
    c = 0.5 * (lo + hi)
    h = 0.5 * (hi - lo)
    v = tri - c
    e = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]], axis=1)
    overlap = np.ones(len(tri), dtype=bool)
    # box face normals
    overlap &= np.all(v.min(axis=1) <= h, axis=1) & np.all(v.max(axis=1) >= -h, axis=1)
    # triangle normal
    n = np.cross(e[:, 0], e[:, 1])
    r = np.abs(n) @ h
    d = np.einsum("ij,ij->i", n, v[:, 0])
    overlap &= np.abs(d) <= r
    # edge cross products
    axes = np.eye(3)
    for i in range(3):
        for j in range(3):
            a = np.cross(axes[i][None, :], e[:, j])
            p = np.einsum("nkj,nj->nk", v, a)
            r = np.abs(a) @ h
            overlap &= ~((p.min(axis=1) > r) | (p.max(axis=1) < -r))
    return overlap


def crop_mesh(mesh: TriangleMesh, box) -> TriangleMesh:
    """Keep every triangle touching ``box = (lo, hi)``; boundary triangles stay whole."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    if np.any(hi < lo):
        raise ValueError("invalid crop box")
    if len(mesh) == 0:
        return mesh
    keep = _triangle_box_overlap(mesh.vertices[mesh.triangles], lo, hi)
    return mesh.subset(keep)


def _clip_polygon_z(poly: np.ndarray, z: float, keep_above: bool) -> np.ndarray:
    out = []
    n = len(poly)
    for k in range(n):
        a, b = poly[k], poly[(k + 1) % n]
        ina = a[2] >= z if keep_above else a[2] <= z
        inb = b[2] >= z if keep_above else b[2] <= z
        if ina:
            out.append(a)
        if ina != inb:
            t = (z - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return np.array(out).reshape(-1, 3)


def _point_polygon_distance(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """2D distance from points to a convex polygon (0 inside)."""
    m = len(poly)
    if m == 1:
        return np.linalg.norm(pts - poly[0], axis=1)
    dist = np.full(len(pts), np.inf)
    for k in range(m):
        a, b = poly[k], poly[(k + 1) % m]
        ab = b - a
        denom = ab @ ab
        t = np.clip(((pts - a) @ ab) / denom, 0, 1) if denom > 0 else np.zeros(len(pts))
        dist = np.minimum(dist, np.linalg.norm(pts - (a + t[:, None] * ab), axis=1))
    if m >= 3:
        cross = []
        for k in range(m):
            a, b = poly[k], poly[(k + 1) % m]
            cross.append((b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0]))
        cross = np.stack(cross, axis=1)
        inside = np.all(cross >= 0, axis=1) | np.all(cross <= 0, axis=1)
        area2 = np.abs(np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1]))
        if area2 > 1e-15:
            dist = np.where(inside, 0.0, dist)
    return dist


def free_space_map(
    mesh: TriangleMesh,
    workspace: Sequence[float],
    cell_size: float = 0.05,
    clearance: float = 0.25,
    height_band: tuple[float, float] = (0.02, 1.0),
) -> FreeSpaceMap:
    """2D spawn map: a cell is blocked when geometry inside ``height_band`` is within ``clearance``.

    ``workspace`` is ``(xmin, ymin, xmax, ymax)``; the band is ``(z_lo, z_hi]``.
    """
    if not cell_size > 0:
        raise ValueError("cell size must be positive")
    xmin, ymin, xmax, ymax = (float(v) for v in workspace)
    nx = max(1, int(math.ceil((xmax - xmin) / cell_size - 1e-9)))
    ny = max(1, int(math.ceil((ymax - ymin) / cell_size - 1e-9)))
    fmap = FreeSpaceMap((xmin, ymin), cell_size, np.ones((ny, nx), dtype=bool))
    if len(mesh) == 0:
        return fmap
    centers = fmap.centers().reshape(-1, 2)
    blocked = np.zeros(len(centers), dtype=bool)
    z_lo, z_hi = height_band
    tris = mesh.vertices[mesh.triangles]
    zmin, zmax = tris[:, :, 2].min(axis=1), tris[:, :, 2].max(axis=1)
    in_band = (zmax > z_lo) & (zmin <= z_hi)
    reach = clearance if math.isfinite(clearance) else np.inf
    for tri in tris[in_band]:
        poly = tri
        if poly[:, 2].min() < z_lo:
            poly = _clip_polygon_z(poly, z_lo, keep_above=True)
        if len(poly) and poly[:, 2].max() > z_hi:
            poly = _clip_polygon_z(poly, z_hi, keep_above=False)
        if len(poly) == 0:
            continue
        xy = poly[:, :2]
        lo, hi = xy.min(axis=0) - reach, xy.max(axis=0) + reach
        cand = ~blocked & np.all((centers >= lo) & (centers <= hi), axis=1)
        if not cand.any():
            continue
        idx = np.nonzero(cand)[0]
        d = _point_polygon_distance(centers[idx], xy)
        blocked[idx[d <= clearance]] = True
    return FreeSpaceMap((xmin, ymin), cell_size, ~blocked.reshape(ny, nx))


# --- OBJ ------------------------------------------------------------------------


def export_obj(mesh: TriangleMesh) -> str:
    lines = [f"# n2s mesh units={mesh.units} vertices={len(mesh.vertices)} faces={len(mesh)}"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    return "\n".join(lines) + "\n"


def import_obj(text: str) -> TriangleMesh:
    verts, faces, units = [], [], "scene"
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "#":
            for p in parts:
                if p.startswith("units="):
                    units = p.split("=", 1)[1]
        elif parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), units)


# Extension point: a callable splitting a mesh into convex parts for the simulator.
ConvexDecomposer = Callable[[TriangleMesh], list]
