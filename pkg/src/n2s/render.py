"""Ray casting, proposal sampling and volumetric integration."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch

from .field import RadianceField
from .ingest import CameraIntrinsics, Pose

SQRT12 = math.sqrt(12.0)


class DistortionInversionError(RuntimeError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    near: float = 0.02
    far: float = 1e3
    spacing: str = "disparity"
    proposal_samples: int = 64
    samples: int = 64
    sample_dilation: float = 0.001
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    chunk: int = 4096

    def __post_init__(self) -> None:
        if not 0 < self.near < self.far:
            raise ValueError("render config needs 0 < near < far")
        if self.spacing not in _SPACINGS:
            raise ValueError(f"unknown spacing '{self.spacing}'")
        if self.samples < 1 or self.proposal_samples < 1:
            raise ValueError("sample counts must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RenderConfig":
        for key in d:
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"unknown render config key '{key}'")
        d = dict(d)
        if "background" in d:
            d["background"] = tuple(d["background"])
        return cls(**d)


def desk_render_config() -> RenderConfig:
    return RenderConfig(near=0.05, far=100.0, spacing="contracted", proposal_samples=32, samples=32)


class Rays(NamedTuple):
    origins: torch.Tensor
    directions: torch.Tensor
    radii: torch.Tensor


# --- lens model -------------------------------------------------------------


def distort(x, y, k1, k2, p1, p2):
    """Forward OpenCV 4-coefficient distortion of normalized coordinates."""
    r2 = x * x + y * y
    radial = 1 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    yd = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
    return xd, yd


def undistort(xd, yd, k1, k2, p1, p2, iterations: int = 10):
    """Invert :func:`distort` by fixed-point iteration."""
    if k1 == k2 == p1 == p2 == 0:
        return xd, yd
    x, y = xd, yd
    step = None
    for _ in range(iterations):
        r2 = x * x + y * y
        radial = 1 + k1 * r2 + k2 * r2 * r2
        dx = 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
        dy = p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
        nx, ny = (xd - dx) / radial, (yd - dy) / radial
        step = np.maximum(np.abs(np.asarray(nx - x)), np.abs(np.asarray(ny - y)))
        x, y = nx, ny
    if not np.all(np.isfinite(step)) or np.max(step) > 1:
        raise DistortionInversionError("distortion inversion failed")
    return x, y


def generate_rays(camera: CameraIntrinsics, pose: Pose, pixels, dtype=torch.float32) -> Rays:
    """World-space rays through pixel coordinates ``(N, 2)`` (pixel centers at +0.5)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    xd = (pixels[:, 0] - camera.cx) / camera.fx
    yd = (pixels[:, 1] - camera.cy) / camera.fy
    x, y = undistort(xd, yd, *camera.distortion)
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_world = d_cam @ pose.matrix.T
    origins = np.tile(pose.position, (len(d_world), 1))
    radius = 1.0 / (camera.fx * SQRT12)
    return Rays(
        torch.as_tensor(origins, dtype=dtype),
        torch.as_tensor(d_world, dtype=dtype),
        torch.full((len(d_world),), radius, dtype=dtype),
    )


def generate_ray(pixel, camera: CameraIntrinsics, pose: Pose) -> Rays:
    u, v = pixel
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ValueError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    return generate_rays(camera, pose, [[u, v]], dtype=torch.float64)


def pixel_grid(width: int, height: int) -> np.ndarray:
    """Pixel-center coordinates in row-major order."""
    u, v = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return np.stack([u.ravel(), v.ravel()], axis=-1)


# --- space contraction and ray distance parameterization --------------------


def contract(x: torch.Tensor) -> torch.Tensor:
    """Squash R^3 into the radius-2 ball; identity inside the unit ball."""
    x = torch.as_tensor(x)
    norm = torch.linalg.norm(x, dim=-1, keepdim=True)
    safe = norm.clamp_min(1.0)
    return torch.where(norm <= 1.0, x, (2.0 - 1.0 / safe) * x / safe)


def to_unit_cube(x: torch.Tensor) -> torch.Tensor:
    return (contract(x) + 2.0) / 4.0


def contraction_jacobian_diag(x: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.norm(x, dim=-1, keepdim=True)
    safe = norm.clamp_min(1.0)
    xhat2 = (x / safe) ** 2
    a = (2.0 - 1.0 / safe) / safe
    b = 1.0 / safe**2
    outside = a * (1.0 - xhat2) + b * xhat2
    return torch.where(norm <= 1.0, torch.ones_like(x), outside)


def _g_disparity(t):
    return 1.0 / t


def _g_contracted(t):
    return torch.where(t < 1.0, t, 2.0 - 1.0 / torch.clamp(t, min=1.0))


def _ginv_contracted(u):
    return torch.where(u < 1.0, u, 1.0 / torch.clamp(2.0 - u, min=1e-12))


_SPACINGS = {
    "disparity": (_g_disparity, _g_disparity),
    "contracted": (_g_contracted, _ginv_contracted),
}


def s_to_t(s: torch.Tensor, near: float, far: float, spacing: str = "disparity") -> torch.Tensor:
    g, ginv = _SPACINGS[spacing]
    gn = g(torch.tensor(near, dtype=s.dtype))
    gf = g(torch.tensor(far, dtype=s.dtype))
    return ginv(gn + s * (gf - gn))


def t_to_s(t: torch.Tensor, near: float, far: float, spacing: str = "disparity") -> torch.Tensor:
    g, _ = _SPACINGS[spacing]
    gn = g(torch.tensor(near, dtype=t.dtype))
    gf = g(torch.tensor(far, dtype=t.dtype))
    return (g(t) - gn) / (gf - gn)


# --- sampling --------------------------------------------------------------


def dilate_histogram(edges: torch.Tensor, weights: torch.Tensor, dilation: float):
    """Max-dilate a step function over ``[0, 1]`` by ``dilation`` on each side.

    Returns new edges and normalized weights. Assumes every bin is wider than
    ``2 * dilation``.
    """
    widths = (edges[..., 1:] - edges[..., :-1]).clamp_min(1e-12)
    dens = weights / widths
    if edges.shape[-1] == 2 or dilation <= 0:
        new_edges, new_dens = edges, dens
    else:
        inner = edges[..., 1:-1]
        lo, hi = (inner - dilation).clamp(0, 1), (inner + dilation).clamp(0, 1)
        new_edges = torch.stack([lo, hi], dim=-1).flatten(-2)
        new_edges = torch.cat([edges[..., :1], new_edges, edges[..., -1:]], dim=-1)
        joint = torch.maximum(dens[..., :-1], dens[..., 1:])
        new_dens = torch.stack([dens[..., :-1], joint], dim=-1).flatten(-2)
        new_dens = torch.cat([new_dens, dens[..., -1:]], dim=-1)
    w = new_dens * (new_edges[..., 1:] - new_edges[..., :-1])
    total = w.sum(-1, keepdim=True)
    return new_edges, w / total.clamp_min(1e-30), total[..., 0]


def sample_inverse_cdf(edges: torch.Tensor, weights: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    cdf = torch.cumsum(weights, dim=-1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf / cdf[..., -1:].clamp_min(1e-30)], dim=-1)
    m = weights.shape[-1]
    idx = torch.searchsorted(cdf.contiguous(), u.contiguous(), right=True) - 1
    idx = idx.clamp(0, m - 1)
    c0, c1 = cdf.gather(-1, idx), cdf.gather(-1, idx + 1)
    e0, e1 = edges.gather(-1, idx), edges.gather(-1, idx + 1)
    denom = c1 - c0
    frac = torch.where(denom > 0, (u - c0) / denom.clamp_min(1e-30), torch.zeros_like(u))
    return (e0 + frac.clamp(0, 1) * (e1 - e0)).clamp(0, 1)


def uniform_edges(n_rays: int, n: int, dtype=torch.float32) -> torch.Tensor:
    return torch.linspace(0, 1, n + 1, dtype=dtype).expand(n_rays, n + 1).contiguous()


def resample_edges(
    edges: torch.Tensor,
    weights: torch.Tensor,
    n: int,
    dilation: float,
    jitter: torch.Tensor | None = None,
) -> torch.Tensor:
    """``n + 1`` new interval edges drawn from the dilated weight histogram."""
    n_rays = edges.shape[0]
    u = torch.linspace(0, 1, n + 1, dtype=edges.dtype).expand(n_rays, n + 1).clone()
    if jitter is not None and n > 1:
        u[:, 1:-1] = u[:, 1:-1] + (jitter[:, : n - 1] - 0.5) / n
    d_edges, d_weights, total = dilate_histogram(edges, weights, dilation)
    s = sample_inverse_cdf(d_edges, d_weights, u)
    # enforce strict ordering against float ties
    s = torch.cummax(s, dim=-1).values
    degenerate = total <= 1e-12
    if degenerate.any():
        s = torch.where(degenerate[:, None], uniform_edges(n_rays, n, edges.dtype), s)
    return s


class Intervals(NamedTuple):
    s_edges: torch.Tensor
    t_edges: torch.Tensor
    weights: torch.Tensor | None = None


def propose_intervals(
    field: RadianceField,
    rays: Rays,
    config: RenderConfig,
    n: int | None = None,
    jitter: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> tuple[Intervals, Intervals]:
    """Stage-1 uniform intervals weighted by the proposal field, and stage-2 resampled ones.

    ``jitter`` optionally holds two uniform tensors: per-interval sample
    offsets for the proposal evaluation and per-edge offsets for resampling.
    """
    n = n or config.samples
    n_rays = rays.origins.shape[0]
    dtype = rays.origins.dtype
    s1 = uniform_edges(n_rays, config.proposal_samples, dtype)
    t1 = s_to_t(s1, config.near, config.far, config.spacing)
    if jitter is None:
        t_eval = 0.5 * (t1[:, 1:] + t1[:, :-1])
    else:
        t_eval = t1[:, :-1] + jitter[0] * (t1[:, 1:] - t1[:, :-1])
    pts = rays.origins[:, None, :] + rays.directions[:, None, :] * t_eval[..., None]
    dens = field.proposal_density(to_unit_cube(pts).reshape(-1, 3)).reshape(t_eval.shape)
    w1 = compute_weights(dens, t1[:, 1:] - t1[:, :-1])[0]
    s2 = resample_edges(
        s1, w1.detach(), n, config.sample_dilation, None if jitter is None else jitter[1]
    )
    t2 = s_to_t(s2, config.near, config.far, config.spacing)
    return Intervals(s1, t1, w1), Intervals(s2, t2)


class GaussianStats(NamedTuple):
    mean: torch.Tensor
    sigma_ray: torch.Tensor
    sigma_transverse: torch.Tensor
    sigma_sample: torch.Tensor


def interval_gaussian(t0, t1, origins, directions, radii) -> GaussianStats:
    """Isotropic Gaussian moments of ray segments, variance mapped into unit-cube coordinates.

    ``t0``/``t1`` have shape ``(R, n)``; rays have shape ``(R, 3)``.
    """
    t0, t1 = torch.as_tensor(t0), torch.as_tensor(t1)
    tm = 0.5 * (t0 + t1)
    mean = origins[:, None, :] + directions[:, None, :] * tm[..., None]
    sig_r = (t1 - t0) / SQRT12
    sig_t = radii[:, None] * tm
    d2 = (directions**2)[:, None, :]
    var_world = sig_r[..., None] ** 2 * d2 + sig_t[..., None] ** 2 * (1.0 - d2)
    jac = contraction_jacobian_diag(mean)
    # unit-cube map divides lengths by 4
    var_unit = var_world * jac**2 / 16.0
    return GaussianStats(mean, sig_r, sig_t, var_unit)


# --- integration ------------------------------------------------------------


def compute_weights(density: torch.Tensor, deltas: torch.Tensor):
    """Per-interval weights and final transmittance from densities and lengths."""
    tau = density * deltas
    tau = torch.where(torch.isnan(tau), torch.zeros_like(tau), tau)  # inf*0 gaps
    alpha = 1.0 - torch.exp(-tau)
    acc = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(acc[..., :1]), acc[..., :-1]], dim=-1))
    weights = trans * alpha
    t_final = torch.exp(-acc[..., -1])
    return weights, t_final


class RenderOutput(NamedTuple):
    rgb: torch.Tensor
    weights: torch.Tensor
    final_transmittance: torch.Tensor
    expected_depth: torch.Tensor


def composite_ray(density, colors, t_edges, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Volumetric integration over intervals; inputs batched as ``(R, n)`` / ``(R, n, 3)``."""
    density = torch.as_tensor(density)
    colors = torch.as_tensor(colors, dtype=density.dtype)
    t_edges = torch.as_tensor(t_edges, dtype=density.dtype)
    if torch.isnan(density).any() or (density == -math.inf).any():
        raise ValueError("non-finite density")
    if (density < 0).any():
        raise ValueError("negative density")
    deltas = t_edges[..., 1:] - t_edges[..., :-1]
    weights, t_final = compute_weights(density, deltas)
    bg = torch.as_tensor(background, dtype=density.dtype)
    rgb = (weights[..., None] * colors).sum(-2) + t_final[..., None] * bg
    mids = 0.5 * (t_edges[..., 1:] + t_edges[..., :-1])
    depth = (weights * mids).sum(-1) / weights.sum(-1).clamp_min(1e-8)
    return RenderOutput(rgb, weights, t_final, depth)


def distortion_loss(weights, s_mid, s_width) -> torch.Tensor:
    """Pairwise spread of ray weights plus the intra-interval self term, per ray."""
    weights = torch.as_tensor(weights)
    s_mid = torch.as_tensor(s_mid, dtype=weights.dtype)
    s_width = torch.as_tensor(s_width, dtype=weights.dtype)
    pair = (weights[..., :, None] * weights[..., None, :] * (s_mid[..., :, None] - s_mid[..., None, :]).abs()).sum((-1, -2))
    return pair + (weights**2 * s_width).sum(-1) / 3.0


def render_rays(
    field: RadianceField,
    rays: Rays,
    config: RenderConfig,
    sigma_scale: torch.Tensor | float = 1.0,
    generator: torch.Generator | None = None,
) -> dict:
    """Full proposal + main field render of a ray batch.

    With a generator, proposal evaluation points and resampling edges are
    jittered (training); without, the render is deterministic.
    """
    n_rays = rays.origins.shape[0]
    dtype = rays.origins.dtype
    jitter = None
    if generator is not None:
        jitter = (
            torch.rand(n_rays, config.proposal_samples, generator=generator, dtype=dtype),
            torch.rand(n_rays, max(config.samples - 1, 1), generator=generator, dtype=dtype),
        )
    stage1, stage2 = propose_intervals(field, rays, config, jitter=jitter)
    t2 = stage2.t_edges
    stats = interval_gaussian(t2[:, :-1], t2[:, 1:], rays.origins, rays.directions, rays.radii)
    scale = torch.as_tensor(sigma_scale, dtype=dtype)
    if scale.ndim == 1:
        scale = scale[:, None, None]
    sigma = stats.sigma_sample * scale
    n = t2.shape[1] - 1
    pos = to_unit_cube(stats.mean).reshape(-1, 3)
    dirs = rays.directions[:, None, :].expand(-1, n, -1).reshape(-1, 3)
    out = field(pos, sigma.reshape(-1, 3), dirs)
    density = out.density.reshape(n_rays, n)
    colors = out.color.reshape(n_rays, n, 3)
    result = composite_ray(density, colors, t2, config.background)
    s2 = stage2.s_edges
    return {
        "rgb": result.rgb,
        "weights": result.weights,
        "final_transmittance": result.final_transmittance,
        "depth": result.expected_depth,
        "stage1": stage1,
        "stage2": stage2,
        "s_mid": 0.5 * (s2[:, 1:] + s2[:, :-1]),
        "s_width": s2[:, 1:] - s2[:, :-1],
    }


def render_image(
    field: RadianceField,
    camera: CameraIntrinsics,
    pose: Pose,
    config: RenderConfig,
    resolution: tuple[int, int] | None = None,
    sigma_scale: float = 1.0,
    seed: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Render an ``H x W x 3`` image and ``H x W`` depth map.

    ``resolution`` is ``(width, height)``; intrinsics are rescaled to it.
    With ``seed`` the sampling is jittered reproducibly.
    """
    if resolution is not None and tuple(resolution) != (camera.width, camera.height):
        camera = camera.scaled(*resolution)
    dtype = field.grid.tables.dtype
    rays = generate_rays(camera, pose, pixel_grid(camera.width, camera.height), dtype=dtype)
    generator = torch.Generator().manual_seed(seed) if seed is not None else None
    rgb, depth = [], []
    with torch.no_grad():
        for start in range(0, rays.origins.shape[0], config.chunk):
            sl = slice(start, start + config.chunk)
            chunk = Rays(rays.origins[sl], rays.directions[sl], rays.radii[sl])
            out = render_rays(field, chunk, config, sigma_scale, generator)
            rgb.append(out["rgb"])
            depth.append(out["depth"])
    h, w = camera.height, camera.width
    image = torch.cat(rgb).reshape(h, w, 3).clamp(0, 1).double().numpy()
    return image, torch.cat(depth).reshape(h, w).double().numpy()


def write_pfm(path, depth: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    d = np.asarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise ValueError("depth map must be H x W")
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{d.shape[1]} {d.shape[0]}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(d[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype="<f4" if scale < 0 else ">f4", count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)
