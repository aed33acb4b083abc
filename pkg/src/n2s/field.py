"""Hash-grid radiance field and its density-only proposal field.

Every parameter lives on a :class:`RadianceField` module. Forward evaluation
works on batches; gradients come from torch autograd, which recomputes
nothing because the graph is built during the forward pass that needs it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
from torch import nn

from ._hashkernel import hash_encode_fused

# Spatial hash primes, one per axis.
PRIMES = (1, 2654435761, 805459861)

DENSITY_BIAS = -5.0


class CorruptParameters(ValueError):
    pass


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 12
    table_size: int = 2**20
    features_per_level: int = 2
    base_resolution: int = 16
    finest_resolution: int = 2048
    per_level_scale: float | None = None

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if self.features_per_level < 1:
            raise ValueError("features_per_level must be >= 1")
        if self.base_resolution < 1:
            raise ValueError("base_resolution must be >= 1")

    @property
    def scale(self) -> float:
        if self.per_level_scale is not None:
            return float(self.per_level_scale)
        if self.levels == 1:
            return 1.0
        return math.exp(
            math.log(self.finest_resolution / self.base_resolution) / (self.levels - 1)
        )

    def resolutions(self) -> list[int]:
        return [int(math.floor(self.base_resolution * self.scale**l)) for l in range(self.levels)]

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level


@dataclass(frozen=True)
class FieldConfig:
    hash: HashGridConfig = field(default_factory=HashGridConfig)
    mlp_depth: int = 2
    mlp_width: int = 64
    viewdir_width: int = 32
    view_frequencies: int = 4
    proposal_hash: HashGridConfig = field(
        default_factory=lambda: HashGridConfig(levels=8, table_size=2**18, finest_resolution=512)
    )
    proposal_depth: int = 2
    proposal_width: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        for key in d:
            if key not in known:
                raise ValueError(f"unknown field config key '{key}'")
        for key in ("hash", "proposal_hash"):
            if key in d and isinstance(d[key], dict):
                hk = set(HashGridConfig.__dataclass_fields__)
                for sub in d[key]:
                    if sub not in hk:
                        raise ValueError(f"unknown field config key '{key}.{sub}'")
                d[key] = HashGridConfig(**d[key])
        return cls(**d)


def desk_field_config() -> FieldConfig:
    """Reduced field used for CPU-scale scenes."""
    return FieldConfig(
        hash=HashGridConfig(levels=8, table_size=2**14, finest_resolution=256),
        proposal_hash=HashGridConfig(levels=5, table_size=2**12, finest_resolution=64),
    )


class RadianceSample(NamedTuple):
    density: torch.Tensor
    diffuse: torch.Tensor
    specular: torch.Tensor
    color: torch.Tensor


def squareplus(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * (x + torch.sqrt(x * x + 4.0))


def swish(x: torch.Tensor) -> torch.Tensor:
    return nn.functional.silu(x)


def hash_index(coords: torch.Tensor, table_size: int) -> torch.Tensor:
    """Hash integer grid coordinates ``(..., 3)`` into ``[0, table_size)``."""
    coords = coords.long()
    h = coords[..., 0] * PRIMES[0]
    h = h ^ (coords[..., 1] * PRIMES[1])
    h = h ^ (coords[..., 2] * PRIMES[2])
    return h & (table_size - 1)


_CORNERS = [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)]


def hash_encode(positions: torch.Tensor, config: HashGridConfig, tables: torch.Tensor) -> torch.Tensor:
    """Multiresolution hash encoding of points in ``[0, 1]^3``.

    ``tables`` has shape ``(levels, table_size, features_per_level)``. Returns
    ``(N, levels * features_per_level)`` with levels ordered coarse to fine.
    """
    return hash_encode_fused(positions, config.resolutions(), tables)


def hash_encode_reference(positions: torch.Tensor, config: HashGridConfig, tables: torch.Tensor) -> torch.Tensor:
    """Pure-torch version of :func:`hash_encode`, kept as a cross-check."""
    n = positions.shape[0]
    L, T, F = tables.shape
    res = torch.tensor(config.resolutions(), dtype=positions.dtype, device=positions.device)
    scaled = positions[:, None, :] * res[None, :, None]
    base = torch.floor(scaled)
    frac = scaled - base
    base = base.long()
    mask = T - 1
    # Per-axis hashed terms for offset 0 and 1; XOR and the mask commute.
    hx = (base[..., 0] * PRIMES[0], (base[..., 0] + 1) * PRIMES[0])
    hy = (base[..., 1] * PRIMES[1], (base[..., 1] + 1) * PRIMES[1])
    hz = (base[..., 2] * PRIMES[2], (base[..., 2] + 1) * PRIMES[2])
    wx = (1 - frac[..., 0], frac[..., 0])
    wy = (1 - frac[..., 1], frac[..., 1])
    wz = (1 - frac[..., 2], frac[..., 2])
    level_offset = (torch.arange(L, device=positions.device) * T)[None, :]
    idx = torch.stack(
        [((hx[i] ^ hy[j] ^ hz[k]) & mask) + level_offset for i, j, k in _CORNERS], dim=-1
    )
    w = torch.stack([wx[i] * wy[j] * wz[k] for i, j, k in _CORNERS], dim=-1)
    feats = nn.functional.embedding(idx, tables.reshape(L * T, F))
    out = (w[..., None] * feats).sum(dim=2)
    return out.reshape(n, L * F)


def encode_viewdir(d: torch.Tensor, frequencies: int) -> torch.Tensor:
    freqs = (2.0 ** torch.arange(frequencies, dtype=d.dtype, device=d.device)) * math.pi
    x = d[..., None, :] * freqs[:, None]
    return torch.cat([torch.sin(x), torch.cos(x)], dim=-1).reshape(d.shape[0], -1)


def encode_sigma(sigma: torch.Tensor, finest_resolution: int) -> torch.Tensor:
    """Scale-space side input: log-compressed variances in finest-cell units plus their mean.

    Raw variances are ~1e-6 in contracted units and would be invisible next to
    layer-normalized features.
    """
    s = torch.log1p(sigma.clamp_min(0) * float(finest_resolution) ** 2)
    return torch.cat([s, s.mean(dim=-1, keepdim=True)], dim=-1)


def _kaiming_(layer: nn.Linear, generator: torch.Generator) -> None:
    bound = math.sqrt(6.0 / layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        layer.bias.zero_()


class HashGrid(nn.Module):
    def __init__(self, config: HashGridConfig):
        super().__init__()
        self.config = config
        self.tables = nn.Parameter(
            torch.zeros(config.levels, config.table_size, config.features_per_level)
        )

    def forward(self, positions: torch.Tensor) -> torch.Tensor:
        return hash_encode(positions, self.config, self.tables)


class Trunk(nn.Module):
    def __init__(self, in_dim: int, depth: int, width: int):
        super().__init__()
        dims = [in_dim] + [width] * depth
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = swish(layer(x))
        return x


class ProposalField(nn.Module):
    def __init__(self, config: FieldConfig):
        super().__init__()
        self.grid = HashGrid(config.proposal_hash)
        self.trunk = Trunk(config.proposal_hash.output_dim, config.proposal_depth, config.proposal_width)
        self.density_head = nn.Linear(config.proposal_width, 1)

    def forward(self, positions: torch.Tensor) -> torch.Tensor:
        h = self.trunk(self.grid(positions))
        return squareplus(self.density_head(h)[..., 0] + DENSITY_BIAS)


class RadianceField(nn.Module):
    """All learnable parameters of the scene model.

    The main field maps (position, scale-space Σ, view direction) to density
    and diffuse/specular color; ``proposal`` is the density-only sampler.
    """

    def __init__(self, config: FieldConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or FieldConfig()
        w = config.mlp_width
        self.grid = HashGrid(config.hash)
        self.trunk = Trunk(config.hash.output_dim, config.mlp_depth, w)
        self.density_head = nn.Linear(w, 1)
        self.norm = nn.LayerNorm(w)
        final_in = w + 4
        view_in = final_in + 6 * config.view_frequencies
        self.diffuse_head = nn.Linear(final_in, 3)
        self.view_hidden = nn.Linear(view_in, config.viewdir_width)
        self.specular_head = nn.Linear(config.viewdir_width, 3)
        self.proposal = ProposalField(config)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for grid in (self.grid, self.proposal.grid):
                grid.tables.uniform_(-1e-4, 1e-4, generator=g)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _kaiming_(m, g)
        with torch.no_grad():
            self.norm.weight.fill_(1.0)
            self.norm.bias.zero_()

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise CorruptParameters(f"corrupt parameters: non-finite values in {name}")

    def trunk_features(self, positions: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.trunk(self.grid(positions))
        density = squareplus(self.density_head(h)[..., 0] + DENSITY_BIAS)
        return h, density

    def density(self, positions: torch.Tensor) -> torch.Tensor:
        return self.trunk_features(positions)[1]

    def forward(
        self, positions: torch.Tensor, sigma: torch.Tensor, view_dirs: torch.Tensor
    ) -> RadianceSample:
        h, density = self.trunk_features(positions)
        final = torch.cat([self.norm(h), encode_sigma(sigma, self.config.hash.finest_resolution)], dim=-1)
        diffuse = torch.sigmoid(self.diffuse_head(final))
        view = torch.cat([final, encode_viewdir(view_dirs, self.config.view_frequencies)], dim=-1)
        specular = torch.sigmoid(self.specular_head(swish(self.view_hidden(view))))
        color = torch.clamp(diffuse + specular, 0.0, 1.0)
        return RadianceSample(density, diffuse, specular, color)

    def proposal_density(self, positions: torch.Tensor) -> torch.Tensor:
        return self.proposal(positions)


def field_forward(field_: RadianceField, positions, sigma, view_dirs) -> RadianceSample:
    """Validated forward pass for a batch of field inputs."""
    field_.check_finite()
    positions, sigma, view_dirs = (torch.as_tensor(a, dtype=field_.grid.tables.dtype) for a in (positions, sigma, view_dirs))
    if positions.ndim != 2 or positions.shape[-1] != 3:
        raise ValueError("positions must have shape (N, 3)")
    return field_(positions, sigma, view_dirs)


def proposal_forward(field_: RadianceField, positions) -> torch.Tensor:
    field_.check_finite()
    positions = torch.as_tensor(positions, dtype=field_.grid.tables.dtype)
    return field_.proposal_density(positions)


def field_gradients(
    field_: RadianceField,
    positions,
    sigma,
    view_dirs,
    grad_density,
    grad_color,
) -> tuple[dict[str, torch.Tensor], torch.Tensor]:
    """Reverse-mode gradients of ``sum(grad_density*density + grad_color*color)``.

    Returns a mapping of parameter name to gradient (zeros where there is no
    data path) and the gradient with respect to the input positions.
    """
    dtype = field_.grid.tables.dtype
    positions = torch.as_tensor(positions, dtype=dtype).detach().clone().requires_grad_(True)
    sigma = torch.as_tensor(sigma, dtype=dtype)
    view_dirs = torch.as_tensor(view_dirs, dtype=dtype)
    grad_density = torch.as_tensor(grad_density, dtype=dtype)
    grad_color = torch.as_tensor(grad_color, dtype=dtype)
    n = positions.shape[0]
    if grad_density.shape != (n,) or grad_color.shape != (n, 3):
        raise ValueError(
            f"upstream gradient shapes {tuple(grad_density.shape)}, {tuple(grad_color.shape)} "
            f"do not match batch of {n}"
        )
    out = field_(positions, sigma, view_dirs)
    names, params = zip(*[(k, p) for k, p in field_.named_parameters() if not k.startswith("proposal.")])
    grads = torch.autograd.grad(
        out.density,
        (positions, *params),
        grad_outputs=grad_density,
        retain_graph=True,
        allow_unused=True,
    )
    grads_c = torch.autograd.grad(out.color, (positions, *params), grad_outputs=grad_color, allow_unused=True)
    total = []
    for a, b, ref in zip(grads, grads_c, (positions, *params)):
        g = torch.zeros_like(ref)
        if a is not None:
            g = g + a
        if b is not None:
            g = g + b
        total.append(g)
    return dict(zip(names, total[1:])), total[0]
