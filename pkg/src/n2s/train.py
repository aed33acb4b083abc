"""Radiance-field optimization: augmentation, losses, schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch
from scipy import ndimage

from .checkpoint import restore_optimizer, save_checkpoint
from .field import FieldConfig, RadianceField
from .ingest import SceneDataset
from .render import RenderConfig, Rays, distortion_loss, generate_rays, pixel_grid, render_image, render_rays
from .synthetic import SyntheticSceneSpec, generate_synthetic_scene  # noqa: F401  (re-export)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "lr", "photometric", "distortion", "proposal", "psnr")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, breakdown: "LossBreakdown"):
        super().__init__(f"non-finite loss: {breakdown}")
        self.breakdown = breakdown


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16384
    weight_decay: float = 5e-5
    lr_init: float = 2e-3
    lr_final: float = 4e-5
    warmup_steps: int = 2048
    max_steps: int = 40000
    charb_padding: float = 0.001
    distortion_mult: float = 0.01
    proposal_mult: float = 1.0
    blur: bool = True
    blur_sigma_min: float = 0.0
    blur_sigma_max: float = 12.0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    eval_every: int = 1000
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if not 0 <= self.blur_sigma_min < self.blur_sigma_max:
            raise ValueError("need 0 <= blur_sigma_min < blur_sigma_max")
        if self.batch_size < 1 or self.max_steps < 0 or self.warmup_steps < 0:
            raise ValueError("batch_size must be >= 1; max_steps and warmup_steps >= 0")
        for name in ("weight_decay", "lr_init", "lr_final", "charb_padding", "distortion_mult"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        for key in d:
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"unknown train config key '{key}'")
        return cls(**d)


def desk_train_config(**overrides) -> TrainConfig:
    """CPU-scale schedule for small synthetic scenes."""
    base = dict(
        batch_size=1024,
        max_steps=5000,
        warmup_steps=200,
        lr_init=1e-2,
        lr_final=2e-4,
        blur_sigma_max=1.2,  # the full-scale 12 px, scaled to ~64 px images
        eval_every=1000,
    )
    base.update(overrides)
    return TrainConfig(**base)


class LossBreakdown(NamedTuple):
    photometric: float
    distortion: float
    proposal: float
    total: float


# --- elementary pieces -------------------------------------------------------


def blur_augment(image: np.ndarray, sigma_blur: float, sigma_min: float = 0.0, sigma_max: float = 12.0):
    """Gaussian-blur an image by ``sigma_blur`` pixels; returns it with the Σ scale factor."""
    if not sigma_min <= sigma_blur <= sigma_max:
        raise ValueError(f"sigma_blur {sigma_blur} outside [{sigma_min}, {sigma_max}]")
    image = np.asarray(image)
    scale = 1.0 + (sigma_blur - sigma_min)
    if sigma_blur <= 0:
        return image.copy(), scale
    sig = (sigma_blur, sigma_blur) + (0,) * (image.ndim - 2)
    return ndimage.gaussian_filter(image, sig, mode="reflect", truncate=3.0), scale


def charbonnier(residual, padding: float = 0.001):
    r = torch.as_tensor(residual)
    return torch.sqrt(r * r + padding * padding).mean()


def lr_at_step(step: int, config: TrainConfig) -> float:
    if config.warmup_steps > 0:
        ramp = min(1.0, step / config.warmup_steps)
    else:
        ramp = 1.0
    span = max(config.max_steps - config.warmup_steps, 1)
    frac = min(max(0, step - config.warmup_steps) / span, 1.0)
    if config.lr_init == 0:
        return 0.0
    return ramp * config.lr_init * (config.lr_final / config.lr_init) ** frac


def psnr(image, reference) -> float:
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch {image.shape} vs {reference.shape}")
    mse = float(np.mean((image - reference) ** 2))
    if mse < 1e-10:
        return 99.0
    return -10.0 * math.log10(mse)


def proposal_loss(s_prop, w_prop, s_final, w_final) -> torch.Tensor:
    """Penalize final weights that exceed the proposal mass over the same span.

    ``w_final`` is treated as a constant target.
    """
    w_final = w_final.detach()
    cw = torch.cat([torch.zeros_like(w_prop[..., :1]), torch.cumsum(w_prop, dim=-1)], dim=-1)
    n_prop = w_prop.shape[-1]
    lo = (torch.searchsorted(s_prop.contiguous(), s_final[..., :-1].contiguous(), right=True) - 1).clamp(0, n_prop - 1)
    hi = torch.searchsorted(s_prop.contiguous(), s_final[..., 1:].contiguous(), right=False)
    hi = torch.maximum(hi, lo + 1).clamp(max=n_prop)
    outer = cw.gather(-1, hi) - cw.gather(-1, lo)
    excess = torch.clamp(w_final - outer, min=0)
    return (excess**2 / (w_final + 1e-5)).sum(-1).mean()


# --- batches and steps -----------------------------------------------------


class RayBatch(NamedTuple):
    rays: Rays
    targets: torch.Tensor
    sigma_scale: torch.Tensor


def loss_terms(field: RadianceField, batch: RayBatch, render_config: RenderConfig, config: TrainConfig, generator=None):
    out = render_rays(field, batch.rays, render_config, batch.sigma_scale, generator)
    photometric = charbonnier(out["rgb"] - batch.targets, config.charb_padding)
    dist = distortion_loss(out["weights"], out["s_mid"], out["s_width"]).mean()
    s1 = out["stage1"]
    prop = proposal_loss(s1.s_edges, s1.weights, out["stage2"].s_edges, out["weights"])
    total = photometric + config.distortion_mult * dist + config.proposal_mult * prop
    return total, (photometric, dist, prop), out


def make_optimizer(field: RadianceField, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        field.parameters(),
        lr=config.lr_init,
        betas=(config.beta1, config.beta2),
        eps=config.eps,
        weight_decay=config.weight_decay,
        foreach=False,
    )


def train_step(
    field: RadianceField,
    optimizer: torch.optim.Optimizer,
    batch: RayBatch,
    step: int,
    config: TrainConfig,
    render_config: RenderConfig,
    generator: torch.Generator | None = None,
) -> LossBreakdown:
    lr = lr_at_step(step, config)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=False)
    total, (ph, di, pr), _ = loss_terms(field, batch, render_config, config, generator)
    breakdown = LossBreakdown(*(t.detach().item() for t in (ph, di, pr, total)))
    if not all(math.isfinite(v) for v in breakdown):
        raise NonFiniteLoss(breakdown)
    total.backward()
    for p in field.parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
    optimizer.step()
    return breakdown


# --- training loop ----------------------------------------------------------


class RayStore:
    """All training rays of a dataset plus per-epoch blurred targets."""

    def __init__(self, dataset: SceneDataset, dtype=torch.float32):
        cam = dataset.camera
        grid = pixel_grid(cam.width, cam.height)
        self.dataset = dataset
        self.hw = cam.width * cam.height
        origins, dirs = [], []
        for im in dataset.images:
            r = generate_rays(cam, im.pose, grid, dtype=dtype)
            origins.append(r.origins[0])
            dirs.append(r.directions)
        self.origins = torch.stack(origins)
        self.dirs = torch.stack(dirs)
        self.radius = float(r.radii[0])
        self.raw = np.stack([np.asarray(im.image, dtype=np.float64) for im in dataset.images])
        self.dtype = dtype
        self.targets = torch.as_tensor(self.raw.reshape(len(dataset), -1, 3), dtype=dtype)
        self.scales = torch.ones(len(dataset), dtype=dtype)

    def reblur(self, config: TrainConfig, rng: np.random.Generator) -> None:
        if not config.blur:
            return
        sigmas = rng.uniform(config.blur_sigma_min, config.blur_sigma_max, size=len(self.raw))
        blurred, scales = zip(
            *(blur_augment(img, s, config.blur_sigma_min, config.blur_sigma_max) for img, s in zip(self.raw, sigmas))
        )
        self.targets = torch.as_tensor(np.stack(blurred).reshape(len(self.raw), -1, 3), dtype=self.dtype)
        self.scales = torch.as_tensor(scales, dtype=self.dtype)

    def sample(self, batch_size: int, generator: torch.Generator) -> RayBatch:
        img = torch.randint(len(self.raw), (batch_size,), generator=generator)
        pix = torch.randint(self.hw, (batch_size,), generator=generator)
        rays = Rays(self.origins[img], self.dirs[img, pix], torch.full((batch_size,), self.radius, dtype=self.dtype))
        return RayBatch(rays, self.targets[img, pix], self.scales[img])


def evaluate_psnr(
    field: RadianceField,
    dataset: SceneDataset,
    render_config: RenderConfig,
    resolution: tuple[int, int] | None = None,
    references: list[np.ndarray] | None = None,
) -> float:
    """Mean PSNR of renders against dataset images (or given references)."""
    scores = []
    for k, im in enumerate(dataset.images):
        img, _ = render_image(field, dataset.camera, im.pose, render_config, resolution)
        ref = references[k] if references is not None else im.image
        scores.append(psnr(img, ref))
    return float(np.mean(scores))


@dataclass
class FitResult:
    field: RadianceField
    history: list[dict] = field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = None


def fit(
    dataset: SceneDataset,
    field_config: FieldConfig,
    render_config: RenderConfig,
    config: TrainConfig,
    test: SceneDataset | None = None,
    checkpoint_path=None,
    metrics_path=None,
    resume_from=None,
    initial_field: RadianceField | None = None,
    start_step: int = 0,
    progress: Callable[[int, LossBreakdown], None] | None = None,
    extras: dict | None = None,
) -> FitResult:
    """Train a field on ``dataset`` for ``config.max_steps`` steps.

    Steps are numbered from ``start_step``; resuming passes the previous
    field, its checkpoint (for optimizer moments) and the step reached.
    Held-out PSNR is logged every ``eval_every`` steps and at the end.
    ``extras`` are stored in every checkpoint next to the step count.
    """
    torch.manual_seed(config.seed)
    field_ = initial_field if initial_field is not None else RadianceField(field_config, seed=config.seed)
    optimizer = make_optimizer(field_, config)
    if resume_from is not None:
        restore_optimizer(resume_from, field_, optimizer)
    history: list[dict] = []
    if start_step >= config.max_steps:
        return FitResult(field_, history, optimizer)
    store = RayStore(dataset)
    rng = np.random.default_rng(config.seed + 7919 * start_step)
    generator = torch.Generator().manual_seed(config.seed + start_step)
    steps_per_epoch = max(1, math.ceil(len(dataset) * store.hw / config.batch_size))
    writer = None
    fh = None
    if metrics_path is not None:
        new = start_step == 0 or not Path(metrics_path).exists()
        fh = open(metrics_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRIC_COLUMNS)
    try:
        for step in range(start_step, config.max_steps):
            if (step - start_step) % steps_per_epoch == 0:
                store.reblur(config, rng)
            batch = store.sample(config.batch_size, generator)
            loss = train_step(field_, optimizer, batch, step, config, render_config, generator)
            done = step + 1
            row = {
                "step": done,
                "lr": lr_at_step(step, config),
                "photometric": loss.photometric,
                "distortion": loss.distortion,
                "proposal": loss.proposal,
                "psnr": "",
            }
            if test is not None and config.eval_every > 0 and (done % config.eval_every == 0 or done == config.max_steps):
                row["psnr"] = evaluate_psnr(field_, test, render_config)
                log.info("step %d psnr %.2f", done, row["psnr"])
            history.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
            if progress is not None:
                progress(done, loss)
            if checkpoint_path is not None and config.checkpoint_every > 0 and done % config.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, field_, {**(extras or {}), "step": done}, optimizer)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, field_, {**(extras or {}), "step": config.max_steps}, optimizer)
    return FitResult(field_, history, optimizer)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
