import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from n2s.field import RadianceField
from n2s.ingest import Pose
from n2s.render import RenderConfig, generate_rays, pixel_grid, render_rays
from n2s.synthetic import Obstacle, SyntheticScene, SyntheticSceneSpec, generate_synthetic_scene, look_at
from n2s.train import (
    NonFiniteLoss,
    RayBatch,
    TrainConfig,
    blur_augment,
    charbonnier,
    fit,
    loss_terms,
    lr_at_step,
    make_optimizer,
    proposal_loss,
    psnr,
    train_step,
)

PAPER = TrainConfig()
SMALL_RENDER = RenderConfig(near=0.05, far=20.0, spacing="contracted", proposal_samples=8, samples=8)


# --- config, blur, charbonnier, lr, psnr -------------------------------------------------


def test_config_defaults_and_invariants():
    assert (PAPER.batch_size, PAPER.weight_decay, PAPER.lr_init, PAPER.lr_final) == (16384, 5e-5, 2e-3, 4e-5)
    assert (PAPER.warmup_steps, PAPER.max_steps, PAPER.charb_padding, PAPER.distortion_mult) == (2048, 40000, 1e-3, 0.01)
    assert PAPER.blur_sigma_max == 12.0
    with pytest.raises(ValueError):
        TrainConfig(lr_final=1.0)
    with pytest.raises(ValueError):
        TrainConfig(blur_sigma_min=12.0)
    with pytest.raises(ValueError, match="batch_sise"):
        TrainConfig.from_dict({"batch_sise": 3})


def test_blur_examples(rng):
    img = rng.random((16, 16, 3))
    out, scale = blur_augment(img, 0.0)
    np.testing.assert_array_equal(out, img)
    assert scale == 1
    assert blur_augment(img, 12.0)[1] == 13
    const = np.full((10, 12, 3), 0.3)
    np.testing.assert_allclose(blur_augment(const, 5.0)[0], const, atol=1e-12)
    with pytest.raises(ValueError):
        blur_augment(img, 12.5)


def test_blur_matches_explicit_kernel(rng):
    img = rng.random((20, 20))
    sigma = 1.5
    radius = int(3 * sigma + 0.5)
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    ref = ndimage.correlate1d(ndimage.correlate1d(img, k, axis=0, mode="reflect"), k, axis=1, mode="reflect")
    np.testing.assert_allclose(blur_augment(img, sigma)[0], ref, atol=1e-12)


def test_charbonnier_examples():
    assert float(charbonnier(torch.tensor([0.0], dtype=torch.float64))) == pytest.approx(0.001)
    assert float(charbonnier(torch.tensor([1.0], dtype=torch.float64))) == pytest.approx(math.sqrt(1.000001), abs=1e-12)


@given(st.floats(-10, 10))
def test_charbonnier_properties(r):
    t = torch.tensor([r], dtype=torch.float64)
    assert float(charbonnier(t)) == float(charbonnier(-t))
    assert float(charbonnier(t)) >= abs(r)
    assert abs(float(charbonnier(t, 1e-8)) - abs(r)) <= 1e-6


def test_lr_examples():
    assert lr_at_step(2048, PAPER) == pytest.approx(2e-3)
    assert lr_at_step(40000, PAPER) == pytest.approx(4e-5)
    assert lr_at_step(0, PAPER) == 0


def test_lr_continuous_and_monotone():
    steps = np.arange(0, 40001)
    lrs = np.array([lr_at_step(int(s), PAPER) for s in steps[::7]])
    assert np.max(np.abs(np.diff(lrs))) < 1e-5
    after = np.array([lr_at_step(int(s), PAPER) for s in range(2048, 40001, 97)])
    assert np.all(np.diff(after) <= 0)


def test_psnr_examples():
    a = np.full((4, 4, 3), 0.5)
    assert psnr(a, a) == 99.0
    assert psnr(a + 0.1, a) == pytest.approx(20.0)
    assert psnr(np.ones((2, 2)), np.zeros((2, 2))) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((3, 2)))


def test_proposal_loss_zero_when_bounded():
    s = torch.linspace(0, 1, 9, dtype=torch.float64)[None]
    w = torch.rand(1, 8, dtype=torch.float64)
    w = w / w.sum()
    assert float(proposal_loss(s, w, s, w)) < 1e-20
    # final mass exceeding the proposal mass is penalized
    assert float(proposal_loss(s, w * 0.5, s, w)) > 0


# --- synthetic scene ---------------------------------------------------------------


def test_camera_facing_wall_sees_only_that_wall():
    scene = SyntheticScene(SyntheticSceneSpec(obstacles=(), fov_degrees=40.0))
    R = look_at(np.array([0.0, 0.0, 0.8]), np.array([1.0, 0.0, 0.8]))
    cam = scene.camera()
    rays = generate_rays(cam, Pose.from_matrix(R, (0, 0, 0.8)), pixel_grid(cam.width, cam.height), torch.float64)
    _, surface = scene.intersect(rays.origins.numpy(), rays.directions.numpy())
    assert set(surface.tolist()) == {3}


def test_sphere_hit_distance():
    scene = SyntheticScene(SyntheticSceneSpec(obstacles=(Obstacle("sphere", (0.5, 0, 0.5), radius=0.2),)))
    t, surface = scene.intersect(np.array([[-0.5, 0.0, 0.5]]), np.array([[1.0, 0.0, 0.0]]))
    assert surface[0] == 6 and t[0] == pytest.approx(1.0 - 0.2)


def test_render_deterministic_and_sdf_sign():
    spec = SyntheticSceneSpec(width=12, height=10, supersample=2)
    scene = SyntheticScene(spec)
    pose = scene.orbit_poses(1, np.random.default_rng(0))[0]
    np.testing.assert_array_equal(scene.render(pose), scene.render(pose))
    assert scene.sdf(np.array([[0.25, -0.2, 0.3]]))[0] < 0  # sphere center
    assert scene.sdf(np.array([[0.0, 0.0, 1.5]]))[0] > 0  # free air near the ceiling
    assert scene.sdf(np.array([[0.0, 0.0, -0.1]]))[0] < 0  # under the floor


def test_frame_transform_round_trip(rng):
    scene = SyntheticScene(SyntheticSceneSpec(frame_angle_degrees=10, frame_scale=0.5, frame_translation=(1, 2, 3)))
    x = rng.normal(size=(20, 3))
    np.testing.assert_allclose(scene.to_room(scene.to_scene(x)), x, atol=1e-12)


# --- steps ---------------------------------------------------------------------------


def _batch(field, n=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    o = (torch.rand(n, 3, generator=g, dtype=torch.float64) - 0.5) * 0.2
    d = torch.randn(n, 3, generator=g, dtype=torch.float64)
    d = d / torch.linalg.norm(d, dim=-1, keepdim=True)
    from n2s.render import Rays

    rays = Rays(o, d, torch.full((n,), 1e-3, dtype=torch.float64))
    target = torch.rand(n, 3, generator=g, dtype=torch.float64)
    return RayBatch(rays, target, torch.ones(n, dtype=torch.float64))


def test_loss_breakdown_total(tiny_field):
    cfg = TrainConfig(max_steps=10, warmup_steps=0)
    total, (ph, di, pr), _ = loss_terms(tiny_field, _batch(tiny_field), SMALL_RENDER, cfg)
    assert float(total.detach()) == pytest.approx(float((ph + cfg.distortion_mult * di + pr).detach()))


def test_zero_residual_step_is_pure_weight_decay(tiny_field):
    cfg = TrainConfig(max_steps=10, warmup_steps=0, lr_init=1e-2, lr_final=1e-2, distortion_mult=0.0, proposal_mult=0.0)
    batch = _batch(tiny_field)
    with torch.no_grad():
        rgb = render_rays(tiny_field, batch.rays, SMALL_RENDER)["rgb"]
    batch = RayBatch(batch.rays, rgb.clone(), batch.sigma_scale)
    before = {k: v.detach().clone() for k, v in tiny_field.named_parameters()}
    opt = make_optimizer(tiny_field, cfg)
    train_step(tiny_field, opt, batch, 3, cfg, SMALL_RENDER)
    lr = lr_at_step(3, cfg)
    for k, p in tiny_field.named_parameters():
        np.testing.assert_allclose(p.detach(), before[k] * (1 - lr * cfg.weight_decay), rtol=1e-12, atol=1e-15)


def test_loss_decreases_on_fixed_batch(tiny_field):
    cfg = TrainConfig(max_steps=100, warmup_steps=5, lr_init=1e-2, lr_final=1e-3)
    batch = _batch(tiny_field, n=128)
    opt = make_optimizer(tiny_field, cfg)
    losses = [train_step(tiny_field, opt, batch, s, cfg, SMALL_RENDER).photometric for s in range(100)]
    assert np.mean(losses[-10:]) < 0.8 * np.mean(losses[:5])


def test_identical_seeds_identical_breakdowns(tiny_field_config):
    def run():
        f = RadianceField(tiny_field_config, seed=5).double()
        cfg = TrainConfig(max_steps=5, warmup_steps=1)
        opt = make_optimizer(f, cfg)
        g = torch.Generator().manual_seed(9)
        return [train_step(f, opt, _batch(f), s, cfg, SMALL_RENDER, g) for s in range(5)]

    assert run() == run()


def test_non_finite_loss_raises(tiny_field):
    batch = _batch(tiny_field)
    batch = RayBatch(batch.rays, torch.full_like(batch.targets, float("nan")), batch.sigma_scale)
    cfg = TrainConfig(max_steps=2, warmup_steps=0)
    with pytest.raises(NonFiniteLoss) as err:
        train_step(tiny_field, make_optimizer(tiny_field, cfg), batch, 0, cfg, SMALL_RENDER)
    assert math.isnan(err.value.breakdown.photometric)


# --- fit ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_scene():
    spec = SyntheticSceneSpec(width=10, height=8, supersample=1)
    return generate_synthetic_scene(spec, 4, 1, seed=0)


def test_fit_zero_steps_returns_initial(tiny_scene, tiny_field_config):
    train, _, _ = tiny_scene
    f = RadianceField(tiny_field_config, seed=1)
    before = {k: v.clone() for k, v in f.state_dict().items()}
    res = fit(train, tiny_field_config, SMALL_RENDER, TrainConfig(max_steps=0), initial_field=f)
    assert all(torch.equal(before[k], v) for k, v in res.field.state_dict().items())


def test_fit_metrics_and_determinism(tiny_scene, tiny_field_config, tmp_path):
    train, test, _ = tiny_scene
    cfg = TrainConfig(max_steps=6, warmup_steps=2, batch_size=32, eval_every=3, blur_sigma_max=2.0)

    def run(name):
        path = tmp_path / f"{name}.csv"
        fit(train, tiny_field_config, SMALL_RENDER, cfg, test=test, metrics_path=path)
        return path.read_text()

    a, b = run("a"), run("b")
    assert a == b
    lines = a.strip().splitlines()
    assert lines[0] == "step,lr,photometric,distortion,proposal,psnr"
    assert len(lines) == 1 + cfg.max_steps
    assert lines[3].split(",")[-1] != "" and lines[1].split(",")[-1] == ""


def test_fit_resume_continues_steps(tiny_scene, tiny_field_config, tmp_path):
    from n2s.checkpoint import load_checkpoint

    train, _, _ = tiny_scene
    ck = tmp_path / "c.n2s"
    metrics = tmp_path / "m.csv"
    cfg = TrainConfig(max_steps=3, warmup_steps=1, batch_size=16)
    fit(train, tiny_field_config, SMALL_RENDER, cfg, checkpoint_path=ck, metrics_path=metrics)
    field, extras = load_checkpoint(ck)
    assert extras["step"] == 3
    cfg2 = TrainConfig(max_steps=5, warmup_steps=1, batch_size=16)
    fit(train, tiny_field_config, SMALL_RENDER, cfg2, checkpoint_path=ck, metrics_path=metrics,
        resume_from=ck, initial_field=field, start_step=3)
    steps = [int(line.split(",")[0]) for line in metrics.read_text().strip().splitlines()[1:]]
    assert steps == [1, 2, 3, 4, 5]
