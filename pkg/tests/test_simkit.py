import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from n2s.simkit import (
    RANDOMIZATION_RANGES,
    AugmentParams,
    DelayLine,
    JointSpec,
    RewardConfig,
    RewardInputs,
    augment_image,
    delay_line,
    exponential_filter,
    gravity_aligned_frame,
    load_joint_specs,
    r_ball,
    r_navigate,
    r_navigate_sparse,
    r_pose,
    r_speed,
    r_turn,
    reward_components,
    rho,
    sample_randomization,
    total_reward,
)

UPRIGHT = (1.0, 0.0, 0.0, 0.0)


# --- joints ---------------------------------------------------------------------------


def test_joint_table_loaded_verbatim():
    joints = load_joint_specs("navigation")
    assert len(joints) == 20
    knee = next(j for j in joints if j.name == "left_knee")
    assert knee.reference_pose == pytest.approx(1.0646)
    assert knee.range == (-0.2, 2.0)
    ball = {j.name: j for j in load_joint_specs("ball_pushing")}
    assert ball["head_pan"].range == (-2.5, 2.5)
    with pytest.raises(ValueError):
        JointSpec("x", 0.0, (1.0, 1.0))


# --- frames ---------------------------------------------------------------------------


def test_gravity_frame_upright_identity():
    np.testing.assert_allclose(gravity_aligned_frame(UPRIGHT, (0, 0, -1)), np.eye(3), atol=1e-15)


def test_gravity_frame_pitch_30():
    a = math.radians(30)
    R = gravity_aligned_frame(UPRIGHT, (0, math.sin(a), -math.cos(a)))
    rv = Rotation.from_matrix(R).as_rotvec()
    np.testing.assert_allclose(rv, (a, 0, 0), atol=1e-12)


def test_gravity_frame_antipodal_about_x():
    R = gravity_aligned_frame(UPRIGHT, (0, 0, 1))
    np.testing.assert_allclose(R @ (0, 0, -1), (0, 0, 1), atol=1e-12)
    rv = Rotation.from_matrix(R).as_rotvec()
    np.testing.assert_allclose(np.abs(rv), (math.pi, 0, 0), atol=1e-9)


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_gravity_frame_properties(g):
    g = np.asarray(g)
    if np.linalg.norm(g) < 1e-3:
        return
    g = g / np.linalg.norm(g)
    R = gravity_aligned_frame(UPRIGHT, g)
    np.testing.assert_allclose(R.T @ g, (0, 0, -1), atol=1e-9)
    angle = Rotation.from_matrix(R).magnitude()
    assert angle == pytest.approx(math.acos(np.clip(-g[2], -1, 1)), abs=1e-6)


# --- rewards --------------------------------------------------------------------------


def test_r_turn_examples():
    assert r_turn(0.0) == 0
    assert r_turn(math.pi) == 0
    assert r_turn(-3.5) == -1
    assert r_turn(-3.5, as_speed=False) == 0


def test_r_pose_examples():
    joints = load_joint_specs()
    ref = np.array([j.reference_pose for j in joints])
    assert r_pose(ref, joints) == 0
    q = ref.copy()
    q[3] += joints[3].span
    assert r_pose(q, joints) == pytest.approx(math.sqrt(1 / 20), abs=1e-12)
    perm = np.random.default_rng(0).permutation(20)
    q2 = ref + np.random.default_rng(1).normal(size=20)
    assert r_pose(q2[perm], [joints[i] for i in perm]) == pytest.approx(r_pose(q2, joints))


def test_r_speed_examples():
    assert r_speed((0.3, 0, 0)) == pytest.approx(1)
    assert r_speed((0, 0, 0)) == pytest.approx(0)
    assert r_speed((-0.3, 0, 0)) == pytest.approx(-1)


def test_navigate_examples():
    assert r_navigate_sparse((0.1, 0)) == 1
    assert r_navigate_sparse((0.25, 0)) == 0
    assert r_navigate_sparse((10, 0)) == 0
    goal = np.array([3.0, 4.0])
    hat = goal / 5
    assert r_navigate(0.3 * hat, goal) == pytest.approx(1)
    assert r_navigate((0, 0), goal) == pytest.approx(0)
    assert r_navigate(-0.3 * hat, goal) == pytest.approx(-1)
    assert r_navigate((0.1, 0.2), (0.0, 0.0)) == 1


def test_rho_examples():
    assert rho(0, 0) == 1
    assert rho(1e6, 0) == 0
    # direct evaluation of the closed form (printed value 0.53488 is rounded loosely)
    assert rho(1, -1) == pytest.approx(math.exp(-2) + (1 - math.exp(-1)) ** 2, abs=1e-12)


def test_rho_bounded_and_monotone():
    rng = np.random.default_rng(0)
    d = rng.exponential(2.0, 100_000)
    v = rng.normal(0, 3, 100_000)
    r = rho(d, v)
    assert np.all((r >= 0) & (r <= 1))
    dd = np.linspace(0, 5, 200)
    for vv in (0.0, 0.5, 2.0):
        assert np.all(np.diff(rho(dd, vv)) <= 1e-15)


def test_r_ball_examples():
    assert r_ball(0, 0, 5, 1) == 1
    assert r_ball(1e6, 0, 0, 0) == pytest.approx(0.5)
    assert r_ball(1e6, 0, 1e6, 0) == 0


@given(st.floats(0, 20), st.floats(-20, 20), st.floats(0, 20), st.floats(-20, 20))
def test_r_ball_bounds(dg, vg, db, vb):
    r = r_ball(dg, vg, db, vb)
    assert 0 <= r <= 1
    assert (r == 1) == (rho(dg, vg) == 1)


def test_total_reward_examples():
    assert total_reward("navigation", {}) == 0
    assert total_reward("navigation", {"navigate_sparse": 1}) == 1
    comps = {"turn": -1, "speed": 1, "pose": 0.2, "navigate_sparse": 0, "navigate": 1}
    assert total_reward("navigation", comps) == pytest.approx(-0.35)
    assert total_reward("navigation", comps, RewardConfig(pose_sign=1.0)) == pytest.approx(-0.15)
    assert total_reward("ball_pushing", {"ball": 1, "speed": 1}) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        total_reward("navigation", {"ball": 1})


def test_reward_components_end_to_end():
    joints = load_joint_specs()
    inputs = RewardInputs(omega_yaw=4.0, q=[j.reference_pose for j in joints], v_feet=(0.3, 0, 0), x_goal=(0.1, 0))
    comps = reward_components(inputs, RewardConfig())
    assert comps == {"turn": -1, "speed": pytest.approx(1), "pose": 0, "navigate_sparse": 1, "navigate": pytest.approx(1)}
    with pytest.raises(ValueError):
        RewardInputs(d_ball=-1)


# --- filter and delay -----------------------------------------------------------------


def test_filter_examples():
    assert exponential_filter(0.7, 0.7) == pytest.approx(0.7)
    y = exponential_filter(0.0, 1.0)
    assert y == pytest.approx(0.2)
    assert exponential_filter(y, 1.0) == pytest.approx(0.36)


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_filter_contraction(prev, c):
    y = exponential_filter(prev, c)
    assert abs(y - c) == pytest.approx(0.8 * abs(prev - c), abs=1e-12)


def test_delay_examples():
    ticks = [(k * 25.0, k) for k in range(10)]
    assert delay_line(ticks, 0, 0, 225.0) == 9
    assert delay_line(ticks, 25, 0, 225.0) == 8
    assert delay_line(ticks, 50, 0, 10.0) == 0


def test_delay_jitter_seeded():
    ticks = [(k * 1.0, k) for k in range(100)]
    a = [delay_line(ticks, 10, 5, 80.0, seed=s) for s in range(20)]
    b = [delay_line(ticks, 10, 5, 80.0, seed=s) for s in range(20)]
    assert a == b
    assert all(65 <= x <= 70 for x in a)


@given(st.lists(st.floats(0, 1000), min_size=2, max_size=30))
def test_delay_monotone_without_jitter(queries):
    line = DelayLine(17.0)
    for k in range(50):
        line.push(k * 20.0, k)
    out = [line.query(t) for t in sorted(queries)]
    assert out == sorted(out)


# --- randomization --------------------------------------------------------------------


def test_randomization_ranges_statistics():
    draws = [sample_randomization("ball_pushing", s) for s in range(10_000)]
    for name in ("sensor_delay", "added_mass", "imu_tilt", "ball_mass", "ball_radius"):
        lo, hi = RANDOMIZATION_RANGES[name]
        vals = np.array([getattr(d, name) for d in draws])
        assert vals.min() >= lo and vals.max() <= hi
        assert vals.min() - lo <= 0.02 * (hi - lo) and hi - vals.max() <= 0.02 * (hi - lo)
    shifts = np.array([np.linalg.norm(d.imu_shift) for d in draws])
    assert shifts.max() <= 0.005 + 1e-12
    assert all(d.jitter == 5.0 for d in draws)


def test_randomization_seeded_and_task_fields():
    assert sample_randomization("navigation", 3) == sample_randomization("navigation", 3)
    nav = sample_randomization("navigation", 3)
    assert nav.ball_mass is None and nav.ball_radius is None
    lo, hi = RANDOMIZATION_RANGES["ball_mass"]
    assert lo <= 0.651 <= hi
    lo, hi = RANDOMIZATION_RANGES["ball_radius"]
    assert lo <= 0.12 <= hi
    assert set(nav.to_dict()) >= {"sensor_delay", "jitter", "added_mass", "imu_shift", "imu_tilt"}


# --- augmentation ---------------------------------------------------------------------


def test_augment_identity_and_clamp(rng):
    img = rng.random((12, 16, 3))
    np.testing.assert_array_equal(augment_image(img, AugmentParams()), img)
    bright = np.full((2, 2, 3), 250 / 255)
    np.testing.assert_array_equal(augment_image(bright, AugmentParams(brightness=32 / 255)), 1.0)


def test_augment_hue_full_turn(rng):
    img = rng.random((8, 8, 3))
    np.testing.assert_allclose(augment_image(img, AugmentParams(hue=1.0)), img, atol=1e-12)
    with pytest.raises(ValueError):
        AugmentParams(contrast=2.0)


def test_augment_translation_edge_replicates():
    img = np.zeros((20, 20, 3))
    img[:, 0] = 1.0
    out = augment_image(img, AugmentParams(translation=(0.05, 0.0)))
    assert np.all(out[:, :2] == 1.0) and np.all(out[:, 2:] == 0.0)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_augment_stays_in_unit_range(seed):
    r = np.random.default_rng(seed)
    img = r.random((10, 12, 3))
    out = augment_image(img, AugmentParams.sample(r))
    assert out.shape == img.shape
    assert out.min() >= 0 and out.max() <= 1
