import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from n2s.field import RadianceField
from n2s.geometry import (
    DensityGrid,
    SimilarityTransform,
    TriangleMesh,
    apply_transform,
    cell_centers,
    compute_alignment,
    crop_mesh,
    export_obj,
    fit_floor_plane,
    free_space_map,
    import_obj,
    marching_cubes,
    replace_floor,
    rotation_between,
    voxelize_density,
)


def box_mesh(lo, hi, units="scene") -> TriangleMesh:
    """Closed axis-aligned box, 12 outward-wound triangles."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return TriangleMesh(v, tris, units)


def euler_characteristic(mesh: TriangleMesh) -> int:
    e = np.unique(mesh.edges(), axis=0)
    return len(mesh.vertices) - len(e) + len(mesh.triangles)


def edge_use_counts(mesh: TriangleMesh) -> np.ndarray:
    return np.unique(mesh.edges(), axis=0, return_counts=True)[1]


def test_box_helper_is_closed_and_outward():
    m = box_mesh((0, 0, 0), (1, 2, 3))
    assert euler_characteristic(m) == 2
    assert m.signed_volume() == pytest.approx(6.0)


# --- voxelize -----------------------------------------------------------------------


def test_cell_centers_2cube():
    c = cell_centers(((0, 0, 0), (1, 1, 1)), (2, 2, 2)).reshape(-1, 3)
    assert sorted(set(c.ravel().round(12).tolist())) == [0.25, 0.75]
    assert len(c) == 8


def test_voxelize_constant_density():
    grid = voxelize_density(lambda p: np.full(len(p), 3.5), ((0, 0, 0), (1, 2, 1)), (3, 4, 2))
    assert grid.values.shape == (3, 4, 2)
    assert np.all(grid.values == 3.5)
    with pytest.raises(ValueError):
        voxelize_density(lambda p: np.zeros(len(p)), ((0, 0, 0), (0, 1, 1)), (2, 2, 2))


def test_voxelize_field_is_deterministic_and_nonnegative(tiny_field_config):
    f = RadianceField(tiny_field_config, seed=0)
    a = voxelize_density(f, ((-1, -1, -1), (1, 1, 1)), (4, 5, 6))
    b = voxelize_density(f, ((-1, -1, -1), (1, 1, 1)), (4, 5, 6))
    np.testing.assert_array_equal(a.values, b.values)
    assert np.all(a.values >= 0)


def test_grid_invariants():
    with pytest.raises(ValueError):
        DensityGrid((1, 2, 2), ((0, 0, 0), (1, 1, 1)), np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        DensityGrid((2, 2, 2), ((0, 0, 0), (1, 1, 1)), np.full((2, 2, 2), np.nan))


# --- marching cubes ---------------------------------------------------------------


def _unit_grid(values):
    return DensityGrid(values.shape, ((0, 0, 0), tuple(float(n) for n in values.shape)), values)


def test_marching_cubes_empty_below_threshold():
    assert len(marching_cubes(_unit_grid(np.zeros((4, 4, 4))), 0.5)) == 0


def test_single_cell_is_closed_sphere_topology():
    v = np.zeros((5, 5, 5))
    v[2, 2, 2] = 1.0
    m = marching_cubes(_unit_grid(v), 0.5)
    assert euler_characteristic(m) == 2
    assert np.all(edge_use_counts(m) == 2)
    assert m.signed_volume() > 0


def test_hollow_orientation_points_away_from_density():
    v = np.ones((5, 5, 5))
    v[2, 2, 2] = 0.0
    m = marching_cubes(_unit_grid(v), 0.5)
    inner = m.subset(np.all(np.abs(m.vertices[m.triangles] - 2.5).max(axis=2) < 1.0, axis=1))
    assert inner.signed_volume() < 0


def test_sphere_hausdorff():
    n, r = 48, 0.6
    bounds = ((-1, -1, -1), (1, 1, 1))
    c = cell_centers(bounds, (n, n, n))
    grid = DensityGrid((n, n, n), bounds, np.clip(1 - np.linalg.norm(c, axis=-1) / r + 0.5, 0, None))
    m = marching_cubes(grid, 0.5)
    diag = math.sqrt(3) * 2 / n
    d_mesh = np.abs(np.linalg.norm(m.vertices, axis=1) - r).max()
    rng = np.random.default_rng(0)
    s = rng.normal(size=(4000, 3))
    s = r * s / np.linalg.norm(s, axis=1, keepdims=True)
    d_sphere = cKDTree(m.vertices).query(s)[0].max()
    assert max(d_mesh, d_sphere) <= 1.5 * diag
    assert euler_characteristic(m) == 2


@settings(max_examples=20)
@given(st.integers(0, 2**31 - 1), st.floats(0.2, 0.8))
def test_marching_cubes_edges_manifold(seed, iso):
    v = np.random.default_rng(seed).random((6, 5, 4))
    m = marching_cubes(_unit_grid(v), iso)
    if len(m):
        counts = edge_use_counts(m)
        assert counts.min() >= 1 and counts.max() <= 2
        assert m.areas().min() > 1e-12


# --- floor plane and alignment -------------------------------------------------------


def test_floor_plane_exact():
    n, d = fit_floor_plane([(0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1)])
    np.testing.assert_allclose(n, (0, 0, 1), atol=1e-12)
    assert d == pytest.approx(1.0)


def test_floor_plane_noise_within_tenth_degree():
    rng = np.random.default_rng(0)
    pts = np.c_[rng.uniform(-1, 1, (200, 2)), np.ones(200)] + rng.normal(0, 1e-3, (200, 3))
    n, _ = fit_floor_plane(pts)
    assert math.degrees(math.acos(min(1.0, n[2]))) < 0.1


def test_floor_plane_x0_and_degenerate():
    n, d = fit_floor_plane([(0, 0, 0), (0, 1, 0), (0, 0, 1), (0, 2, 3)], toward=(-5, 0, 0))
    np.testing.assert_allclose(n, (-1, 0, 0), atol=1e-12)
    with pytest.raises(ValueError):
        fit_floor_plane([(0, 0, 0), (1, 1, 1), (2, 2, 2), (3, 3, 3)])
    with pytest.raises(ValueError):
        fit_floor_plane([(0, 0, 0), (1, 0, 0)])


def test_alignment_examples():
    t = compute_alignment((np.array([0.0, 0, 1]), 1.0), 0.0, (1.0, 1.0))
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(t.translation, (0, 0, -1))
    assert t.scale == 1
    assert compute_alignment((np.array([0.0, 0, 1]), 0.0), 0.0, (0.5, 1.0)).scale == 2
    with pytest.raises(ValueError):
        compute_alignment((np.array([0.0, 0, 1]), 0.0), 0.0, (0.0, 1.0))


def test_alignment_tilt_ten_degrees():
    a = math.radians(10)
    n = np.array([0.0, math.sin(a), math.cos(a)])
    t = compute_alignment((n, 0.0))
    np.testing.assert_allclose(t.rotation @ n, (0, 0, 1), atol=1e-9)
    angle = Rotation.from_matrix(t.rotation).magnitude()
    assert math.degrees(angle) == pytest.approx(10.0, abs=1e-9)


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_rotation_between_property(a, b):
    a, b = np.array(a), np.array(b)
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    R = rotation_between(a, b)
    np.testing.assert_allclose(R @ (a / np.linalg.norm(a)), b / np.linalg.norm(b), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


def test_rotation_between_antipodal():
    R = rotation_between((0, 0, 1), (0, 0, -1))
    np.testing.assert_allclose(R @ [0, 0, 1], [0, 0, -1], atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 5.0), st.floats(-math.pi, math.pi))
def test_alignment_maps_floor_to_zero(seed, scale_ratio, yaw):
    rng = np.random.default_rng(seed)
    R = Rotation.random(random_state=seed).as_matrix()
    pts = np.c_[rng.uniform(-1, 1, (30, 2)), rng.normal(0, 1e-3, 30)] @ R.T + rng.normal(size=3)
    plane = fit_floor_plane(pts)
    t = compute_alignment(plane, yaw, (1.0, scale_ratio))
    out = t.apply(pts)
    residual = np.abs((pts - pts.mean(0)) @ plane[0]).max()
    assert np.abs(out[:, 2]).max() <= 1e-6 + t.scale * residual + 1e-9


def test_apply_transform_examples():
    m = box_mesh((0, 0, 0), (1, 1, 1))
    ident = apply_transform(m, SimilarityTransform(np.eye(3), np.zeros(3), 1.0))
    np.testing.assert_array_equal(ident.vertices, m.vertices)
    assert ident.units == "world"
    e = m.edges()
    length = lambda mesh: np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    doubled = apply_transform(m, SimilarityTransform(np.eye(3), np.zeros(3), 2.0))
    np.testing.assert_allclose(length(doubled), 2 * length(m))
    R = Rotation.random(random_state=4).as_matrix()
    rigid = apply_transform(m, SimilarityTransform(R, np.array([1.0, -2, 3]), 1.0))
    np.testing.assert_allclose(length(rigid), length(m), atol=1e-9)
    np.testing.assert_array_equal(rigid.triangles, m.triangles)


def test_similarity_invariants():
    with pytest.raises(ValueError):
        SimilarityTransform(np.diag([1.0, 1, -1]), np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        SimilarityTransform(np.eye(3), np.zeros(3), 0.0)
    t = SimilarityTransform(Rotation.random(random_state=1).as_matrix(), np.array([1.0, 2, 3]), 1.5)
    back = SimilarityTransform.from_dict(t.to_dict())
    np.testing.assert_allclose(back.rotation, t.rotation)
    assert len(t.to_dict()["rotation"]) == 9


# --- floor replacement, cropping, free space ---------------------------------------------------


def test_replace_floor_quad():
    quad = TriangleMesh([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)], [(0, 1, 2), (0, 2, 3)], "world")
    out, plane = replace_floor(quad, 0.01)
    assert len(out) == 0
    assert plane.z == 0 and plane.xy_min == (0.0, 0.0) and plane.xy_max == (1.0, 1.0)


def test_replace_floor_box_on_floor():
    box = box_mesh((0, 0, 0), (1, 1, 1), "world")
    out, _ = replace_floor(box, 0.01)
    assert len(out) == len(box) - 2
    assert np.all(out.vertices[out.triangles, 2].max(axis=1) > 0.01)


def test_replace_floor_zero_tolerance_noisy():
    rng = np.random.default_rng(0)
    v = np.c_[rng.uniform(0, 1, (4, 2)), rng.uniform(-0.005, 0.005, 4)]
    v[:, 2] = np.where(np.abs(v[:, 2]) < 1e-4, 1e-3, v[:, 2])
    mesh = TriangleMesh(v, [(0, 1, 2), (0, 2, 3)], "world")
    assert len(replace_floor(mesh, 0.0)[0]) == 2


def test_crop_examples():
    a = box_mesh((0, 0, 0), (1, 1, 1))
    b = box_mesh((3, 0, 0), (4, 1, 1))
    both = TriangleMesh(np.r_[a.vertices, b.vertices], np.r_[a.triangles, b.triangles + 8])
    assert len(crop_mesh(both, ((-1, -1, -1), (5, 2, 2)))) == 24
    assert len(crop_mesh(both, ((10, 10, 10), (11, 11, 11)))) == 0
    only = crop_mesh(both, ((-0.5, -0.5, -0.5), (1.5, 1.5, 1.5)))
    assert len(only) == 12
    assert only.vertices.max() <= 1.0


def test_crop_keeps_boundary_triangles_whole():
    big = TriangleMesh([(-5, -5, 0), (5, -5, 0), (0, 5, 0)], [(0, 1, 2)])
    out = crop_mesh(big, ((-0.1, -0.1, -0.1), (0.1, 0.1, 0.1)))
    assert len(out) == 1
    np.testing.assert_array_equal(out.vertices, big.vertices)


def test_free_space_empty_and_infinite_clearance():
    ws = (-1, -1, 1, 1)
    assert free_space_map(TriangleMesh.empty(), ws, 0.1).free.all()
    col = box_mesh((-0.05, -0.05, 0), (0.05, 0.05, 1.0))
    assert not free_space_map(col, ws, 0.1, clearance=math.inf).free.any()


def test_free_space_column_matches_distance_oracle():
    half = 0.05
    col = box_mesh((-half, -half, 0.0), (half, half, 1.0))
    fmap = free_space_map(col, (-1, -1, 1, 1), 0.05, clearance=0.2, height_band=(0.02, 1.0))
    c = fmap.centers()
    d = np.linalg.norm(np.maximum(np.abs(c) - half, 0.0), axis=-1)
    np.testing.assert_array_equal(~fmap.free, d <= 0.2)


def test_free_space_ignores_geometry_outside_band():
    slab = box_mesh((-0.5, -0.5, 1.5), (0.5, 0.5, 2.0))
    assert free_space_map(slab, (-1, -1, 1, 1), 0.1, height_band=(0.02, 1.0)).free.all()


@settings(max_examples=15)
@given(st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_free_space_monotone_in_clearance(c1, c2):
    lo, hi = sorted((c1, c2))
    mesh = TriangleMesh([(0.1, 0.2, 0.3), (0.4, -0.3, 0.5), (-0.2, 0.1, 0.8)], [(0, 1, 2)])
    a = free_space_map(mesh, (-1, -1, 1, 1), 0.1, clearance=lo)
    b = free_space_map(mesh, (-1, -1, 1, 1), 0.1, clearance=hi)
    assert np.all(b.free <= a.free)


# --- OBJ ---------------------------------------------------------------------------------


def test_obj_single_triangle_and_empty():
    text = export_obj(TriangleMesh([(0, 0, 0), (1, 0, 0), (0, 1, 0)], [(0, 1, 2)]))
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    assert [l.split()[0] for l in lines] == ["v", "v", "v", "f"]
    assert lines[-1] == "f 1 2 3"
    empty = export_obj(TriangleMesh.empty())
    assert all(l.startswith("#") for l in empty.splitlines())


def test_obj_round_trip(rng):
    m = TriangleMesh(rng.normal(size=(50, 3)) * 10, rng.integers(0, 50, (30, 3)), "world")
    back = import_obj(export_obj(m))
    np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-7, rtol=1e-8)
    np.testing.assert_array_equal(back.triangles, m.triangles)
    assert back.units == "world"
