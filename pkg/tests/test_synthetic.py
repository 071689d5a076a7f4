import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparsefusion.geometry import Intrinsics, Pose, look_at, pose_error
from sparsefusion.synthetic import (AnalyticScene, Box, Plane, Sphere, orbit_trajectory,
                                    render_synthetic_depth, sphere_cluster, sphere_trace)

pts = st.tuples(*[st.floats(-2, 2)] * 3)


def test_axial_hit_on_unit_sphere():
    intr = Intrinsics(65, 65, 50.0, 50.0, 32.0, 32.0, 0.1, 5.0)
    scene = AnalyticScene([Sphere((0.0, 0.0, 2.0), 1.0)])
    f = render_synthetic_depth(scene, Pose.identity(), intr)
    assert f.depth[32, 32] == pytest.approx(1.0, abs=1e-4)


def test_missed_rays_are_zero(small_intr):
    scene = AnalyticScene([Sphere((0.0, 0.0, 2.0), 0.05)])
    f = render_synthetic_depth(scene, Pose.identity(), small_intr)
    assert f.depth[0, 0] == 0.0 and not f.valid[0, 0]


def test_noise_sigma_is_recorded():
    intr = Intrinsics(9, 9, 10.0, 10.0, 4.0, 4.0, 0.1, 5.0)
    scene = AnalyticScene([Plane((0.0, 0.0, -1.0), -2.0)])  # z = 2 wall
    f = render_synthetic_depth(scene, Pose.identity(), intr, sigma0=0.001, rng=0)
    assert f.sigma[4, 4] == pytest.approx(0.004, rel=1e-9)
    assert f.sigma.max() == pytest.approx(0.004, rel=1e-9)


def test_noise_is_seeded_and_gaussian():
    intr = Intrinsics(100, 100, 80.0, 80.0, 49.5, 49.5, 0.1, 5.0)
    scene = AnalyticScene([Plane((0.0, 0.0, -1.0), -1.0)])
    clean = render_synthetic_depth(scene, Pose.identity(), intr)
    a = render_synthetic_depth(scene, Pose.identity(), intr, 0.002, np.random.default_rng(7))
    b = render_synthetic_depth(scene, Pose.identity(), intr, 0.002, np.random.default_rng(7))
    np.testing.assert_array_equal(a.depth, b.depth)
    z = (a.depth - clean.depth) / a.sigma
    assert abs(z.mean()) < 0.05 and abs(z.std() - 1.0) < 0.05


def test_hit_points_lie_on_surface(small_intr):
    scene = sphere_cluster()
    pose = look_at((0.2, 0.3, -0.9), (0.0, 0.0, 0.0))
    f = render_synthetic_depth(scene, pose, small_intr)
    p = pose.apply(f.points()[f.valid])
    assert len(p) > 1000
    assert np.abs(scene.sdf(p)).max() < 1e-4 * 1.0


def test_depth_matches_closed_form_sphere(small_intr, sphere_scene):
    pose = look_at((0.1, -0.2, -1.0), (0.0, 0.0, 0.0))
    f = render_synthetic_depth(sphere_scene, pose, small_intr)
    rays = small_intr.ray_directions()
    d = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    d_w = d @ pose.rotation.T
    o = pose.translation
    b = d_w @ o
    c = o @ o - 0.3 ** 2
    disc = b ** 2 - c
    hit = disc > 0
    t = -b - np.sqrt(np.where(hit, disc, 0.0))
    z = t * d[..., 2]
    both = hit & f.valid
    assert both.sum() > 0.9 * hit.sum()
    assert np.abs(f.depth[both] - z[both]).max() < 1e-4


def test_depth_matches_closed_form_tilted_plane(small_intr):
    n = np.array([0.2, -0.3, -1.0])
    n /= np.linalg.norm(n)
    scene = AnalyticScene([Plane(tuple(n), -1.5)])
    f = render_synthetic_depth(scene, Pose.identity(), small_intr)
    rays = small_intr.ray_directions()  # z = 1 rays: depth = offset / (n . ray)
    z = -1.5 / (rays @ n)
    assert f.valid.all()
    assert np.abs(f.depth - z).max() < 1e-4


@given(pts, pts)
def test_primitives_are_1_lipschitz(a, b):
    a, b = np.array(a), np.array(b)
    scene = AnalyticScene([Sphere((0.1, 0, 0), 0.4), Plane((0, 1, 0), -0.5),
                           Box((0.5, 0.2, -0.3), (0.2, 0.1, 0.3))])
    assert abs(scene.sdf(a) - scene.sdf(b)) <= np.linalg.norm(a - b) * (1 + 1e-9) + 1e-12


def test_box_sdf_values():
    box = Box((0.0, 0.0, 0.0), (1.0, 2.0, 3.0))
    assert box.sdf(np.array([0.0, 0.0, 0.0])) == pytest.approx(-1.0)
    assert box.sdf(np.array([2.0, 0.0, 0.0])) == pytest.approx(1.0)
    assert box.sdf(np.array([2.0, 3.0, 0.0])) == pytest.approx(np.sqrt(2.0))


def test_sphere_trace_respects_t_max():
    scene = AnalyticScene([Sphere((0.0, 0.0, 5.0), 1.0)])
    t, hit = sphere_trace(scene, np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), 0.1, 3.0)
    assert not hit[0] and np.isnan(t[0])


def test_orbit_looks_at_center_and_keeps_distance():
    poses = orbit_trajectory((0.1, 0.0, 0.0), 0.9, 12, arc_deg=360, elevation_deg=20, alternate=True)
    assert len(poses) == 12
    for k, p in enumerate(poses):
        assert p.is_valid()
        c = p.apply_inverse([0.1, 0.0, 0.0])
        np.testing.assert_allclose(c, [0, 0, 0.9], atol=1e-9)
        assert np.sign(p.translation[1]) == (1 if k % 2 == 0 else -1)
    # a closed loop does not repeat the first pose
    assert pose_error(poses[0], poses[-1])[1] > 0.1


def test_sphere_cluster_is_seeded():
    a, b = sphere_cluster(seed=5), sphere_cluster(seed=5)
    assert a.primitives == b.primitives
    assert len(a.primitives) == 11  # main sphere plus the default satellites
