import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_grid_config
from oracles import DenseFusion
from sparsefusion.fusion import (FusionParams, estimate_measurement, fuse_frame, fuse_kalman,
                                 fuse_simple, fuse_weighted, measurement_variance, quality_map,
                                 select_update_blocks)
from sparsefusion.geometry import DepthFrame, Intrinsics, NormalMap, Pose, compute_normals, look_at
from sparsefusion.grid import AuxCodec, FloatShadowGrid, GridConfig, create_grid
from sparsefusion.synthetic import AnalyticScene, Plane, Sphere, orbit_trajectory, render_synthetic_depth


def flat_frame(intr, z):
    return DepthFrame(intr, np.full(intr.shape, float(z)))


# -- measurement -------------------------------------------------------------

def test_measurement_on_surface_is_zero(small_intr):
    frame = flat_frame(small_intr, 0.5)
    p = FusionParams(edge_weighting=False)
    s = estimate_measurement(frame, Pose.identity(), np.array([[0.0, 0.0, 0.5], [0.01, -0.02, 0.5]]),
                             p, truncation=0.04)
    assert np.all(np.abs(s.tsdf) < 1e-12)


def test_measurement_sign_and_truncation(small_intr):
    frame = flat_frame(small_intr, 0.5)
    p = FusionParams(edge_weighting=False)
    delta = 0.04
    pts = np.array([[0, 0, 0.5 - 0.5 * delta], [0, 0, 0.5 + 0.5 * delta],
                    [0, 0, 0.5 - 2 * delta], [0, 0, 0.5 + 2 * delta]])
    s = estimate_measurement(frame, Pose.identity(), pts, p, delta)
    assert s.tsdf[0] == pytest.approx(0.5 * delta)
    assert s.tsdf[1] == pytest.approx(-0.5 * delta)
    assert np.isnan(s.tsdf[2]) and np.isnan(s.tsdf[3])


def test_measurement_chi_outside_image_and_behind(small_intr):
    frame = flat_frame(small_intr, 0.5)
    p = FusionParams(edge_weighting=False)
    pts = np.array([[5.0, 0, 0.5], [0, 0, -0.5]])
    assert np.all(np.isnan(estimate_measurement(frame, Pose.identity(), pts, p, 0.04).tsdf))


def test_measurement_chi_on_missing_depth(small_intr):
    frame = DepthFrame(small_intr, np.zeros(small_intr.shape))
    s = estimate_measurement(frame, Pose.identity(), np.array([[0, 0, 0.5]]), FusionParams(), 0.04)
    assert np.isnan(s.tsdf[0]) and np.isinf(s.variance[0])


def test_measurement_variance_from_depth(small_intr):
    frame = flat_frame(small_intr, 2.0)
    p = FusionParams(sigma0=2.5e-4, edge_weighting=False)
    s = estimate_measurement(frame, Pose.identity(), np.array([[0, 0, 2.0]]), p, 0.04)
    assert s.variance[0] == pytest.approx(1e-6, rel=1e-12)


def test_measurement_variance_prefers_recorded_sigma(small_intr):
    frame = DepthFrame(small_intr, np.full(small_intr.shape, 2.0), np.full(small_intr.shape, 0.003))
    assert np.allclose(measurement_variance(frame, FusionParams()), 9e-6)


def test_measurement_uses_scene_pose(small_intr):
    pose = look_at((1.0, 0.0, 0.0), (0.0, 0.0, 0.0))  # camera on +x looking back at the origin
    frame = flat_frame(small_intr, 1.0)
    s = estimate_measurement(frame, pose, np.array([[0.01, 0, 0], [0.0, 0.0, 0.0]]),
                             FusionParams(edge_weighting=False), 0.04)
    assert s.tsdf[0] == pytest.approx(0.01)  # closer to the camera: in front
    assert s.tsdf[1] == pytest.approx(0.0, abs=1e-12)


def test_refinement_never_increases_distance(small_intr, sphere_scene, front_pose):
    frame = render_synthetic_depth(sphere_scene, front_pose, small_intr)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.35, 0.35, (2000, 3))
    plain = estimate_measurement(frame, front_pose, pts, FusionParams(edge_weighting=False), 0.05)
    ref = estimate_measurement(frame, front_pose, pts,
                               FusionParams(edge_weighting=False, refinement_steps=2), 0.05)
    ok = ~np.isnan(plain.tsdf)
    assert ok.sum() > 50
    assert np.all(np.abs(ref.tsdf[ok]) <= np.abs(plain.tsdf[ok]) + 1e-15)
    assert np.all(np.sign(ref.tsdf[ok]) * np.sign(plain.tsdf[ok]) >= 0)


# -- quality -----------------------------------------------------------------

def test_quality_cosine_and_edge_band():
    intr = Intrinsics(40, 40, 40.0, 40.0, 19.5, 19.5)
    depth = np.ones(intr.shape)
    depth[:, :5] = 0.0
    frame = DepthFrame(intr, depth)
    normals = compute_normals(frame)
    q = quality_map(frame, normals, FusionParams(edge_band=2))
    assert np.all(q[:, :5] == 0)
    # the centre pixel sees the wall head on
    assert q[20, 20] == pytest.approx(1.0, abs=1e-3)
    # columns 5..7 are within 2 px of a normal-less pixel: halved
    assert np.all(q[2:-2, 6] <= 0.5 + 1e-12)
    assert np.all(q > 0) or np.all(q[frame.valid] > 0)


def test_quality_floors_grazing_angle():
    intr = Intrinsics(20, 20, 20.0, 20.0, 9.5, 9.5)
    frame = flat_frame(intr, 1.0)
    sideways = np.zeros(intr.shape + (3,))
    sideways[..., 0] = 1.0
    q = quality_map(frame, NormalMap(sideways, np.ones(intr.shape, bool)),
                    FusionParams(edge_band=0))
    assert np.all(q >= 0.1 - 1e-15)
    # rays on the right half face away from (or graze) the normal
    assert np.allclose(q[:, 10:], 0.1)


def test_quality_off_is_one_on_valid(small_intr):
    depth = np.ones(small_intr.shape)
    depth[0, 0] = 0
    q = quality_map(DepthFrame(small_intr, depth), None, FusionParams(edge_weighting=False))
    assert q[0, 0] == 0 and np.all(q.ravel()[1:] == 1)


# -- update rules ------------------------------------------------------------

def test_fuse_simple_example():
    assert fuse_simple(0.01, 0.03, 0.1, 0.04) == pytest.approx(0.012)
    assert fuse_simple(np.nan, 0.03, 0.1, 0.04) == pytest.approx(0.03)


def test_fuse_weighted_example():
    t, w = fuse_weighted(0.01, 4.0, 0.02, 1.0, 20.0, 0.04)
    assert t == pytest.approx(0.012) and w == pytest.approx(5.0)
    t, w = fuse_weighted(0.01, 20.0, 0.02, 1.0, 20.0, 0.04)
    assert w == 20.0


def test_fuse_kalman_example():
    t, p = fuse_kalman(0.0, 1e-6, 0.01, 1e-6, 0.0, 0.04)
    assert t == pytest.approx(0.005) and p == pytest.approx(5e-7)
    t, p = fuse_kalman(np.nan, 0.0, 0.01, 3e-6, 0.0, 0.04)
    assert t == pytest.approx(0.01) and p == pytest.approx(3e-6)


def test_kalman_without_process_noise_is_sample_mean(rng):
    x = rng.normal(0.01, 0.002, 50)
    t, p = np.nan, 0.0
    for xi in x:
        t, p = fuse_kalman(t, p, xi, 4e-6, 0.0, np.inf)
    assert t == pytest.approx(x.mean(), abs=1e-12)
    assert p == pytest.approx(4e-6 / 50, rel=1e-9)


def test_weighted_equal_weights_is_running_mean(rng):
    x = rng.normal(0.0, 0.01, 30)
    t, w = np.nan, 0.0
    for xi in x:
        t, w = fuse_weighted(t, w, xi, 1.0, np.inf, np.inf)
    assert t == pytest.approx(x.mean(), abs=1e-12)


def test_weighted_beats_simple_after_five_frames(rng):
    x = rng.normal(0.0, 0.01, (20000, 5))
    ts, tw, ww = np.full(20000, np.nan), np.full(20000, np.nan), np.zeros(20000)
    for k in range(5):
        ts = fuse_simple(ts, x[:, k], 0.1, np.inf)
        tw, ww = fuse_weighted(tw, ww, x[:, k], 0.1, 20.0, np.inf)
    assert np.mean(tw ** 2) <= np.mean(ts ** 2)


finite = st.floats(-0.1, 0.1)


@given(t=st.one_of(st.just(np.nan), finite), tk=finite, w=st.floats(0.01, 1.0),
       aux=st.floats(1e-8, 1e-2), pk=st.floats(1e-8, 1e-2))
def test_updates_never_store_beyond_truncation(t, tk, w, aux, pk):
    delta = 0.05
    outs = [fuse_simple(t, tk, w, delta), fuse_weighted(t, 20 * aux, tk, w, 20.0, delta)[0],
            fuse_kalman(t, aux, tk, pk, 1e-8, delta)[0]]
    for o in outs:
        assert np.isnan(o) or abs(o) <= delta


def test_params_validation():
    with pytest.raises(ValueError):
        FusionParams(mode="median")
    with pytest.raises(ValueError):
        FusionParams(w_fixed=0.0)
    with pytest.raises(ValueError):
        FusionParams(process_variance=-1.0)


def test_aux_codec_follows_mode():
    assert FusionParams(mode="kalman").aux_codec().mode == "variance"
    assert FusionParams(mode="weighted").aux_codec().mode == "weight"


# -- block selection ---------------------------------------------------------

@pytest.fixture
def wall():
    """Camera at the origin facing a wall at z = 0.3; grid box [-0.5, 0.5]^3, N = 8."""
    intr = Intrinsics.from_fov(64, 48, 60.0, 0.05, 3.0)
    return intr, flat_frame(intr, 0.3)


def test_select_allocates_every_block_cut_by_the_shell(wall):
    intr, frame = wall
    grid = create_grid(make_grid_config(8, 8), precision="float")
    alloc, update = select_update_blocks(grid, frame, Pose.identity(), FusionParams())
    assert len(update) == 0
    got = {tuple(b) for b in alloc}
    # analytic: voxels with |T| <= δ lie in the visible slab of the wall
    cfg = grid.config
    delta = cfg.truncation
    half_w = np.array([(intr.width - 0.5 - intr.cx) / intr.fx, (intr.height - 0.5 - intr.cy) / intr.fy])
    need = set()
    for b in np.ndindex(8, 8, 8):
        lo = cfg.origin + np.array(b) * cfg.block_side
        hi = lo + cfg.block_side
        if hi[2] < 0.3 - delta or lo[2] > 0.3 + delta:
            continue
        zc = np.clip(0.3, lo[2], hi[2])
        if np.all(lo[:2] < half_w * zc) and np.all(hi[:2] > -half_w * zc):
            need.add(b)
    assert need <= got


def test_select_puts_free_space_blocks_in_update_list(wall):
    intr, frame = wall
    grid = create_grid(make_grid_config(8, 8), precision="float")
    cfg = grid.config
    free = (4, 4, 4)  # block [0, 0.125]^3: in front of the wall, in view
    grid.allocate_block(free)
    alloc, update = select_update_blocks(grid, frame, Pose.identity(), FusionParams())
    assert free in {tuple(b) for b in update}
    assert free not in {tuple(b) for b in alloc}
    assert np.all(cfg.origin[2] + (alloc[:, 2] + 1) * cfg.block_side >= 0.3 - cfg.truncation)


def test_select_surface_outside_frustum(wall):
    intr, _ = wall
    grid = create_grid(make_grid_config(8, 8), precision="float")
    away = look_at((0.0, 0.0, 0.0), (0.0, 0.0, -1.0))  # wall behind the camera: nothing measured
    frame = DepthFrame.empty(intr)
    alloc, update = select_update_blocks(grid, frame, away, FusionParams())
    assert len(alloc) == 0 and len(update) == 0
    far = flat_frame(intr, 2.5)  # surface beyond the grid box
    alloc, _ = select_update_blocks(grid, far, Pose.identity(), FusionParams())
    assert len(alloc) == 0


# -- fuse_frame --------------------------------------------------------------

def test_empty_frame_updates_nothing(small_intr):
    grid = create_grid(make_grid_config(8, 8))
    stats = fuse_frame(grid, DepthFrame.empty(small_intr), Pose.identity(), FusionParams())
    assert stats.voxels_updated == 0 and stats.blocks_total == 0


def test_codec_mismatch_raises(small_intr, sphere_scene, front_pose):
    grid = create_grid(make_grid_config(8, 8, mode="weight"))
    frame = render_synthetic_depth(sphere_scene, front_pose, small_intr)
    with pytest.raises(ValueError):
        fuse_frame(grid, frame, front_pose, FusionParams(mode="kalman"))


@pytest.mark.parametrize("precision", ["float", "quantized"])
def test_single_frame_zero_crossing_near_surface(precision, small_intr, sphere_scene, front_pose):
    intr = Intrinsics.from_fov(160, 120, 60.0, 0.1, 3.0)
    grid = create_grid(make_grid_config(8, 8), 512, precision)
    frame = render_synthetic_depth(sphere_scene, front_pose, intr)
    fuse_frame(grid, frame, front_pose, FusionParams(mode="simple", edge_weighting=False))
    dense = FloatShadowGrid.from_sparse(grid).tsdf
    cfg = grid.config
    vs = cfg.voxel_size
    errs = []
    for axis in range(3):
        a = np.moveaxis(dense, axis, 0)
        t0, t1 = a[:-1], a[1:]
        cross = (t0 * t1 < 0) & ~np.isnan(t0) & ~np.isnan(t1)
        idx = np.argwhere(cross).astype(float)
        idx[:, 0] += t0[cross] / (t0[cross] - t1[cross])
        ijk = np.empty_like(idx)
        ijk[:, [axis] + [d for d in range(3) if d != axis]] = idx
        errs.append(np.abs(sphere_scene.sdf(cfg.origin + (ijk + 0.5) * vs)))
    errs = np.concatenate(errs)
    assert len(errs) > 100
    assert errs.max() <= vs


def test_simple_mode_idempotent(sphere_scene, front_pose):
    intr = Intrinsics.from_fov(96, 72, 60.0, 0.1, 3.0)
    frame = render_synthetic_depth(sphere_scene, front_pose, intr)
    p = FusionParams(mode="simple")
    grid = create_grid(make_grid_config(8, 8), 512)
    fuse_frame(grid, frame, front_pose, p)
    once = grid.tsdf.copy()
    fuse_frame(grid, frame, front_pose, p)
    assert np.array_equal(once, grid.tsdf)


@pytest.mark.parametrize("mode", ["simple", "weighted", "kalman"])
def test_sparse_matches_dense_two_frames(mode):
    """Small version of the full equivalence check (the acceptance suite runs more)."""
    scene = AnalyticScene([Sphere((0.0, 0.0, 0.0), 0.3)])
    intr = Intrinsics.from_fov(96, 72, 60.0, 0.1, 3.0)
    poses = orbit_trajectory((0, 0, 0), 0.9, 2, arc_deg=40.0)
    p = FusionParams(mode=mode)
    cfg = GridConfig(8, 8, (-0.5,) * 3, 1.0, aux=p.aux_codec())
    grid = create_grid(cfg, 512, "float")
    dense = DenseFusion(cfg, p)
    for k, pose in enumerate(poses):
        frame = render_synthetic_depth(scene, pose, intr, 2.5e-4, np.random.default_rng(k))
        fuse_frame(grid, frame, pose, p)
        dense.fuse(frame, pose)
    shadow = FloatShadowGrid.from_sparse(grid)
    np.testing.assert_array_equal(shadow.tsdf, dense.tsdf)
    seen = ~np.isnan(dense.tsdf)
    if mode != "simple":
        np.testing.assert_array_equal(shadow.aux[seen], dense.aux[seen])
