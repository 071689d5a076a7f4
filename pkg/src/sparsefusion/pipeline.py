"""Frame-by-frame reconstruction loop.

Each frame goes through acquire, render (raycast the model from the previous
pose), register (ICP of the new frame against that rendering) and fuse.
The first frame has no model yet and is fused at its initial pose.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .fusion import FusionStats, fuse_frame
from .geometry import DepthFrame, Pose, compose, compute_normals, invert, pose_error
from .grid import PoolExhausted, SparseTsdfGrid, create_grid
from .io import read_dfrm, read_trajectory, write_grid_snapshot, write_ply, write_trajectory
from .marching_cubes import Mesh, marching_cubes
from .registration import TrackingLost, icp, initial_transform_hook
from .render import raycast
from .synthetic import AnalyticScene, Sphere, orbit_trajectory, render_synthetic_depth, sphere_cluster

log = logging.getLogger(__name__)

METRICS_HEADER = (("frame", "tracking", "iterations", "matches", "residual_rms", "gated")
                  + FusionStats.CSV_HEADER[1:]
                  + ("rot_err_deg", "trans_err_vox"))
TIMING_HEADER = ("frame", "t_acquire", "t_render", "t_register", "t_fuse", "t_done")

STATUS_OK = "ok"
STATUS_TRACKING_LOST = "tracking_lost"
STATUS_POOL_EXHAUSTED = "pool_exhausted"


# -- frame sources -----------------------------------------------------------

class FrameSource:
    """Indexable depth frames plus optional ground-truth poses and scene oracle."""

    def __init__(self, frames, poses=None, scene: AnalyticScene | None = None):
        self._frames = frames  # callable index -> DepthFrame
        self.poses = poses
        self.scene = scene
        self.count = len(poses) if poses is not None else 0

    def __len__(self):
        return self.count

    def frame(self, k) -> DepthFrame:
        return self._frames(k)

    def truth(self, k) -> Pose | None:
        return self.poses[k] if self.poses is not None else None


def build_scene(cfg: PipelineConfig) -> AnalyticScene:
    inp = cfg.input
    if inp.scene == "cluster":
        return sphere_cluster(inp.scene_center, inp.scene_radius, inp.satellites, inp.scene_seed)
    return AnalyticScene([Sphere(tuple(inp.scene_center), inp.scene_radius)])


def build_trajectory(cfg: PipelineConfig):
    inp = cfg.input
    if inp.trajectory == "orbit":
        return orbit_trajectory(inp.scene_center, inp.orbit_distance, inp.orbit_frames,
                                inp.orbit_arc_deg, inp.orbit_elevation_deg,
                                alternate=inp.orbit_alternate)
    return read_trajectory(cfg.resolve(inp.trajectory))


def open_source(cfg: PipelineConfig) -> FrameSource:
    inp = cfg.input
    if inp.source == "synthetic":
        scene = build_scene(cfg)
        poses = build_trajectory(cfg)

        def render(k):
            rng = np.random.default_rng([cfg.seed, k])
            return render_synthetic_depth(scene, poses[k], cfg.camera, inp.noise_sigma0, rng)

        return FrameSource(render, poses, scene)
    files = sorted(cfg.resolve(inp.directory).glob("*.dfrm"))
    poses = build_trajectory(cfg) if inp.trajectory != "orbit" else None
    src = FrameSource(lambda k: read_dfrm(files[k]), poses)
    src.count = len(files)
    if poses is not None and len(poses) < len(files):
        raise ValueError(f"trajectory has {len(poses)} poses for {len(files)} frames")
    return src


# -- run ---------------------------------------------------------------------

@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)
    timing: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    poses: list = field(default_factory=list)
    status: str = STATUS_OK
    mesh: Mesh | None = None
    grid: SparseTsdfGrid | None = None

    @property
    def ok(self):
        return self.status == STATUS_OK


def _fmt(x):
    if isinstance(x, float):
        return "nan" if np.isnan(x) else f"{x:.9g}"
    return str(x)


def mesh_error(mesh: Mesh, scene: AnalyticScene, voxel_size):
    """RMS and max |sdf| of mesh vertices, in meters and voxels."""
    if len(mesh.vertices) == 0:
        return {}
    d = np.abs(scene.sdf(mesh.vertices))
    rms, mx = float(np.sqrt(np.mean(d ** 2))), float(d.max())
    return {"mesh_rms_m": rms, "mesh_max_m": mx,
            "mesh_rms_vox": rms / voxel_size, "mesh_max_vox": mx / voxel_size}


def run(cfg: PipelineConfig, frames=None, tracking=None, write=True) -> RunMetrics:
    """Reconstruct the configured input; writes outputs to ``cfg.output_dir`` if ``write``."""
    tracking = tracking or cfg.tracking
    source = open_source(cfg)
    n_frames = len(source) if frames is None else min(frames, len(source))
    grid = create_grid(cfg.grid, cfg.pool_capacity, cfg.precision)
    vs = cfg.grid.voxel_size
    sigma0 = cfg.input.noise_sigma0
    out = RunMetrics(grid=grid)
    t0 = time.perf_counter()
    clock = lambda: time.perf_counter() - t0  # noqa: E731
    pose = None
    failure = None

    for k in range(n_frames):
        stamps = {"frame": k, "t_acquire": clock()}
        frame = source.frame(k)
        truth = source.truth(k)
        normals = compute_normals(frame, voxel_size=vs, sigma0=sigma0)
        report = {"frame": k, "tracking": tracking, "iterations": 0, "matches": 0,
                  "residual_rms": float("nan"), "gated": 0}
        try:
            stamps["t_render"] = clock()
            if pose is None:
                pose = truth if truth is not None else Pose.identity()
                stamps["t_register"] = clock()
            else:
                model = raycast(grid, pose, frame.intrinsics)
                stamps["t_register"] = clock()
                if tracking == "ground_truth":
                    pose = truth
                else:
                    external = None
                    if tracking == "icp_with_hook" and truth is not None:
                        external = compose(invert(source.truth(k - 1)), truth)
                    guess = initial_transform_hook(pose, external)
                    res = icp(frame, model.frame, model.normals, compose(invert(pose), guess),
                              cfg.match, source_normals=normals)
                    pose = compose(pose, res.pose)
                    report.update(iterations=res.iterations, matches=res.match_count,
                                  residual_rms=float(res.solution.residual_rms),
                                  gated=int((~res.solution.kept).sum()))
            stamps["t_fuse"] = clock()
            stats = fuse_frame(grid, frame, pose, cfg.fusion, normals=normals, frame_index=k)
        except TrackingLost as e:
            failure = (STATUS_TRACKING_LOST, k, str(e))
        except PoolExhausted as e:
            failure = (STATUS_POOL_EXHAUSTED, k, str(e))
        if failure:
            log.error("frame %d: %s", k, failure[2])
            break
        stamps["t_done"] = clock()
        row = dict(report)
        row.update(zip(FusionStats.CSV_HEADER[1:], stats.csv_row()[1:]))
        if truth is not None:
            rot, trans = pose_error(pose, truth)
            row.update(rot_err_deg=float(np.degrees(rot)), trans_err_vox=float(trans / vs))
        else:
            row.update(rot_err_deg=float("nan"), trans_err_vox=float("nan"))
        out.rows.append(row)
        out.timing.append(stamps)
        out.poses.append(pose)
        log.info("frame %d: %d blocks, %d bytes", k, stats.blocks_total, stats.memory_bytes)

    mesh = marching_cubes(grid)
    out.mesh = mesh
    s = out.summary
    s["status"] = failure[0] if failure else STATUS_OK
    out.status = s["status"]
    if failure:
        s["failed_frame"] = failure[1]
        s["failure"] = failure[2]
    s["frames_processed"] = len(out.rows)
    s["tracking"] = tracking
    s["fusion_mode"] = cfg.fusion.mode
    s["voxel_size"] = vs
    s["blocks_allocated"] = grid.allocated_count
    s["pool_capacity"] = grid.capacity
    s["memory_bytes"] = grid.memory_bytes()
    s["mesh_vertices"] = len(mesh.vertices)
    s["mesh_faces"] = len(mesh.faces)
    if source.scene is not None:
        s.update(mesh_error(mesh, source.scene, vs))
    if out.rows and not np.isnan(out.rows[-1]["rot_err_deg"]):
        s["max_rot_err_deg"] = max(r["rot_err_deg"] for r in out.rows)
        s["max_trans_err_vox"] = max(r["trans_err_vox"] for r in out.rows)
    s.update(_timing_shares(out.timing))
    if write:
        write_outputs(out, Path(cfg.output_dir), cfg.write_snapshot)
    return out


def _timing_shares(timing):
    totals = {"render": 0.0, "register": 0.0, "fuse": 0.0}
    for t in timing:
        totals["render"] += t["t_register"] - t["t_render"]
        totals["register"] += t["t_fuse"] - t["t_register"]
        totals["fuse"] += t["t_done"] - t["t_fuse"]
    total = sum(totals.values())
    if total <= 0:
        return {}
    return {f"share_{k}": v / total for k, v in totals.items()}


def write_outputs(out: RunMetrics, directory: Path, snapshot=True):
    directory.mkdir(parents=True, exist_ok=True)
    write_ply(out.mesh, directory / "mesh.ply")
    with open(directory / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in out.rows:
            w.writerow([_fmt(row[c]) for c in METRICS_HEADER])
    with open(directory / "timing.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TIMING_HEADER)
        for t in out.timing:
            w.writerow([_fmt(t[c]) for c in TIMING_HEADER])
    write_trajectory(directory / "trajectory.csv", out.poses)
    if snapshot and out.grid is not None:
        write_grid_snapshot(directory / "grid.stsg", out.grid)
    with open(directory / "summary.txt", "w") as f:
        for k, v in out.summary.items():
            f.write(f"{k} = {_fmt(v)}\n")
