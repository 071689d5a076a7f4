"""Sparse block-grid TSDF fusion of depth maps with point-to-plane ICP tracking."""

from .fusion import FusionParams, FusionStats, fuse_frame
from .geometry import DepthFrame, Intrinsics, NormalMap, Pose, SmallMotion, compute_normals
from .grid import GridConfig, PoolExhausted, SparseTsdfGrid, create_grid
from .marching_cubes import Mesh, marching_cubes
from .registration import MatchParams, TrackingLost, icp
from .render import compute_ray_bounds, raycast

__all__ = [
    "DepthFrame", "FusionParams", "FusionStats", "GridConfig", "Intrinsics", "MatchParams", "Mesh",
    "NormalMap", "PoolExhausted", "Pose", "SmallMotion", "SparseTsdfGrid", "TrackingLost",
    "compute_normals", "compute_ray_bounds", "create_grid", "fuse_frame", "icp", "marching_cubes",
    "raycast",
]
