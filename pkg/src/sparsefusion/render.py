"""Depth and normal rendering of the sparse TSDF by bounded raycasting.

Per ray, a 3D DDA over the coarse block lattice finds the span between the
first and last allocated block.  Stage one marches that span at half the
truncation distance looking for a positive-to-negative sign change; stage two
pins the zero crossing with a secant search and takes the normal from the
TSDF gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .geometry import DepthFrame, Intrinsics, NormalMap, Pose
from .grid import EMPTY, SparseTsdfGrid


@dataclass
class RayBounds:
    t_start: np.ndarray  # (H, W) meters along the unit ray; inf where empty
    t_end: np.ndarray  # -inf where empty

    @property
    def valid(self):
        return self.t_start <= self.t_end


@dataclass
class GridView:
    """Read-only arrays the kernels need: offset table, decoded pool and geometry."""

    table: np.ndarray
    pool: np.ndarray
    origin: np.ndarray
    voxel_size: float
    m: int
    truncation: float

    @classmethod
    def of(cls, grid: SparseTsdfGrid):
        cfg = grid.config
        return cls(grid.offset_table, grid.float_pool(), cfg.origin.astype(np.float64),
                   float(cfg.voxel_size), int(cfg.voxels_per_block_axis), float(cfg.truncation))


def camera_rays(pose: Pose, intr: Intrinsics):
    """Unit scene-frame ray directions (P, 3), their camera z components and t-bounds."""
    rays = intr.ray_directions().reshape(-1, 3)
    norms = np.linalg.norm(rays, axis=1)
    cam = rays / norms[:, None]
    return cam @ pose.rotation.T, cam[:, 2].copy(), intr.near * norms, intr.far * norms


# -- block DDA ---------------------------------------------------------------

@numba.njit(cache=True)
def _dda_bounds(origin, dirs, t_near, t_far, occupied, box_lo, block_side, n, t_start, t_end):
    box_hi = box_lo + block_side * n
    for r in range(dirs.shape[0]):
        t0 = t_near[r]
        t1 = t_far[r]
        for k in range(3):
            d = dirs[r, k]
            if abs(d) < 1e-300:
                if origin[k] < box_lo[k] or origin[k] > box_hi[k]:
                    t0 = np.inf
                continue
            a = (box_lo[k] - origin[k]) / d
            b = (box_hi[k] - origin[k]) / d
            if a > b:
                a, b = b, a
            t0 = max(t0, a)
            t1 = min(t1, b)
        t_start[r] = np.inf
        t_end[r] = -np.inf
        if not t0 <= t1:
            continue
        cell = np.empty(3, np.int64)
        step = np.empty(3, np.int64)
        t_max = np.empty(3)
        t_delta = np.empty(3)
        for k in range(3):
            p = origin[k] + dirs[r, k] * t0
            c = int(np.floor((p - box_lo[k]) / block_side))
            c = min(max(c, 0), n - 1)
            cell[k] = c
            d = dirs[r, k]
            if d > 0:
                step[k] = 1
                t_max[k] = (box_lo[k] + (c + 1) * block_side - origin[k]) / d
                t_delta[k] = block_side / d
            elif d < 0:
                step[k] = -1
                t_max[k] = (box_lo[k] + c * block_side - origin[k]) / d
                t_delta[k] = -block_side / d
            else:
                step[k] = 0
                t_max[k] = np.inf
                t_delta[k] = np.inf
        t = t0
        while t <= t1:
            k = 0
            if t_max[1] < t_max[k]:
                k = 1
            if t_max[2] < t_max[k]:
                k = 2
            t_exit = min(t_max[k], t1)
            if occupied[cell[0], cell[1], cell[2]]:
                if t < t_start[r]:
                    t_start[r] = t
                if t_exit > t_end[r]:
                    t_end[r] = t_exit
            t = t_max[k]
            cell[k] += step[k]
            t_max[k] += t_delta[k]
            if cell[k] < 0 or cell[k] >= n:
                break


def compute_ray_bounds(grid: SparseTsdfGrid, pose: Pose, intr: Intrinsics) -> RayBounds:
    """Per-pixel span covering every allocated block the ray crosses in [near, far]."""
    dirs, _, t_near, t_far = camera_rays(pose, intr)
    cfg = grid.config
    t_start = np.empty(len(dirs))
    t_end = np.empty(len(dirs))
    _dda_bounds(pose.translation.astype(np.float64), dirs, t_near, t_far,
                grid.offset_table != EMPTY, cfg.origin.astype(np.float64),
                float(cfg.block_side), cfg.blocks_per_axis, t_start, t_end)
    return RayBounds(t_start.reshape(intr.shape), t_end.reshape(intr.shape))


# -- trilinear sampling ------------------------------------------------------

@numba.njit(cache=True)
def _voxel(table, pool, m, i, j, k):
    n = table.shape[0]
    r = n * m
    if i < 0 or j < 0 or k < 0 or i >= r or j >= r or k >= r:
        return np.nan
    slot = table[i // m, j // m, k // m]
    if slot < 0:
        return np.nan
    return pool[slot, i % m, j % m, k % m]


@numba.njit(cache=True)
def _trilinear(table, pool, origin, vs, m, x, y, z):
    gx = (x - origin[0]) / vs - 0.5
    gy = (y - origin[1]) / vs - 0.5
    gz = (z - origin[2]) / vs - 0.5
    i = int(np.floor(gx))
    j = int(np.floor(gy))
    k = int(np.floor(gz))
    fx = gx - i
    fy = gy - j
    fz = gz - k
    acc = 0.0
    for di in range(2):
        wx = fx if di else 1.0 - fx
        for dj in range(2):
            wy = fy if dj else 1.0 - fy
            for dk in range(2):
                wz = fz if dk else 1.0 - fz
                v = _voxel(table, pool, m, i + di, j + dj, k + dk)
                if np.isnan(v):
                    return np.nan
                acc += wx * wy * wz * v
    return acc


@numba.njit(cache=True)
def _sample_many(table, pool, origin, vs, m, pts, out):
    for p in range(pts.shape[0]):
        out[p] = _trilinear(table, pool, origin, vs, m, pts[p, 0], pts[p, 1], pts[p, 2])


def sample_tsdf(view: GridView, points):
    """Trilinear TSDF at scene points (..., 3); NaN if any corner voxel is χ."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    out = np.empty(len(pts))
    _sample_many(view.table, view.pool, view.origin, view.voxel_size, view.m, pts, out)
    return out.reshape(np.shape(points)[:-1])


def tsdf_gradient(view: GridView, points, h=None):
    """Central-difference gradient of the trilinear TSDF (..., 3); NaN where undefined."""
    h = 0.5 * view.voxel_size if h is None else h
    p = np.asarray(points, dtype=np.float64)
    g = np.empty(p.shape)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[..., k] = (sample_tsdf(view, p + e) - sample_tsdf(view, p - e)) / (2 * h)
    return g


# -- raycasting --------------------------------------------------------------

@numba.njit(cache=True)
def _raycast(table, pool, origin_grid, vs, m, trunc, cam, dirs, dir_z, t_start, t_end,
             step, tol, depth, normals, steps):
    for r in range(dirs.shape[0]):
        depth[r] = 0.0
        normals[r, 0] = 0.0
        normals[r, 1] = 0.0
        normals[r, 2] = 0.0
        steps[r] = 0
        if not t_start[r] <= t_end[r]:
            continue
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        t = t_start[r]
        prev = np.nan
        prev_t = t
        hit_t = -1.0
        limit = t_end[r] + step
        # stage 1: coarse march
        while t <= limit:
            f = _trilinear(table, pool, origin_grid, vs, m,
                           cam[0] + dx * t, cam[1] + dy * t, cam[2] + dz * t)
            steps[r] += 1
            if not np.isnan(f):
                if not np.isnan(prev) and prev > 0.0 and f <= 0.0:
                    # stage 2: secant (regula falsi) refinement on [prev_t, t]
                    a, fa, b, fb = prev_t, prev, t, f
                    c = b - fb * (b - a) / (fb - fa)
                    for _ in range(30):
                        fc = _trilinear(table, pool, origin_grid, vs, m,
                                        cam[0] + dx * c, cam[1] + dy * c, cam[2] + dz * c)
                        if np.isnan(fc) or fc == 0.0:
                            break
                        if fc > 0.0:
                            a, fa = c, fc
                        else:
                            b, fb = c, fc
                        c_new = b - fb * (b - a) / (fb - fa)
                        moved = abs(c_new - c)
                        c = c_new
                        if moved < tol:
                            break
                    hit_t = c
                    break
            prev = f
            prev_t = t
            t += step
        if hit_t < 0:
            continue
        depth[r] = hit_t * dir_z[r]
        px = cam[0] + dx * hit_t
        py = cam[1] + dy * hit_t
        pz = cam[2] + dz * hit_t
        h = 0.5 * vs
        gx = (_trilinear(table, pool, origin_grid, vs, m, px + h, py, pz)
              - _trilinear(table, pool, origin_grid, vs, m, px - h, py, pz))
        gy = (_trilinear(table, pool, origin_grid, vs, m, px, py + h, pz)
              - _trilinear(table, pool, origin_grid, vs, m, px, py - h, pz))
        gz = (_trilinear(table, pool, origin_grid, vs, m, px, py, pz + h)
              - _trilinear(table, pool, origin_grid, vs, m, px, py, pz - h))
        norm = np.sqrt(gx * gx + gy * gy + gz * gz)
        if norm > 0 and not np.isnan(norm):
            normals[r, 0] = gx / norm
            normals[r, 1] = gy / norm
            normals[r, 2] = gz / norm


@dataclass
class RaycastResult:
    frame: DepthFrame
    normals: NormalMap
    steps: np.ndarray  # stage-one samples per pixel

    def __iter__(self):
        return iter((self.frame, self.normals))


def raycast(grid: SparseTsdfGrid, pose: Pose, intr: Intrinsics, bounds: RayBounds | None = None,
            view: GridView | None = None, secant_tol=None) -> RaycastResult:
    """Render depth and camera-frame normals of the stored surface."""
    view = view or GridView.of(grid)
    if bounds is None:
        bounds = compute_ray_bounds(grid, pose, intr)
    dirs, dir_z, _, _ = camera_rays(pose, intr)
    npx = len(dirs)
    depth = np.empty(npx)
    normals = np.empty((npx, 3))
    steps = np.empty(npx, dtype=np.int64)
    tol = 1e-2 * view.voxel_size if secant_tol is None else secant_tol
    _raycast(view.table, view.pool, view.origin, view.voxel_size, view.m, view.truncation,
             pose.translation.astype(np.float64), dirs, dir_z,
             bounds.t_start.reshape(-1), bounds.t_end.reshape(-1),
             0.5 * view.truncation, tol, depth, normals, steps)
    n_cam = normals @ pose.rotation
    n_ok = (depth > 0) & (np.linalg.norm(n_cam, axis=1) > 0.5)
    # gradient points outward, i.e. towards the camera for a visible front face
    frame = DepthFrame(intr, depth.reshape(intr.shape))
    nmap = NormalMap(n_cam.reshape(intr.shape + (3,)), n_ok.reshape(intr.shape))
    return RaycastResult(frame, nmap, steps.reshape(intr.shape))
