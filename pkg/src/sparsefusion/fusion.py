"""Measurement integration into the sparse TSDF.

A registered depth frame yields a per-voxel measurement T_k (projective
distance along the optical axis, positive in front of the surface) plus a
weight or variance.  Blocks touched by the truncation shell are allocated;
visible allocated blocks are updated with one of three schemes: a fixed-weight
running blend, a weight-accumulating average, or a per-voxel Kalman filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import DepthFrame, NormalMap, Pose, compute_normals, project, unproject
from .grid import AuxCodec, SparseTsdfGrid, TSDF_CODE_MAX

MODES = ("simple", "weighted", "kalman")


@dataclass(frozen=True)
class FusionParams:
    mode: str = "simple"
    w_fixed: float = 0.1
    w_max: float = 20.0
    weight: float = 1.0  # base per-frame weight in weighted mode
    process_variance: float | None = None  # Q; default (0.1 * quantization step)^2
    sigma0: float = 2.5e-4
    variance_floor: float = 1e-8
    truncation: float | None = None  # default: the grid's
    refinement_steps: int = 0
    edge_weighting: bool = True
    edge_band: int = 2
    min_view_cos: float = 0.1
    sample_stride: int | None = None  # pixels per block-selection tile; None = from resolution

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 < self.w_fixed <= 1:
            raise ValueError("w_fixed must be in (0, 1]")
        if self.w_max <= 0 or self.weight <= 0:
            raise ValueError("weights must be positive")
        if self.process_variance is not None and self.process_variance < 0:
            raise ValueError("process variance must be >= 0")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")

    def aux_codec(self, base: AuxCodec | None = None) -> AuxCodec:
        """Grid aux codec matching this mode (variance for Kalman, weight otherwise)."""
        base = base or AuxCodec()
        if self.mode == "kalman":
            return AuxCodec("variance", base.weight_max, base.variance_min, base.variance_max)
        return AuxCodec("weight", self.w_max, base.variance_min, base.variance_max)

    def truncation_for(self, grid):
        return grid.config.truncation if self.truncation is None else self.truncation

    def q_for(self, truncation):
        if self.process_variance is not None:
            return self.process_variance
        return (0.1 * truncation / TSDF_CODE_MAX) ** 2


@dataclass
class MeasurementSample:
    tsdf: np.ndarray  # NaN = χ
    variance: np.ndarray
    weight: np.ndarray


@dataclass
class FusionStats:
    frame: int
    mode: str
    voxels_updated: int
    blocks_allocated_now: int
    blocks_total: int
    memory_bytes: int

    CSV_HEADER = ("frame", "mode", "voxels_updated", "blocks_allocated_now",
                  "blocks_total", "memory_bytes")

    def csv_row(self):
        return (self.frame, self.mode, self.voxels_updated, self.blocks_allocated_now,
                self.blocks_total, self.memory_bytes)


# -- per-pixel quality -------------------------------------------------------

def quality_map(frame: DepthFrame, normals: NormalMap | None, params: FusionParams):
    """Per-pixel confidence factor in (0, 1].

    Scaled by the cosine between view ray and normal, and halved within
    ``edge_band`` pixels of a depth discontinuity or missing data.
    """
    valid = frame.valid
    if not params.edge_weighting or normals is None:
        return np.where(valid, 1.0, 0.0)
    rays = frame.intrinsics.ray_directions()
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    cos = -np.einsum("ijk,ijk->ij", rays, normals.normals)
    cos = np.where(normals.valid, np.clip(cos, params.min_view_cos, 1.0), params.min_view_cos)
    rough = ~(valid & normals.valid)
    size = 2 * params.edge_band + 1
    band = ndimage.binary_dilation(rough, structure=np.ones((size, size), dtype=bool))
    factor = np.where(band, 0.5 * cos, cos)
    return np.where(valid, factor, 0.0)


def measurement_variance(frame: DepthFrame, params: FusionParams):
    """Per-pixel depth variance: recorded sigma if present, else (sigma0 z^2)^2."""
    if frame.sigma is not None:
        sigma = frame.sigma
    else:
        sigma = params.sigma0 * frame.depth ** 2
    return np.maximum(sigma ** 2, params.variance_floor)


# -- measurement -------------------------------------------------------------

def _refine(frame: DepthFrame, ui, vi, x_cam, steps):
    """Discrete descent over neighbouring pixels towards the closest surface point."""
    intr = frame.intrinsics
    h, w = intr.shape
    depth = frame.depth
    best = np.linalg.norm(unproject(intr, ui, vi, depth[vi, ui]) - x_cam, axis=-1)
    for _ in range(steps):
        cur_u, cur_v = ui.copy(), vi.copy()
        for du in (-1, 0, 1):
            for dv in (-1, 0, 1):
                if du == 0 and dv == 0:
                    continue
                nu = np.clip(cur_u + du, 0, w - 1)
                nv = np.clip(cur_v + dv, 0, h - 1)
                d = depth[nv, nu]
                dist = np.linalg.norm(unproject(intr, nu, nv, d) - x_cam, axis=-1)
                better = (d > 0) & (dist < best)
                best = np.where(better, dist, best)
                ui = np.where(better, nu, ui)
                vi = np.where(better, nv, vi)
    return best


def estimate_measurement(frame: DepthFrame, pose: Pose, points, params: FusionParams,
                         truncation, quality=None, variance=None) -> MeasurementSample:
    """Projective TSDF measurement for scene points (..., 3).

    T_k = depth(pixel) - z_cam(x), χ (NaN) where the pixel is missing, the
    point is behind the camera or |T_k| > truncation.
    """
    intr = frame.intrinsics
    pts = np.asarray(points, dtype=np.float64)
    shape = pts.shape[:-1]
    x_cam = pose.apply_inverse(pts.reshape(-1, 3))
    u, v, z, front = project(intr, x_cam)
    ui = np.rint(np.where(front, u, -1.0))
    vi = np.rint(np.where(front, v, -1.0))
    inside = front & (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    ui = np.where(inside, ui, 0).astype(np.int64)
    vi = np.where(inside, vi, 0).astype(np.int64)
    d = frame.depth[vi, ui]
    ok = inside & (d > 0)
    tsdf = np.where(ok, d - z, np.nan)
    if params.refinement_steps > 0 and ok.any():
        idx = np.flatnonzero(ok & (np.abs(tsdf) <= truncation))
        dist = _refine(frame, ui[idx], vi[idx], x_cam[idx], params.refinement_steps)
        tsdf[idx] = np.copysign(np.minimum(dist, np.abs(tsdf[idx])), tsdf[idx])
    tsdf[np.abs(tsdf) > truncation] = np.nan
    if quality is None:
        quality = quality_map(frame, None, params)
    if variance is None:
        variance = measurement_variance(frame, params)
    q = np.where(ok, quality[vi, ui], 0.0)
    safe_q = np.where(q > 0, q, 1.0)
    var = np.where(ok, variance[vi, ui] / safe_q, np.inf)
    if params.mode == "weighted":
        weight = params.weight * q
    else:
        weight = params.w_fixed * q
    return MeasurementSample(tsdf.reshape(shape), var.reshape(shape), weight.reshape(shape))


# -- update rules ------------------------------------------------------------

def _cutoff(t, truncation):
    return np.where(np.abs(t) > truncation, np.nan, t)


def fuse_simple(t, t_k, w_k, truncation):
    """Fixed-weight blend; χ state takes the measurement directly."""
    t = np.asarray(t, dtype=np.float64)
    out = np.where(np.isnan(t), t_k, (1.0 - w_k) * t + w_k * t_k)
    return _cutoff(out, truncation)


def fuse_weighted(t, w, t_k, w_k, w_max, truncation):
    """Weight-accumulating average with the weight capped at ``w_max``."""
    t = np.asarray(t, dtype=np.float64)
    chi = np.isnan(t)
    blended = (w * t + w_k * t_k) / (w + w_k)
    new_t = np.where(chi, t_k, blended)
    new_w = np.where(chi, w_k, np.minimum(w + w_k, w_max))
    return _cutoff(new_t, truncation), new_w


def fuse_kalman(t, p, t_k, p_k, q, truncation):
    """Scalar Kalman update per voxel: predict with Q, correct with p_k."""
    t = np.asarray(t, dtype=np.float64)
    chi = np.isnan(t)
    pred = p + q
    gain = pred / (pred + p_k)
    new_t = np.where(chi, t_k, t + gain * (t_k - t))
    new_p = np.where(chi, p_k, (1.0 - gain) * pred)
    return _cutoff(new_t, truncation), new_p


def apply_update(t, aux, sample: MeasurementSample, params: FusionParams, truncation):
    """Apply the configured rule where the measurement is not χ.

    Returns ``(new_tsdf, new_aux, updated_mask)``.
    """
    m = ~np.isnan(sample.tsdf)
    new_t, new_a = t.copy(), aux.copy()
    if not m.any():
        return new_t, new_a, m
    if params.mode == "simple":
        new_t[m] = fuse_simple(t[m], sample.tsdf[m], sample.weight[m], truncation)
    elif params.mode == "weighted":
        new_t[m], new_a[m] = fuse_weighted(t[m], aux[m], sample.tsdf[m], sample.weight[m],
                                           params.w_max, truncation)
    else:
        new_t[m], new_a[m] = fuse_kalman(t[m], aux[m], sample.tsdf[m], sample.variance[m],
                                         params.q_for(truncation), truncation)
    return new_t, new_a, m


# -- block selection ---------------------------------------------------------

def _auto_stride(grid: SparseTsdfGrid, frame: DepthFrame):
    valid = frame.valid
    if not valid.any():
        return 1
    intr = frame.intrinsics
    zmax = frame.depth[valid].max()
    return max(1, int(grid.config.voxel_size * min(intr.fx, intr.fy) / zmax))


def shell_blocks(grid: SparseTsdfGrid, frame: DepthFrame, pose: Pose, truncation, stride=None):
    """Blocks that may hold a voxel with |T_k| <= truncation.

    The image is cut into stride x stride tiles; each tile's pixel pyramid
    between (min depth - δ) and (max depth + δ) is bounded in scene space and
    every block overlapping that box is returned.  Any voxel whose centre
    projects into the tile with a non-χ measurement lies inside the box, so
    no block is missed.
    """
    intr = frame.intrinsics
    cfg = grid.config
    n = cfg.blocks_per_axis
    s = stride or _auto_stride(grid, frame)
    h, w = intr.shape
    th, tw = -(-h // s), -(-w // s)
    pad = np.zeros((th * s, tw * s))
    pad[:h, :w] = frame.depth
    tiles = pad.reshape(th, s, tw, s).transpose(0, 2, 1, 3).reshape(th, tw, s * s)
    masked = np.where(tiles > 0, tiles, np.nan)
    has = np.any(tiles > 0, axis=-1)
    if not has.any():
        return np.zeros((0, 3), dtype=np.int64)
    ty, tx = np.nonzero(has)
    with np.errstate(all="ignore"):
        dmin = np.nanmin(masked[ty, tx], axis=-1) - truncation
        dmax = np.nanmax(masked[ty, tx], axis=-1) + truncation
    dmin = np.maximum(dmin, 1e-6)
    u0, u1 = tx * s - 0.5, np.minimum((tx + 1) * s, w) - 0.5
    v0, v1 = ty * s - 0.5, np.minimum((ty + 1) * s, h) - 0.5
    corners = []
    for z in (dmin, dmax):
        for uu in (u0, u1):
            for vv in (v0, v1):
                corners.append(unproject(intr, uu, vv, z))
    corners = pose.apply(np.stack(corners, axis=1))  # (k, 8, 3)
    lo = np.floor((corners.min(axis=1) - cfg.origin) / cfg.block_side).astype(np.int64)
    hi = np.floor((corners.max(axis=1) - cfg.origin) / cfg.block_side).astype(np.int64)
    keep = np.all(hi >= 0, axis=1) & np.all(lo < n, axis=1)
    lo, hi = np.clip(lo[keep], 0, n - 1), np.clip(hi[keep], 0, n - 1)
    ext = hi - lo + 1
    small = np.all(ext <= 2, axis=1)
    out = []
    if small.any():
        offs = np.stack(np.meshgrid(*([np.arange(2)] * 3), indexing="ij"), -1).reshape(-1, 3)
        cand = lo[small][:, None, :] + offs[None]
        ok = np.all(offs[None] < ext[small][:, None, :], axis=-1)
        out.append(cand[ok])
    for a, b in zip(lo[~small], hi[~small]):
        g = np.stack(np.meshgrid(*[np.arange(a[k], b[k] + 1) for k in range(3)], indexing="ij"), -1)
        out.append(g.reshape(-1, 3))
    blocks = np.concatenate(out) if out else np.zeros((0, 3), dtype=np.int64)
    return np.unique(blocks, axis=0)


def visible_allocated_blocks(grid: SparseTsdfGrid, frame: DepthFrame, pose: Pose, truncation):
    """Allocated blocks in the frustum that are not hidden more than δ behind the surface."""
    intr = frame.intrinsics
    blocks = grid.occupied_blocks_in_frustum(pose, intr)
    if len(blocks) == 0:
        return blocks
    lo, hi = grid.block_bounds(blocks)
    corners = np.stack([np.where(np.array([i, j, k], bool), hi, lo)
                        for i in (0, 1) for j in (0, 1) for k in (0, 1)], axis=1)
    cam = pose.apply_inverse(corners)
    z = cam[..., 2]
    zmin = z.min(axis=1)
    keep = np.ones(len(blocks), dtype=bool)
    in_front = np.all(z > 0, axis=1)
    depth = frame.depth
    for i in np.flatnonzero(in_front):
        u, v, _, _ = project(intr, cam[i])
        a0 = max(int(np.floor(u.min() + 0.5)), 0)
        a1 = min(int(np.floor(u.max() + 0.5)), intr.width - 1)
        b0 = max(int(np.floor(v.min() + 0.5)), 0)
        b1 = min(int(np.floor(v.max() + 0.5)), intr.height - 1)
        if a1 < a0 or b1 < b0:
            continue
        patch = depth[b0:b1 + 1, a0:a1 + 1]
        if np.all(patch > 0) and zmin[i] > patch.max() + truncation:
            keep[i] = False
    return blocks[keep]


def select_update_blocks(grid: SparseTsdfGrid, frame: DepthFrame, pose: Pose,
                         params: FusionParams | None = None):
    """Return (allocate_list, update_list) of block coordinates.

    ``allocate_list`` holds blocks overlapping the measured truncation shell
    (allocated if needed); ``update_list`` holds other visible blocks that are
    already allocated.
    """
    params = params or FusionParams()
    trunc = params.truncation_for(grid)
    alloc = shell_blocks(grid, frame, pose, trunc, params.sample_stride)
    visible = visible_allocated_blocks(grid, frame, pose, trunc)
    if len(visible) and len(alloc):
        n = grid.config.blocks_per_axis
        key = lambda b: (b[:, 0] * n + b[:, 1]) * n + b[:, 2]
        visible = visible[~np.isin(key(visible), key(alloc))]
    return alloc, visible


# -- frame driver ------------------------------------------------------------

def fuse_frame(grid: SparseTsdfGrid, frame: DepthFrame, pose: Pose,
               params: FusionParams | None = None, normals: NormalMap | None = None,
               frame_index=0, batch_blocks=256) -> FusionStats:
    """Integrate one registered depth frame into ``grid``."""
    params = params or FusionParams()
    trunc = params.truncation_for(grid)
    cfg = grid.config
    m = cfg.voxels_per_block_axis
    if grid.quantized and params.mode != "simple":
        want = "variance" if params.mode == "kalman" else "weight"
        if cfg.aux.mode != want:
            raise ValueError(f"{params.mode} fusion needs a {want!r} aux codec, grid has {cfg.aux.mode!r}")
    if normals is None and params.edge_weighting:
        sigma0 = params.sigma0 if frame.sigma is not None else 0.0
        normals = compute_normals(frame, voxel_size=cfg.voxel_size, sigma0=sigma0)
    quality = quality_map(frame, normals, params)
    variance = measurement_variance(frame, params)

    alloc, update = select_update_blocks(grid, frame, pose, params)
    before = grid.allocated_count
    grid.allocate_blocks(alloc)
    allocated_now = grid.allocated_count - before

    blocks = np.concatenate([alloc, update]) if len(update) else alloc
    local = np.stack(np.meshgrid(*([np.arange(m)] * 3), indexing="ij"), -1).reshape(-1, 3)
    updated = 0
    for start in range(0, len(blocks), batch_blocks):
        b = blocks[start:start + batch_blocks]
        slots = grid.offset_table[b[:, 0], b[:, 1], b[:, 2]]
        coords = b[:, None, :] * m + local[None]
        centers = cfg.voxel_center(coords)
        sample = estimate_measurement(frame, pose, centers, params, trunc, quality, variance)
        if np.all(np.isnan(sample.tsdf)):
            continue
        t, a = grid.decode_tsdf(grid.tsdf[slots]), grid.decode_aux(grid.aux[slots])
        shape = t.shape
        t, a = t.reshape(len(b), -1), a.reshape(len(b), -1)
        new_t, new_a, mask = apply_update(t, a, sample, params, trunc)
        updated += int(mask.sum())
        touched = np.flatnonzero(mask.any(axis=1))
        for i in touched:
            grid.store_block(slots[i], new_t[i].reshape(shape[1:]), new_a[i].reshape(shape[1:]))
    return FusionStats(frame_index, params.mode, updated, allocated_now,
                       grid.allocated_count, grid.memory_bytes())
