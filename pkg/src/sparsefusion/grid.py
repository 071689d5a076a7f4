"""Block-sparse truncated signed distance volume.

The box is tiled by N³ coarse blocks, each holding M³ voxels.  An offset table
maps every block to a slot in a preallocated payload pool, or to ``EMPTY``.
Empty blocks read as χ (no surface within the truncation distance).

In memory χ is NaN.  Quantized payloads use one signed byte for the distance
(``CHI_CODE`` reserved) and one unsigned byte for the auxiliary channel, which
holds either an accumulated weight or a Kalman variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, Pose

CHI = np.nan
CHI_CODE = -128
TSDF_CODE_MAX = 127
AUX_CODE_MAX = 255
EMPTY = -1


class PoolExhausted(RuntimeError):
    """No free slot left in the payload pool."""


def is_chi(value):
    return np.isnan(value)


def quantize_tsdf(d, truncation):
    """Map distances in [-δ, δ] onto codes [-127, 127]; χ (NaN) -> CHI_CODE.

    Values outside the band are clamped; callers apply the χ cut-off first.
    """
    d = np.asarray(d, dtype=np.float64)
    chi = np.isnan(d)
    scaled = np.clip(np.where(chi, 0.0, d) / truncation, -1.0, 1.0) * TSDF_CODE_MAX
    code = np.rint(scaled).astype(np.int8)
    code = np.where(chi, np.int8(CHI_CODE), code).astype(np.int8)
    return code if code.ndim else np.int8(code)


def dequantize_tsdf(code, truncation):
    code = np.asarray(code)
    out = code.astype(np.float64) * (truncation / TSDF_CODE_MAX)
    out = np.where(code == CHI_CODE, np.nan, out)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class AuxCodec:
    """8-bit codec for the per-voxel weight or variance channel.

    ``weight`` mode is linear over [0, weight_max]; ``variance`` mode is
    logarithmic over [variance_min, variance_max].
    """

    mode: str = "weight"
    weight_max: float = 20.0
    variance_min: float = 1e-8
    variance_max: float = 1e-2

    def __post_init__(self):
        if self.mode not in ("weight", "variance"):
            raise ValueError(f"unknown aux mode {self.mode!r}")
        if self.weight_max <= 0 or not 0 < self.variance_min < self.variance_max:
            raise ValueError("invalid aux range")

    def encode(self, value):
        v = np.asarray(value, dtype=np.float64)
        v = np.where(np.isnan(v), 0.0, v)
        if self.mode == "weight":
            s = v / self.weight_max
        else:
            lo, hi = np.log(self.variance_min), np.log(self.variance_max)
            s = (np.log(np.clip(v, self.variance_min, self.variance_max)) - lo) / (hi - lo)
        return np.rint(np.clip(s, 0.0, 1.0) * AUX_CODE_MAX).astype(np.uint8)

    def decode(self, code):
        s = np.asarray(code).astype(np.float64) / AUX_CODE_MAX
        if self.mode == "weight":
            return s * self.weight_max
        lo, hi = np.log(self.variance_min), np.log(self.variance_max)
        return np.exp(lo + s * (hi - lo))


@dataclass(frozen=True)
class GridConfig:
    blocks_per_axis: int
    voxels_per_block_axis: int
    box_origin: tuple = (0.0, 0.0, 0.0)
    box_side: float = 1.0
    truncation: float | None = None  # default: 4 voxels
    bytes_per_voxel: int = 2
    aux: AuxCodec = AuxCodec()

    def __post_init__(self):
        if self.blocks_per_axis < 1 or self.voxels_per_block_axis < 1:
            raise ValueError("blocks_per_axis and voxels_per_block_axis must be >= 1")
        if not self.box_side > 0:
            raise ValueError("box_side must be positive")
        object.__setattr__(self, "box_origin", tuple(float(x) for x in self.box_origin))
        if self.truncation is None:
            object.__setattr__(self, "truncation", 4.0 * self.voxel_size)
        if self.truncation < 2.0 * self.voxel_size * (1 - 1e-12):
            raise ValueError(
                f"truncation {self.truncation} < 2 * voxel_size {self.voxel_size}")

    @property
    def resolution(self):
        return self.blocks_per_axis * self.voxels_per_block_axis

    @property
    def voxel_size(self):
        return self.box_side / self.resolution

    @property
    def block_side(self):
        return self.box_side / self.blocks_per_axis

    @property
    def origin(self):
        return np.asarray(self.box_origin)

    def voxel_center(self, coords):
        return self.origin + (np.asarray(coords, dtype=np.float64) + 0.5) * self.voxel_size


class SparseTsdfGrid:
    """Two-buffer sparse volume: offset table plus payload pool.

    ``precision="float"`` keeps float64 payloads (χ as NaN) instead of bytes;
    it is the bit-independent oracle mode and is otherwise identical.
    """

    def __init__(self, config: GridConfig, pool_capacity=None, precision="quantized"):
        n, m = config.blocks_per_axis, config.voxels_per_block_axis
        if pool_capacity is None:
            pool_capacity = max(1, n ** 3 // 8)
        if pool_capacity < 0 or pool_capacity > n ** 3:
            raise ValueError(f"pool_capacity must be in [0, {n ** 3}]")
        if precision not in ("quantized", "float"):
            raise ValueError(f"unknown precision {precision!r}")
        self.config = config
        self.precision = precision
        self.capacity = int(pool_capacity)
        self.offset_table = np.full((n, n, n), EMPTY, dtype=np.int32)
        if precision == "quantized":
            self.tsdf = np.full((self.capacity, m, m, m), CHI_CODE, dtype=np.int8)
            self.aux = np.zeros((self.capacity, m, m, m), dtype=np.uint8)
        else:
            self.tsdf = np.full((self.capacity, m, m, m), np.nan)
            self.aux = np.zeros((self.capacity, m, m, m))
        # pop() from the end hands out slot 0 first
        self.free_list = list(range(self.capacity - 1, -1, -1))

    # -- structure -----------------------------------------------------------

    @property
    def allocated_count(self):
        return self.capacity - len(self.free_list)

    @property
    def quantized(self):
        return self.precision == "quantized"

    def _check_block(self, coord):
        n = self.config.blocks_per_axis
        b = tuple(int(c) for c in coord)
        if len(b) != 3 or not all(0 <= c < n for c in b):
            raise IndexError(f"block coordinate {b} outside [0, {n})^3")
        return b

    def block_slot(self, coord):
        return int(self.offset_table[self._check_block(coord)])

    def allocate_block(self, coord):
        b = self._check_block(coord)
        slot = int(self.offset_table[b])
        if slot != EMPTY:
            return slot
        if not self.free_list:
            raise PoolExhausted(
                f"payload pool of {self.capacity} blocks is full "
                f"(N={self.config.blocks_per_axis}, M={self.config.voxels_per_block_axis})")
        slot = self.free_list.pop()
        self._reset_slot(slot)
        self.offset_table[b] = slot
        return slot

    def allocate_blocks(self, coords):
        """Allocate many blocks; returns the number newly allocated."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if coords.size == 0:
            return 0
        slots = self.offset_table[coords[:, 0], coords[:, 1], coords[:, 2]]
        new = coords[slots == EMPTY]
        for c in new:
            self.allocate_block(c)
        return len(new)

    def free_block(self, coord):
        b = self._check_block(coord)
        slot = int(self.offset_table[b])
        if slot == EMPTY:
            return
        self.offset_table[b] = EMPTY
        self._reset_slot(slot)
        self.free_list.append(slot)

    def _reset_slot(self, slot):
        if self.quantized:
            self.tsdf[slot] = CHI_CODE
        else:
            self.tsdf[slot] = np.nan
        self.aux[slot] = 0

    def allocated_blocks(self):
        """Block coordinates (k, 3) of allocated blocks, in pool-slot order."""
        coords = np.argwhere(self.offset_table != EMPTY)
        slots = self.offset_table[coords[:, 0], coords[:, 1], coords[:, 2]]
        return coords[np.argsort(slots, kind="stable")]

    def memory_bytes(self):
        m, n = self.config.voxels_per_block_axis, self.config.blocks_per_axis
        return self.config.bytes_per_voxel * self.allocated_count * m ** 3 + 4 * n ** 3

    # -- voxel access --------------------------------------------------------

    def _split(self, coords):
        c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        r = self.config.resolution
        if np.any((c < 0) | (c >= r)):
            raise IndexError(f"voxel coordinate outside [0, {r})^3")
        m = self.config.voxels_per_block_axis
        b = c // m
        return b, c - b * m

    def decode_tsdf(self, raw):
        if self.quantized:
            return dequantize_tsdf(raw, self.config.truncation)
        return np.asarray(raw, dtype=np.float64)

    def decode_aux(self, raw):
        if self.quantized:
            return self.config.aux.decode(raw)
        return np.asarray(raw, dtype=np.float64)

    def read_voxels(self, coords):
        """Vectorised read: returns (tsdf, aux) float arrays, NaN for χ."""
        b, l = self._split(coords)
        slots = self.offset_table[b[:, 0], b[:, 1], b[:, 2]]
        tsdf = np.full(len(slots), np.nan)
        aux = np.zeros(len(slots))
        ok = slots != EMPTY
        s, lx, ly, lz = slots[ok], l[ok, 0], l[ok, 1], l[ok, 2]
        tsdf[ok] = self.decode_tsdf(self.tsdf[s, lx, ly, lz])
        aux[ok] = self.decode_aux(self.aux[s, lx, ly, lz])
        return tsdf, aux

    def read_voxel(self, coord):
        tsdf, aux = self.read_voxels([coord])
        return float(tsdf[0]), float(aux[0])

    def write_voxels(self, coords, tsdf, aux):
        """Vectorised write.  |tsdf| > δ is stored as χ.

        Writing χ into an empty block is a no-op; writing a distance into an
        empty block raises ``KeyError`` (allocate first).
        """
        b, l = self._split(coords)
        tsdf = np.broadcast_to(np.asarray(tsdf, dtype=np.float64), (len(b),))
        aux = np.broadcast_to(np.asarray(aux, dtype=np.float64), (len(b),))
        tsdf = np.where(np.abs(tsdf) > self.config.truncation, np.nan, tsdf)
        slots = self.offset_table[b[:, 0], b[:, 1], b[:, 2]]
        empty = slots == EMPTY
        if np.any(empty & ~np.isnan(tsdf)):
            raise KeyError("write of a distance into an unallocated block")
        ok = ~empty
        s, lx, ly, lz = slots[ok], l[ok, 0], l[ok, 1], l[ok, 2]
        if self.quantized:
            self.tsdf[s, lx, ly, lz] = quantize_tsdf(tsdf[ok], self.config.truncation)
            self.aux[s, lx, ly, lz] = self.config.aux.encode(aux[ok])
        else:
            self.tsdf[s, lx, ly, lz] = tsdf[ok]
            self.aux[s, lx, ly, lz] = aux[ok]

    def write_voxel(self, coord, tsdf, aux=0.0):
        self.write_voxels([coord], tsdf, aux)

    def block_payload(self, slot):
        """Decoded (tsdf, aux) arrays of shape (M, M, M) for one pool slot."""
        return self.decode_tsdf(self.tsdf[slot]), self.decode_aux(self.aux[slot])

    def store_block(self, slot, tsdf, aux):
        tsdf = np.where(np.abs(tsdf) > self.config.truncation, np.nan, tsdf)
        if self.quantized:
            self.tsdf[slot] = quantize_tsdf(tsdf, self.config.truncation)
            self.aux[slot] = self.config.aux.encode(aux)
        else:
            self.tsdf[slot] = tsdf
            self.aux[slot] = aux

    def float_pool(self):
        """Decoded distance pool (float32, NaN for χ) for the render kernels."""
        if self.quantized:
            lut = np.arange(-128, 128, dtype=np.float64) * (self.config.truncation / TSDF_CODE_MAX)
            lut[0] = np.nan
            return lut[self.tsdf.astype(np.int64) + 128].astype(np.float32)
        return self.tsdf.astype(np.float32)

    # -- visibility ----------------------------------------------------------

    def block_bounds(self, coords):
        c = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        lo = self.config.origin + c * self.config.block_side
        return lo, lo + self.config.block_side

    def occupied_blocks_in_frustum(self, pose: Pose, intr: Intrinsics, near=None, far=None):
        """Allocated blocks whose AABB intersects the view frustum."""
        blocks = self.allocated_blocks()
        if len(blocks) == 0:
            return blocks
        lo, hi = self.block_bounds(blocks)
        hit = boxes_intersect_frustum(lo, hi, pose, intr,
                                      intr.near if near is None else near,
                                      intr.far if far is None else far)
        return blocks[hit]


def frustum_corners(pose: Pose, intr: Intrinsics, near, far):
    """Scene-frame corners (8, 3): near rectangle then far rectangle."""
    us = (-0.5, intr.width - 0.5)
    vs = (-0.5, intr.height - 0.5)
    pts = []
    for z in (near, far):
        for v, u in ((vs[0], us[0]), (vs[0], us[1]), (vs[1], us[1]), (vs[1], us[0])):
            pts.append([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z])
    return pose.apply(np.array(pts))


def boxes_intersect_frustum(lo, hi, pose: Pose, intr: Intrinsics, near, far):
    """Exact separating-axis test of AABBs (k, 3) against the view frustum."""
    corners = frustum_corners(pose, intr, near, far)
    near_q, far_q = corners[:4], corners[4:]
    face_normals = [np.cross(near_q[1] - near_q[0], near_q[3] - near_q[0])]
    for i in range(4):
        j = (i + 1) % 4
        face_normals.append(np.cross(near_q[j] - near_q[i], far_q[i] - near_q[i]))
    edge_dirs = [near_q[1] - near_q[0], near_q[3] - near_q[0]] + [far_q[i] - near_q[i] for i in range(4)]
    axes = [np.eye(3)[k] for k in range(3)] + face_normals
    for e in edge_dirs:
        for k in range(3):
            axes.append(np.cross(np.eye(3)[k], e))
    axes = np.array(axes)
    axes = axes[np.linalg.norm(axes, axis=1) > 1e-12]
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)

    centers = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    proj_c = centers @ axes.T
    proj_r = half @ np.abs(axes).T
    fproj = corners @ axes.T
    fmin, fmax = fproj.min(axis=0), fproj.max(axis=0)
    eps = 1e-12
    separated = (proj_c + proj_r < fmin - eps) | (proj_c - proj_r > fmax + eps)
    return ~np.any(separated, axis=1)


def create_grid(config: GridConfig, pool_capacity=None, precision="quantized") -> SparseTsdfGrid:
    return SparseTsdfGrid(config, pool_capacity, precision)


class FloatShadowGrid:
    """Dense float volume with the same domain and χ semantics (oracle only)."""

    MAX_VOXELS = 128 ** 3

    def __init__(self, config: GridConfig):
        r = config.resolution
        if r ** 3 > self.MAX_VOXELS:
            raise ValueError(f"dense shadow grid limited to 128^3 voxels, got {r}^3")
        self.config = config
        self.tsdf = np.full((r, r, r), np.nan)
        self.aux = np.zeros((r, r, r))

    @classmethod
    def from_sparse(cls, grid: SparseTsdfGrid):
        dense = cls(grid.config)
        m = grid.config.voxels_per_block_axis
        for b in grid.allocated_blocks():
            slot = grid.offset_table[tuple(b)]
            t, a = grid.block_payload(slot)
            sl = tuple(slice(int(c) * m, int(c) * m + m) for c in b)
            dense.tsdf[sl] = t
            dense.aux[sl] = a
        return dense
