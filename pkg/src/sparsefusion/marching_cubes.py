"""Sparse marching cubes over allocated blocks.

Blocks are processed in batches sized by a memory budget.  Each batch runs a
count pass (active cubes and triangles per block), an offset pass (prefix sum)
and an emit pass.  A cube is polygonised only when all eight corners hold a
distance; cubes that straddle a block boundary read the neighbouring block.
Vertices are welded by cube-edge id within a batch only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._mc_tables import CORNERS, EDGES, TRI_TABLE
from .geometry import Intrinsics, Pose
from .grid import SparseTsdfGrid
from .render import GridView, tsdf_gradient

_TRI_COUNT = (TRI_TABLE >= 0).sum(axis=1) // 3


@dataclass
class Mesh:
    vertices: np.ndarray
    normals: np.ndarray
    faces: np.ndarray

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self):
        return len(self.faces)

    def face_areas(self):
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def gather_voxels(view: GridView, coords):
    """Voxel values at integer coordinates (..., 3); NaN outside the box or in empty blocks."""
    c = np.asarray(coords, dtype=np.int64)
    m = view.m
    r = view.table.shape[0] * m
    inside = np.all((c >= 0) & (c < r), axis=-1)
    cc = np.where(inside[..., None], c, 0)
    b = cc // m
    slots = view.table[b[..., 0], b[..., 1], b[..., 2]]
    ok = inside & (slots >= 0)
    loc = cc - b * m
    vals = view.pool[np.where(ok, slots, 0), loc[..., 0], loc[..., 1], loc[..., 2]].astype(np.float64)
    return np.where(ok, vals, np.nan)


def _polygonize_batch(view: GridView, blocks, origin, vs, res):
    m = view.m
    # count pass: corner samples with a one-voxel apron on the high side
    ar = np.arange(m + 1)
    local = np.stack(np.meshgrid(ar, ar, ar, indexing="ij"), -1)
    base = blocks[:, None, None, None, :] * m
    vals = gather_voxels(view, base + local[None])  # (B, m+1, m+1, m+1)
    case = np.zeros((len(blocks), m, m, m), dtype=np.int64)
    finite = np.ones((len(blocks), m, m, m), dtype=bool)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        v = vals[:, dx:dx + m, dy:dy + m, dz:dz + m]
        finite &= ~np.isnan(v)
        case |= (v < 0).astype(np.int64) << c
    case[~finite] = 0
    tri_count = _TRI_COUNT[case]
    per_block = tri_count.reshape(len(blocks), -1).sum(axis=1)
    # offset pass
    offsets = np.concatenate([[0], np.cumsum(per_block)])
    total = int(offsets[-1])
    if total == 0:
        return None
    # emit pass
    bi, ci, cj, ck = np.nonzero(tri_count)
    cube = blocks[bi] * m + np.stack([ci, cj, ck], axis=1)  # global lower-corner voxel
    tri = TRI_TABLE[case[bi, ci, cj, ck]]  # (K, 16)
    slot_mask = tri >= 0
    cube_of = np.repeat(np.arange(len(cube)), slot_mask.sum(axis=1))
    edge_ids = tri[slot_mask]
    c0 = cube[cube_of] + CORNERS[EDGES[edge_ids, 0]]
    c1 = cube[cube_of] + CORNERS[EDGES[edge_ids, 1]]
    lo = np.minimum(c0, c1)
    axis = np.argmax(c1 != c0, axis=1)
    r1 = res + 1
    keys = ((lo[:, 0] * r1 + lo[:, 1]) * r1 + lo[:, 2]) * 3 + axis

    v0 = gather_voxels(view, c0)
    v1 = gather_voxels(view, c1)
    t = v0 / (v0 - v1)
    # a zero-valued corner yields the same point on every incident edge
    zero0, zero1 = v0 == 0, v1 == 0
    vox_key = 3 * r1 ** 3
    keys = np.where(zero0, vox_key + (c0[:, 0] * r1 + c0[:, 1]) * r1 + c0[:, 2], keys)
    keys = np.where(zero1 & ~zero0, vox_key + (c1[:, 0] * r1 + c1[:, 1]) * r1 + c1[:, 2], keys)
    t = np.where(zero0, 0.0, np.where(zero1, 1.0, t))
    p0 = origin + (c0 + 0.5) * vs
    p1 = origin + (c1 + 0.5) * vs
    pos = p0 + t[:, None] * (p1 - p0)

    # outward direction per triangle: the cube's own corner-value gradient,
    # always defined since every corner of a polygonised cube holds a distance
    signs = 2.0 * CORNERS - 1.0  # (8, 3)
    corner_vals = gather_voxels(view, cube[:, None, :] + CORNERS[None])  # (K, 8)
    cube_grad = corner_vals @ signs
    face_dir = cube_grad[cube_of[::3]]

    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    vertices = pos[first]
    faces = inverse.reshape(-1, 3)
    return vertices, faces, face_dir


def marching_cubes(grid: SparseTsdfGrid, region: tuple[Pose, Intrinsics] | None = None,
                   memory_budget=64 << 20, view: GridView | None = None) -> Mesh:
    """Triangle mesh of the zero level set of the stored TSDF.

    ``region`` restricts polygonisation to allocated blocks in a camera
    frustum.  ``memory_budget`` (bytes) bounds the per-batch working set.
    """
    view = view or GridView.of(grid)
    cfg = grid.config
    if region is None:
        blocks = grid.allocated_blocks()
    else:
        pose, intr = region
        blocks = grid.occupied_blocks_in_frustum(pose, intr)
    blocks = blocks[np.lexsort((blocks[:, 2], blocks[:, 1], blocks[:, 0]))] if len(blocks) else blocks
    if len(blocks) == 0:
        return Mesh.empty()
    m = cfg.voxels_per_block_axis
    per_block = 8 * 40 * (m + 1) ** 3  # rough bytes of working arrays per block
    batch = max(1, int(memory_budget // per_block))
    origin, vs = cfg.origin, cfg.voxel_size

    verts, faces, dirs = [], [], []
    count = 0
    for s in range(0, len(blocks), batch):
        out = _polygonize_batch(view, blocks[s:s + batch], origin, vs, cfg.resolution)
        if out is None:
            continue
        v, f, d = out
        verts.append(v)
        faces.append(f + count)
        dirs.append(d)
        count += len(v)
    if not verts:
        return Mesh.empty()
    vertices = np.concatenate(verts)
    faces = np.concatenate(faces)
    face_dir = np.concatenate(dirs)

    # drop collapsed and zero-area triangles
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area = 0.5 * np.linalg.norm(cross, axis=1)
    distinct = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    keep = distinct & (area > 1e-12)
    faces, cross, face_dir = faces[keep], cross[keep], face_dir[keep]

    normals = tsdf_gradient(view, vertices)
    # fall back to the mean incident face normal where the gradient is undefined
    face_n = cross / np.linalg.norm(cross, axis=1, keepdims=True)
    grad_ok = np.all(np.isfinite(normals), axis=1) & (np.linalg.norm(np.nan_to_num(normals), axis=1) > 0)
    # orient faces along the outward (increasing distance) direction
    flip = np.einsum("ij,ij->i", face_dir, face_n) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    face_n[flip] *= -1
    acc = np.zeros_like(vertices)
    np.add.at(acc, faces.reshape(-1), np.repeat(face_n, 3, axis=0))
    normals = np.where(grad_ok[:, None], np.nan_to_num(normals), acc)
    length = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.where(length > 0, normals / np.where(length > 0, length, 1.0), [0.0, 0.0, 1.0])

    used = np.zeros(len(vertices), dtype=bool)
    used[faces.reshape(-1)] = True
    remap = np.cumsum(used) - 1
    return Mesh(vertices[used], normals[used], remap[faces])
