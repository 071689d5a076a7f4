"""Brute-force reference implementations used as test oracles.

They share no code with the library beyond the data types and the per-pixel
quality and variance maps, which are inputs to the fusion rules rather than
part of the sparse machinery under test.
"""

import numpy as np

from sparsefusion.fusion import measurement_variance, quality_map
from sparsefusion.geometry import compute_normals


class DenseFusion:
    """Every voxel of the box, updated with straight-line per-voxel rules."""

    def __init__(self, config, params):
        r = config.resolution
        self.config = config
        self.params = params
        self.tsdf = np.full((r, r, r), np.nan)
        self.aux = np.zeros((r, r, r))
        idx = np.stack(np.meshgrid(*([np.arange(r)] * 3), indexing="ij"), -1)
        self.centers = config.origin + (idx + 0.5) * config.voxel_size

    def fuse(self, frame, pose):
        p, cfg = self.params, self.config
        delta = cfg.truncation if p.truncation is None else p.truncation
        intr = frame.intrinsics
        normals = None
        if p.edge_weighting:
            sigma0 = p.sigma0 if frame.sigma is not None else 0.0
            normals = compute_normals(frame, voxel_size=cfg.voxel_size, sigma0=sigma0)
        quality = quality_map(frame, normals, p)
        variance = measurement_variance(frame, p)

        x = (self.centers - pose.translation) @ pose.rotation  # camera frame
        z = x[..., 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        u = np.rint(intr.fx * x[..., 0] / zs + intr.cx)
        v = np.rint(intr.fy * x[..., 1] / zs + intr.cy)
        inside = front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
        ui = np.where(inside, u, 0).astype(int)
        vi = np.where(inside, v, 0).astype(int)
        d = frame.depth[vi, ui]
        t_k = d - z
        upd = inside & (d > 0) & (np.abs(t_k) <= delta)
        q = quality[vi, ui]

        t, a = self.tsdf, self.aux
        for i in zip(*np.nonzero(upd)):
            tk, qi = t_k[i], q[i]
            if p.mode == "simple":
                w = p.w_fixed * qi
                new = tk if np.isnan(t[i]) else (1.0 - w) * t[i] + w * tk
                new_a = a[i]
            elif p.mode == "weighted":
                w = p.weight * qi
                if np.isnan(t[i]):
                    new, new_a = tk, w
                else:
                    new = (a[i] * t[i] + w * tk) / (a[i] + w)
                    new_a = min(a[i] + w, p.w_max)
            else:
                pk = variance[vi[i], ui[i]] / qi if qi > 0 else np.inf
                if np.isnan(t[i]):
                    new, new_a = tk, pk
                else:
                    pred = a[i] + p.q_for(delta)
                    gain = pred / (pred + pk)
                    new = t[i] + gain * (tk - t[i])
                    new_a = (1.0 - gain) * pred
            t[i] = np.nan if abs(new) > delta else new
            a[i] = new_a
        return int(upd.sum())


def slab_interval(origin, direction, lo, hi):
    """Ray/AABB intersection interval by the slab method; (inf, -inf) if none."""
    t0, t1 = -np.inf, np.inf
    for k in range(3):
        if direction[k] == 0.0:
            if not lo[k] <= origin[k] <= hi[k]:
                return np.inf, -np.inf
            continue
        a = (lo[k] - origin[k]) / direction[k]
        b = (hi[k] - origin[k]) / direction[k]
        t0, t1 = max(t0, min(a, b)), min(t1, max(a, b))
    return (t0, t1) if t0 <= t1 else (np.inf, -np.inf)


def rasterize_depth(mesh, pose, intr):
    """Z-buffer of a triangle mesh by point sampling at pixel centres."""
    depth = np.full(intr.shape, np.inf)
    cam = (mesh.vertices - pose.translation) @ pose.rotation
    z = cam[:, 2]
    zs = np.where(z > 0, z, np.nan)
    u = intr.fx * cam[:, 0] / zs + intr.cx
    v = intr.fy * cam[:, 1] / zs + intr.cy
    for f in mesh.faces:
        if np.any(~(z[f] > 0)):
            continue
        uu, vv, iz = u[f], v[f], 1.0 / z[f]
        x0, x1 = max(int(np.ceil(uu.min())), 0), min(int(np.floor(uu.max())), intr.width - 1)
        y0, y1 = max(int(np.ceil(vv.min())), 0), min(int(np.floor(vv.max())), intr.height - 1)
        if x1 < x0 or y1 < y0:
            continue
        px, py = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        den = (vv[1] - vv[2]) * (uu[0] - uu[2]) + (uu[2] - uu[1]) * (vv[0] - vv[2])
        if abs(den) < 1e-18:
            continue
        l0 = ((vv[1] - vv[2]) * (px - uu[2]) + (uu[2] - uu[1]) * (py - vv[2])) / den
        l1 = ((vv[2] - vv[0]) * (px - uu[2]) + (uu[0] - uu[2]) * (py - vv[2])) / den
        l2 = 1.0 - l0 - l1
        ins = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not ins.any():
            continue
        zz = 1.0 / (l0 * iz[0] + l1 * iz[1] + l2 * iz[2])  # perspective-correct depth
        cur = depth[py[ins], px[ins]]
        depth[py[ins], px[ins]] = np.minimum(cur, zz[ins])
    depth[~np.isfinite(depth)] = 0.0
    return depth
