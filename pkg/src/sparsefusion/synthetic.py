"""Analytic signed-distance scenes and a sphere-tracing depth camera.

These serve both as the data source for synthetic scans and as the
ground-truth oracle for reconstruction error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import DepthFrame, Intrinsics, Pose, look_at


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class Plane:
    """Half-space ``n . x <= offset`` is solid; ``normal`` points outside."""

    normal: tuple
    offset: float

    def sdf(self, p):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return p @ n - self.offset


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def sdf(self, p):
        local = (p - np.asarray(self.center)) @ np.asarray(self.rotation)
        q = np.abs(local) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside


@dataclass
class AnalyticScene:
    """Union of primitives; the signed distance is the minimum over them."""

    primitives: list

    def sdf(self, points):
        p = np.asarray(points, dtype=np.float64)
        if not self.primitives:
            return np.full(p.shape[:-1], np.inf)
        out = self.primitives[0].sdf(p)
        for prim in self.primitives[1:]:
            out = np.minimum(out, prim.sdf(p))
        return out

    def gradient(self, points, h=1e-6):
        p = np.asarray(points, dtype=np.float64)
        g = np.empty(p.shape)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[..., k] = (self.sdf(p + e) - self.sdf(p - e)) / (2 * h)
        return g

    def normals(self, points):
        g = self.gradient(points)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)


def sphere_cluster(center=(0.0, 0.0, 0.0), radius=0.25, satellites=10, seed=3):
    """A main sphere plus smaller satellite spheres, rich enough to constrain ICP."""
    rng = np.random.default_rng(seed)
    c = np.asarray(center, dtype=np.float64)
    prims = [Sphere(tuple(c), radius)]
    for _ in range(satellites):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        r = radius * rng.uniform(0.25, 0.45)
        prims.append(Sphere(tuple(c + d * (radius + 0.4 * r)), r))
    return AnalyticScene(prims)


def sphere_trace(scene: AnalyticScene, origins, directions, t_min, t_max,
                 max_steps=256, tolerance=1e-5):
    """March unit-direction rays through ``scene``.

    Returns ``(t, hit)``; ``t`` is NaN for rays that never come within
    ``tolerance`` of the surface inside ``[t_min, t_max]``.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n = d.shape[0]
    t = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)).copy()
    t_hi = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,))
    if o.shape[0] == 1:
        o = np.broadcast_to(o, (n, 3))
    hit = np.zeros(n, dtype=bool)
    active = np.arange(n)
    for _ in range(max_steps):
        if active.size == 0:
            break
        dist = scene.sdf(o[active] + t[active, None] * d[active])
        done = np.abs(dist) < tolerance
        hit[active[done]] = True
        t[active] += np.where(done, 0.0, np.abs(dist))
        keep = ~done & (t[active] <= t_hi[active])
        active = active[keep]
    t = np.where(hit & (t <= t_hi), t, np.nan)
    return t, hit & ~np.isnan(t)


def render_synthetic_depth(scene: AnalyticScene, pose: Pose, intr: Intrinsics,
                           sigma0=0.0, rng=None, tolerance=1e-5, max_steps=256) -> DepthFrame:
    """Depth image of ``scene`` seen from ``pose``.

    With ``sigma0 > 0`` each valid depth gets Gaussian noise of standard
    deviation ``sigma0 * z**2`` and that sigma is recorded in the frame.
    """
    rays = intr.ray_directions().reshape(-1, 3)
    norms = np.linalg.norm(rays, axis=1)
    dirs_cam = rays / norms[:, None]
    dirs = dirs_cam @ pose.rotation.T
    # bounds are z-planes; convert to distances along each ray
    t_near = intr.near * norms
    t_far = intr.far * norms
    t, hit = sphere_trace(scene, pose.translation[None], dirs, t_near, t_far,
                          max_steps=max_steps, tolerance=tolerance)
    depth = np.where(hit, t * dirs_cam[:, 2], 0.0).reshape(intr.shape)
    sigma = None
    if sigma0 > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        elif isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        valid = depth > 0
        sigma = np.where(valid, sigma0 * depth ** 2, 0.0)
        noise = rng.standard_normal(depth.shape) * sigma
        depth = np.where(valid, depth + noise, 0.0)
        depth[valid & (depth <= 0)] = 0.0
    return DepthFrame(intr, depth, sigma)


def orbit_trajectory(center, distance, n_frames, arc_deg=60.0, elevation_deg=20.0,
                     start_deg=0.0, alternate=False):
    """Camera poses on a horizontal arc around ``center`` looking at it.

    Scene +y is up; the camera sits ``elevation_deg`` above the equator, or
    alternately above and below it when ``alternate`` is set.  An arc of
    360 degrees or more closes the loop without repeating the first pose.
    """
    c = np.asarray(center, dtype=np.float64)
    poses = []
    span = n_frames if arc_deg >= 360.0 else max(n_frames - 1, 1)
    for k in range(n_frames):
        az = np.radians(start_deg + arc_deg * k / span)
        el = np.radians(-elevation_deg if alternate and k % 2 else elevation_deg)
        eye = c + distance * np.array([np.cos(el) * np.sin(az), np.sin(el), -np.cos(el) * np.cos(az)])
        poses.append(look_at(eye, c, up=(0.0, 1.0, 0.0)))
    return poses
