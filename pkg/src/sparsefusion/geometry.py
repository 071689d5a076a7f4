"""Pinhole camera, rigid poses and depth/normal maps.

Camera convention: right-handed, x right, y down, z forward; pixel (0, 0) is
the centre of the top-left pixel.  A :class:`Pose` maps camera coordinates to
scene coordinates, ``x_scene = R @ x_cam + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    @classmethod
    def from_fov(cls, width, height, fov_x_deg, near=0.1, far=10.0):
        fx = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2)
        return cls(width, height, fx, fx, (width - 1) / 2, (height - 1) / 2, near, far)

    @property
    def shape(self):
        return (self.height, self.width)

    def pixel_grid(self):
        """Return (u, v) float arrays of shape (height, width)."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return u.astype(np.float64), v.astype(np.float64)

    def ray_directions(self):
        """Camera-frame rays through every pixel centre, with z = 1."""
        u, v = self.pixel_grid()
        d = np.empty(self.shape + (3,))
        d[..., 0] = (u - self.cx) / self.fx
        d[..., 1] = (v - self.cy) / self.fy
        d[..., 2] = 1.0
        return d


def unproject(intr: Intrinsics, u, v, depth):
    """Pixel coordinates and z-depth to camera-frame points (..., 3)."""
    u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
    x = (u - intr.cx) / intr.fx * depth
    y = (v - intr.cy) / intr.fy * depth
    return np.stack([x, y, depth], axis=-1)


def project(intr: Intrinsics, points):
    """Camera-frame points (..., 3) to ``(u, v, z, valid)``.

    ``valid`` is False where z <= 0; u and v are NaN there.
    """
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    valid = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(valid, intr.fx * p[..., 0] / z + intr.cx, np.nan)
        v = np.where(valid, intr.fy * p[..., 1] / z + intr.cy, np.nan)
    return u, v, z, valid


# -- poses -------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        """Map points (..., 3) through the pose."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def apply_inverse(self, points):
        return (np.asarray(points) - self.translation) @ self.rotation

    def is_valid(self, tol=1e-9):
        r = self.rotation
        return (np.allclose(r.T @ r, np.eye(3), atol=tol)
                and abs(np.linalg.det(r) - 1.0) <= tol)


def compose(a: Pose, b: Pose) -> Pose:
    """Pose of ``a ∘ b``: apply b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def rotation_angle(r):
    """Angle in radians of a rotation matrix."""
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(c))


def pose_error(estimate: Pose, truth: Pose):
    """Return (rotation error in radians, translation error in meters)."""
    d = compose(invert(truth), estimate)
    return rotation_angle(d.rotation), float(np.linalg.norm(estimate.translation - truth.translation))


def axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def euler_xyz(alpha, beta, gamma):
    """Rotation by alpha about x, then beta about y, then gamma about z."""
    return axis_angle([0, 0, 1], gamma) @ axis_angle([0, 1, 0], beta) @ axis_angle([1, 0, 0], alpha)


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def nearest_rotation(m):
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera pose at ``eye`` whose +z axis points at ``target``.

    ``up`` is the scene direction that should appear towards the top of the
    image, i.e. along camera -y.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    down = -np.asarray(up, dtype=np.float64)
    x = np.cross(down, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross([1.0, 0.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.column_stack([x, y, z]), eye)


@dataclass(frozen=True)
class SmallMotion:
    """Linearised rigid motion: rotation angles (alpha, beta, gamma) and translation."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=np.float64).reshape(3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def zero(cls):
        return cls(np.zeros(3), np.zeros(3))

    def vector(self):
        return np.concatenate([self.r, self.t])

    def linear_rotation(self):
        a, b, g = self.r
        return np.array([[1.0, -g, b], [g, 1.0, -a], [-b, a, 1.0]])

    def to_pose(self) -> Pose:
        return Pose(nearest_rotation(self.linear_rotation()), self.t)


def apply_motion(pose: Pose, m: SmallMotion) -> Pose:
    """Left-compose the re-orthonormalised small motion onto ``pose``."""
    return compose(m.to_pose(), pose)


# -- depth and normal maps ---------------------------------------------------

@dataclass
class DepthFrame:
    """Metric z-depth per pixel, 0 where invalid; optional per-pixel noise sigma."""

    intrinsics: Intrinsics
    depth: np.ndarray
    sigma: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.shape != self.intrinsics.shape:
            raise ValueError(f"depth shape {self.depth.shape} != {self.intrinsics.shape}")
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=np.float64)

    @property
    def valid(self):
        return self.depth > 0

    def points(self):
        """Camera-frame points (H, W, 3); invalid pixels hold z = 0."""
        u, v = self.intrinsics.pixel_grid()
        return unproject(self.intrinsics, u, v, self.depth)

    @classmethod
    def empty(cls, intr: Intrinsics):
        return cls(intr, np.zeros(intr.shape))


@dataclass
class NormalMap:
    normals: np.ndarray  # (H, W, 3), camera frame
    valid: np.ndarray  # (H, W) bool


def compute_normals(frame: DepthFrame, voxel_size=0.0, sigma0=0.0, threshold=None) -> NormalMap:
    """Normals from central differences of unprojected neighbours.

    A pixel gets no normal if any of its four neighbours is invalid or if a
    neighbour's depth differs by more than the discontinuity threshold
    (``3 * sigma0 * z**2 + 2 * voxel_size`` unless given explicitly).
    """
    d = frame.depth
    h, w = d.shape
    pts = frame.points()
    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    if h < 3 or w < 3:
        return NormalMap(normals, valid)

    c = d[1:-1, 1:-1]
    left, right = d[1:-1, :-2], d[1:-1, 2:]
    up, down = d[:-2, 1:-1], d[2:, 1:-1]
    ok = (c > 0) & (left > 0) & (right > 0) & (up > 0) & (down > 0)
    if threshold is None:
        thr = 3.0 * sigma0 * c ** 2 + 2.0 * voxel_size
    else:
        thr = np.full_like(c, threshold)
    if threshold is not None or voxel_size > 0 or sigma0 > 0:
        for nb in (left, right, up, down):
            ok &= np.abs(nb - c) <= thr

    du = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 0
    n = n / np.where(norm > 0, norm, 1.0)[..., None]
    # face the camera: n . p < 0
    flip = np.einsum("ijk,ijk->ij", n, pts[1:-1, 1:-1]) > 0
    n[flip] *= -1
    n[~ok] = 0.0
    normals[1:-1, 1:-1] = n
    valid[1:-1, 1:-1] = ok
    return NormalMap(normals, valid)
