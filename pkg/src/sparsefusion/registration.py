"""Point-to-plane ICP with projective matching and eigenvalue gating.

Each iteration matches source pixels to target pixels by projection, maps the
matched box onto the unit cube, assembles the 6x6 normal equations and solves
them only along well-conditioned eigen-directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (DepthFrame, NormalMap, Pose, SmallMotion, apply_motion,
                       compose, compute_normals, project)


class TrackingLost(RuntimeError):
    """Too few point matches to estimate the pose."""


@dataclass(frozen=True)
class MatchParams:
    max_distance: float = 0.05
    max_normal_angle: float = math.radians(30.0)
    max_iterations: int = 15
    convergence_epsilon: float = 1e-5
    eigen_threshold: float = 0.005
    min_extent: float = 1e-3  # floor on the shrink box side; set to the voxel size
    min_matches: int = 10

    def __post_init__(self):
        for name in ("max_distance", "max_normal_angle", "max_iterations",
                     "convergence_epsilon", "eigen_threshold", "min_extent"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def for_voxel_size(cls, voxel_size, **kw):
        kw.setdefault("max_distance", 10.0 * voxel_size)
        kw.setdefault("min_extent", voxel_size)
        return cls(**kw)


@dataclass
class PointMatches:
    """Matched pairs as arrays: source points p, target points q, target normals n."""

    p: np.ndarray
    q: np.ndarray
    n: np.ndarray

    def __len__(self):
        return len(self.p)

    def reversed(self):
        return PointMatches(self.p[::-1], self.q[::-1], self.n[::-1])


@dataclass
class ShrunkMatches:
    p_hat: np.ndarray
    q_hat: np.ndarray
    c_hat: np.ndarray
    n: np.ndarray
    center: np.ndarray
    scale: np.ndarray  # diagonal of S

    def __len__(self):
        return len(self.n)


@dataclass
class NormalEquation:
    A: np.ndarray
    b: np.ndarray
    pair_count: int
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    residual_rms: float = 0.0


@dataclass
class GatedSolution:
    motion: SmallMotion
    x_hat: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns
    kept: np.ndarray  # False where the direction was gated out
    residual_rms: float
    pair_count: int

    @property
    def normalized_eigenvalues(self):
        return self.eigenvalues / max(self.pair_count, 1)


# -- eigen solver ------------------------------------------------------------

def jacobi_eigh(a, tol=1e-12, max_sweeps=100):
    """Cyclic Jacobi eigen-decomposition of a small symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` sorted ascending, eigenvectors as
    columns.  Stops once the off-diagonal norm drops below ``tol`` times the
    Frobenius norm.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n), v
    upper = np.triu_indices(n, 1)
    for _ in range(max_sweeps):
        off = math.sqrt(2.0) * np.linalg.norm(a[upper])
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w)
    return w[order], v[:, order]


# -- matching ----------------------------------------------------------------

def match_points(source: DepthFrame, source_normals: NormalMap | None,
                 target: DepthFrame, target_normals: NormalMap,
                 delta: Pose, params: MatchParams) -> PointMatches:
    """Projective association of source pixels with target pixels.

    Source points are mapped by ``delta`` into the target camera frame and
    rounded to the nearest target pixel.  Pairs are rejected on invalid
    data, distance above ``max_distance`` or normal angle above
    ``max_normal_angle``.  Returned points live in the target camera frame.
    """
    intr = target.intrinsics
    valid = source.valid
    if source_normals is not None:
        valid = valid & source_normals.valid
    p = delta.apply(source.points()[valid])
    u, v, z, front = project(intr, p)
    ui = np.rint(np.where(front, u, -1)).astype(np.int64)
    vi = np.rint(np.where(front, v, -1)).astype(np.int64)
    inside = front & (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    ui, vi = np.where(inside, ui, 0), np.where(inside, vi, 0)
    ok = inside & target.valid[vi, ui] & target_normals.valid[vi, ui]
    q = target.points()[vi, ui]
    n = target_normals.normals[vi, ui]
    ok &= np.linalg.norm(p - q, axis=1) <= params.max_distance
    if source_normals is not None:
        ns = source_normals.normals[valid] @ delta.rotation.T
        cosang = np.einsum("ij,ij->i", ns, n)
        ok &= cosang >= math.cos(params.max_normal_angle)
    return PointMatches(p[ok], q[ok], n[ok])


# -- normal equations --------------------------------------------------------

def shrink(matches: PointMatches, min_extent=1e-3) -> ShrunkMatches:
    """Map the bounding box of all p and q onto the unit cube."""
    if len(matches) == 0:
        raise ValueError("cannot shrink an empty match set")
    pts = np.concatenate([matches.p, matches.q])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = 0.5 * (lo + hi)
    scale = np.maximum(hi - lo, min_extent)
    c = np.cross(matches.p, matches.n)
    c_hat = (c - np.cross(center, matches.n)) / scale
    return ShrunkMatches((matches.p - center) / scale, (matches.q - center) / scale,
                         c_hat, matches.n, center, scale)


def _fsum_outer(u, w=None):
    """Exactly rounded sums of u_i u_i^T and, optionally, u_i * w_i."""
    k = u.shape[1]
    a = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            a[i, j] = a[j, i] = math.fsum(u[:, i] * u[:, j])
    if w is None:
        return a
    return a, np.array([math.fsum(u[:, i] * w) for i in range(k)])


def assemble(shrunk: ShrunkMatches) -> NormalEquation:
    """Normal equations of the shrunk point-to-plane problem.

    Accumulation uses exactly rounded sums, so the result does not depend on
    match order.
    """
    u = np.hstack([shrunk.c_hat, shrunk.n])
    diff = (shrunk.p_hat - shrunk.q_hat) * shrunk.scale
    res = np.einsum("ij,ij->i", diff, shrunk.n)
    a, s = _fsum_outer(u, res)
    rms = math.sqrt(math.fsum(res * res) / len(res)) if len(res) else 0.0
    return NormalEquation(a, -s, len(res), shrunk.center, shrunk.scale, rms)


def assemble_direct(matches: PointMatches) -> NormalEquation:
    """Normal equations without the unit-cube change of variables."""
    c = np.cross(matches.p, matches.n)
    u = np.hstack([c, matches.n])
    res = np.einsum("ij,ij->i", matches.p - matches.q, matches.n)
    a, s = _fsum_outer(u, res)
    rms = math.sqrt(math.fsum(res * res) / len(res)) if len(res) else 0.0
    return NormalEquation(a, -s, len(res), residual_rms=rms)


def unshrink(x_hat, center, scale) -> SmallMotion:
    """Undo the change of variables: r = S^-1 r_hat, t = t_hat - r x m."""
    r = np.asarray(x_hat[:3]) / scale
    t = np.asarray(x_hat[3:]) - np.cross(r, center)
    return SmallMotion(r, t)


def solve_gated(eq: NormalEquation, theta=0.005) -> GatedSolution:
    """Solve the normal equations along eigen-directions with λ/N > θ."""
    if eq.pair_count < 1:
        raise ValueError("normal equation has no pairs")
    w, v = jacobi_eigh(eq.A)
    keep = w / eq.pair_count > theta
    coeff = np.zeros(6)
    coeff[keep] = (v[:, keep].T @ eq.b) / w[keep]
    x_hat = v @ coeff
    motion = unshrink(x_hat, eq.center, eq.scale) if keep.any() else SmallMotion.zero()
    return GatedSolution(motion, x_hat, w, v, keep, eq.residual_rms, eq.pair_count)


# -- driver ------------------------------------------------------------------

@dataclass
class IcpResult:
    pose: Pose  # source camera -> target camera
    solution: GatedSolution
    iterations: int
    match_count: int


def icp(source: DepthFrame, target: DepthFrame, target_normals: NormalMap,
        initial: Pose | None = None, params: MatchParams | None = None,
        source_normals: NormalMap | None = None) -> IcpResult:
    """Register ``source`` onto ``target``.

    Iterates match, shrink, assemble, gated solve and pose update until the
    shrunk motion norm falls below ``convergence_epsilon``.  Raises
    :class:`TrackingLost` when fewer than ``min_matches`` pairs survive.
    """
    params = params or MatchParams()
    delta = initial if initial is not None else Pose.identity()
    if source_normals is None:
        source_normals = compute_normals(source, voxel_size=params.min_extent)
    sol = None
    n_matches = 0
    it = 0
    for it in range(1, params.max_iterations + 1):
        matches = match_points(source, source_normals, target, target_normals, delta, params)
        n_matches = len(matches)
        if n_matches < params.min_matches:
            raise TrackingLost(f"only {n_matches} matches at iteration {it}")
        eq = assemble(shrink(matches, params.min_extent))
        sol = solve_gated(eq, params.eigen_threshold)
        delta = apply_motion(delta, sol.motion)
        if np.linalg.norm(sol.x_hat) < params.convergence_epsilon:
            break
    return IcpResult(delta, sol, it, n_matches)


def initial_transform_hook(previous: Pose, external: Pose | None = None) -> Pose:
    """Initial pose guess: the external relative motion applied to ``previous``.

    ``external`` is expressed in the previous camera frame.  No motion model
    is assumed when it is absent.
    """
    if external is None:
        return previous
    return compose(previous, external)
