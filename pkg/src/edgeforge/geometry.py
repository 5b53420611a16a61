"""Pinhole cameras, epipolar lines and multi-view triangulation.

Points are plain numpy arrays: ``(2,)`` for image points ``(u, v)`` in
pixels and ``(3,)`` for world points.  Lines are normalized ``(a, b, c)``
triples with ``a**2 + b**2 == 1`` so that ``a*u + b*v + c`` is a signed
pixel distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class GeometryError(ValueError):
    """Base class for geometric failures."""


class NonPositiveDepth(GeometryError):
    pass


class DegenerateBaseline(GeometryError):
    pass


class InsufficientObservations(GeometryError):
    pass


class IllConditioned(GeometryError):
    pass


class CheiralityViolation(GeometryError):
    pass


@dataclass(frozen=True, eq=False)
class CameraView:
    """Undistorted pinhole camera.

    ``R`` maps world to camera coordinates and ``C`` is the camera center,
    so a world point ``X`` has camera coordinates ``R @ (X - C)``.
    """

    id: str
    K: np.ndarray
    R: np.ndarray
    C: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float).reshape(3, 3)
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        C = np.asarray(self.C, dtype=float).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError(f"camera {self.id}: R is not a proper rotation")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError(f"camera {self.id}: focal length must be positive")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"camera {self.id}: image size must be positive")
        for name, val in (("K", K), ("R", R), ("C", C)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def focal(self) -> float:
        return 0.5 * (self.K[0, 0] + self.K[1, 1])

    @cached_property
    def P(self) -> np.ndarray:
        """3x4 projection matrix ``K [R | -R C]``."""
        P = self.K @ np.hstack([self.R, (-self.R @ self.C)[:, None]])
        P.setflags(write=False)
        return P

    def depth(self, p) -> float:
        return float(self.R[2] @ (np.asarray(p, dtype=float) - self.C))

    def contains(self, uv, margin: float = 0.0) -> bool:
        u, v = uv
        return margin <= u < self.width - margin and margin <= v < self.height - margin


def project(cam: CameraView, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    q = cam.R @ (p - cam.C)
    if q[2] <= 0:
        raise NonPositiveDepth(f"point has depth {q[2]:g} in camera {cam.id}")
    h = cam.K @ q
    return h[:2] / h[2]


def project_many(cam: CameraView, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project an ``(n, 3)`` array; returns ``(uv, depth)`` without raising."""
    q = (np.asarray(pts, dtype=float) - cam.C) @ cam.R.T
    h = q @ cam.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = h[:, :2] / h[:, 2:3]
    return uv, q[:, 2]


def backproject_ray(cam: CameraView, uv) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(origin, unit direction)`` of the viewing ray through ``uv``."""
    d = cam.R.T @ np.linalg.solve(cam.K, np.array([uv[0], uv[1], 1.0]))
    return cam.C.copy(), d / np.linalg.norm(d)


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]], dtype=float)


def fundamental_matrix(cam_a: CameraView, cam_b: CameraView) -> np.ndarray:
    """F with ``x_b^T F x_a = 0``, built from the two projection matrices."""
    if np.linalg.norm(cam_a.C - cam_b.C) <= 1e-12:
        raise DegenerateBaseline(f"cameras {cam_a.id} and {cam_b.id} share a center")
    e_b = cam_b.P @ np.append(cam_a.C, 1.0)
    F = _skew(e_b) @ cam_b.P @ np.linalg.pinv(cam_a.P)
    return F / np.linalg.norm(F)


def normalize_line(l) -> np.ndarray:
    l = np.asarray(l, dtype=float)
    n = np.hypot(l[0], l[1])
    if n < 1e-300:
        raise DegenerateBaseline("point coincides with the epipole")
    return l / n


def epipolar_line(cam_a: CameraView, cam_b: CameraView, p_a, F: np.ndarray | None = None) -> np.ndarray:
    if F is None:
        F = fundamental_matrix(cam_a, cam_b)
    return normalize_line(F @ np.array([p_a[0], p_a[1], 1.0]))


def line_distance(line, p) -> float:
    return abs(line[0] * p[0] + line[1] * p[1] + line[2])


def sphere_projection_radius(cam: CameraView, center, sphere_r: float) -> float:
    """Approximate image radius (px) of a sphere of radius ``sphere_r``."""
    if sphere_r <= 0:
        raise ValueError("sphere radius must be positive")
    z = cam.depth(center)
    if z <= 0:
        raise NonPositiveDepth(f"sphere center behind camera {cam.id}")
    return cam.focal * sphere_r / z


@dataclass
class TriangulationResult:
    point: np.ndarray
    max_reproj_error: float
    per_view_errors: list[float] = field(default_factory=list)


def _residuals(Ps, uvs, X):
    h = Ps[:, :, :3] @ X + Ps[:, :, 3]
    return h[:, :2] / h[:, 2:3] - uvs, h


def _refine(Ps, uvs, X, max_iter=20, step_tol=1e-10):
    """Levenberg-Marquardt on summed squared reprojection error."""
    r, h = _residuals(Ps, uvs, X)
    cost = float(np.sum(r * r))
    lam = 1e-3
    for _ in range(max_iter):
        w = h[:, 2]
        # d(u,v)/dX for every view: (row_i * w - h_i * row_3) / w^2
        J = (Ps[:, :2, :3] * w[:, None, None] - h[:, :2, None] * Ps[:, None, 2, :3]) / (w * w)[:, None, None]
        J = J.reshape(-1, 3)
        g = J.T @ r.reshape(-1)
        H = J.T @ J
        improved = False
        for _ in range(10):
            A = H + lam * np.diag(np.diag(H) + 1e-12)
            try:
                dx = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            Xn = X + dx
            rn, hn = _residuals(Ps, uvs, Xn)
            cn = float(np.sum(rn * rn))
            if np.isfinite(cn) and cn <= cost:
                X, r, h, cost = Xn, rn, hn, cn
                lam = max(lam * 0.1, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved or np.linalg.norm(dx) < step_tol:
            break
    return X, r, h


def triangulate(obs) -> TriangulationResult:
    """Triangulate from ``[(CameraView, uv), ...]``: DLT then LM refinement."""
    obs = list(obs)
    if len(obs) < 2:
        raise InsufficientObservations(f"need >= 2 observations, got {len(obs)}")
    ids = [cam.id for cam, _ in obs]
    if len(set(ids)) != len(ids):
        raise IllConditioned("duplicate views in observation set")
    Ps = np.stack([cam.P for cam, _ in obs])
    uvs = np.array([[float(uv[0]), float(uv[1])] for _, uv in obs])
    return _triangulate_arrays(Ps, uvs, [cam for cam, _ in obs])


def _triangulate_arrays(Ps, uvs, cams) -> TriangulationResult:
    A = np.empty((2 * len(Ps), 4))
    A[0::2] = uvs[:, 0:1] * Ps[:, 2] - Ps[:, 0]
    A[1::2] = uvs[:, 1:2] * Ps[:, 2] - Ps[:, 1]
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, s, Vt = np.linalg.svd(A)
    if s[2] <= 1e-10 * s[0]:
        raise IllConditioned("DLT system is rank deficient")
    Xh = Vt[-1]
    if abs(Xh[3]) <= 1e-12 * np.linalg.norm(Xh):
        raise IllConditioned("triangulated point at infinity")
    X = Xh[:3] / Xh[3]
    X, r, h = _refine(Ps, uvs, X)
    if not np.all(np.isfinite(X)):
        raise IllConditioned("refinement diverged")
    for cam in cams:
        if cam.depth(X) <= 0:
            raise CheiralityViolation(f"triangulated point behind camera {cam.id}")
    errs = np.hypot(r[:, 0], r[:, 1])
    return TriangulationResult(X, float(errs.max()), [float(e) for e in errs])


def reprojection_cost(obs, X) -> float:
    """Summed squared reprojection error of ``X`` (no depth checks)."""
    Ps = np.stack([cam.P for cam, _ in obs])
    uvs = np.array([[uv[0], uv[1]] for _, uv in obs], dtype=float)
    r, _ = _residuals(Ps, uvs, np.asarray(X, dtype=float))
    return float(np.sum(r * r))


class CameraRig:
    """Cameras keyed by view id, with cached fundamental matrices."""

    def __init__(self, cameras):
        self.cameras = {cam.id: cam for cam in cameras}
        self.order = {cam.id: i for i, cam in enumerate(cameras)}
        self._F: dict[tuple[str, str], np.ndarray] = {}

    def __getitem__(self, view_id) -> CameraView:
        return self.cameras[view_id]

    def __iter__(self):
        return iter(self.cameras.values())

    def __len__(self):
        return len(self.cameras)

    def F(self, a: str, b: str) -> np.ndarray:
        key = (a, b)
        F = self._F.get(key)
        if F is None:
            F = fundamental_matrix(self.cameras[a], self.cameras[b])
            self._F[key] = F
        return F

    def epipolar_line(self, a: str, b: str, p_a) -> np.ndarray:
        return normalize_line(self.F(a, b) @ np.array([p_a[0], p_a[1], 1.0]))

    def triangulate(self, obs: dict) -> TriangulationResult:
        """``obs`` maps view id -> uv."""
        views = list(obs)
        Ps = np.stack([self.cameras[v].P for v in views])
        uvs = np.array([[obs[v][0], obs[v][1]] for v in views], dtype=float)
        if len(views) < 2:
            raise InsufficientObservations(f"need >= 2 observations, got {len(views)}")
        return _triangulate_arrays(Ps, uvs, [self.cameras[v] for v in views])

    def sort_views(self, views):
        return sorted(views, key=self.order.__getitem__)
