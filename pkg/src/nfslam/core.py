"""Geometry primitives: rigid poses, the pinhole camera, RGB-D frames and point clouds."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

_SMALL_ANGLE = 1e-8


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def vee(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform x -> R x + t.

    Camera poses are stored camera-to-world, so ``pose.translation`` is the
    camera centre in world coordinates.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, t, q) -> "Pose":
        """Build from translation and quaternion ``(qx, qy, qz, qw)`` (TUM order)."""
        qx, qy, qz, qw = np.asarray(q, dtype=float) / np.linalg.norm(q)
        r = np.array([
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
            [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
            [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
        ])
        return cls(r, t)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def quaternion(self) -> np.ndarray:
        """Unit quaternion ``(qx, qy, qz, qw)`` with qw >= 0."""
        r = self.rotation
        tr = np.trace(r)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = np.array([(r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s,
                          (r[1, 0] - r[0, 1]) / s, 0.25 * s])
        else:
            i = int(np.argmax(np.diag(r)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = 2.0 * np.sqrt(max(1.0 + r[i, i] - r[j, j] - r[k, k], 0.0))
            q = np.empty(4)
            q[i] = 0.25 * s
            q[j] = (r[j, i] + r[i, j]) / s
            q[k] = (r[k, i] + r[i, k]) / s
            q[3] = (r[k, j] - r[j, k]) / s
        if q[3] < 0:
            q = -q
        return q / np.linalg.norm(q)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def transform(self, points) -> np.ndarray:
        """Apply to an (N, 3) or (3,) array of points."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def angle(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _so3_coeffs(theta):
    """Return (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)."""
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta ** 2, (theta - s) / theta ** 3


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    a, b, _ = _so3_coeffs(theta)
    return np.eye(3) + a * w + b * (w @ w)


def so3_log(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(c))
    if theta < 1e-6:
        return vee(r - r.T) / 2.0 * (1.0 + theta * theta / 6.0)
    if np.pi - theta < 1e-4:
        # sin(theta) ~ 0: recover the axis from the symmetric part
        b = (r + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(b)))
        axis = b[:, i] / np.sqrt(max(b[i, i], 1e-300))
        axis /= np.linalg.norm(axis)
        if np.dot(vee(r - r.T), axis) < 0:
            axis = -axis
        return axis * theta
    return vee(r - r.T) * theta / (2.0 * np.sin(theta))


def _v_matrix(omega):
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    _, b, c = _so3_coeffs(theta)
    return np.eye(3) + b * w + c * (w @ w)


def se3_exp(xi) -> Pose:
    """Exponential map of a twist ``(wx, wy, wz, vx, vy, vz)``."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError(f"non-finite twist: {xi}")
    omega, v = xi[:3], xi[3:]
    return Pose(so3_exp(omega), _v_matrix(omega) @ v)


def se3_log(pose: Pose) -> np.ndarray:
    omega = so3_log(pose.rotation)
    v = np.linalg.solve(_v_matrix(omega), pose.translation)
    return np.concatenate([omega, v])


def so3_left_jacobian(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    _, b, c = _so3_coeffs(theta)
    return np.eye(3) + b * w + c * (w @ w)


def se3_left_jacobian(xi) -> np.ndarray:
    """6x6 matrix J with exp(xi + d) ~= exp(J d) exp(xi) for small d.

    Rows and columns follow the (rotation, translation) twist ordering.
    """
    xi = np.asarray(xi, dtype=float).reshape(6)
    phi, rho = xi[:3], xi[3:]
    theta = float(np.linalg.norm(phi))
    P, R = skew(phi), skew(rho)
    if theta < 1e-4:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = -1.0 / 24.0 + t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta ** 3
        c2 = (theta * theta + 2.0 * c - 2.0) / (2.0 * theta ** 4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta ** 5)
    PR, RP = P @ R, R @ P
    PRP = PR @ P
    q = (0.5 * R + c1 * (PR + RP + PRP)
         + c2 * (P @ PR + RP @ P - 3.0 * PRP)
         + c3 * (PRP @ P + P @ PRP))
    jl = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = jl
    out[3:, :3] = q
    out[3:, 3:] = jl
    return out


def left_twist_gradient(points, grad_points) -> np.ndarray:
    """Gradient w.r.t. a left twist increment exp(d) applied to ``points``.

    ``points`` are the transformed points and ``grad_points`` dL/dpoints.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    g = np.asarray(grad_points, dtype=float).reshape(-1, 3)
    return np.concatenate([np.cross(p, g).sum(axis=0), g.sum(axis=0)])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "Intrinsics":
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                          int(round(self.width * factor)), int(round(self.height * factor)))

    def rays(self, u, v) -> np.ndarray:
        """Camera-frame ray directions with unit z component for pixels (u, v)."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def project(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return np.stack([self.fx * p[..., 0] / p[..., 2] + self.cx,
                         self.fy * p[..., 1] / p[..., 2] + self.cy], axis=-1)


@dataclass(frozen=True)
class RgbdFrame:
    timestamp: float
    color: np.ndarray
    depth: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self):
        color = np.asarray(self.color)
        depth = np.asarray(self.depth)
        if color.shape != depth.shape + (3,):
            raise ValueError(f"color {color.shape} and depth {depth.shape} disagree")
        if depth.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError("image size does not match intrinsics")
        if not np.all(np.isfinite(depth)) or depth.min(initial=0.0) < 0:
            raise ValueError("depth must be finite and non-negative")
        if color.size and (color.min() < 0 or color.max() > 1):
            raise ValueError("color values must lie in [0, 1]")

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray
    normals: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.points)

    def transformed(self, pose: Pose) -> "PointCloud":
        normals = None if self.normals is None else self.normals @ pose.rotation.T
        return PointCloud(pose.transform(self.points), self.colors, normals)

    def select(self, idx) -> "PointCloud":
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], self.colors[idx], normals)

    @property
    def intensity(self) -> np.ndarray:
        return self.colors.mean(axis=1)


def backproject(frame: RgbdFrame, stride: int = 1) -> PointCloud:
    """One point per valid-depth pixel on a ``stride`` grid, in the camera frame."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = frame.depth.shape
    v, u = np.mgrid[0:h:stride, 0:w:stride]
    d = frame.depth[v, u]
    keep = d > 0
    u, v, d = u[keep], v[keep], d[keep]
    pts = frame.intrinsics.rays(u, v) * d[:, None]
    return PointCloud(pts, np.asarray(frame.color[v, u], dtype=float))


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Average points and colors falling into the same voxel."""
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n = len(counts)
    pts = np.zeros((n, 3))
    cols = np.zeros((n, 3))
    np.add.at(pts, inverse, cloud.points)
    np.add.at(cols, inverse, cloud.colors)
    return PointCloud(pts / counts[:, None], cols / counts[:, None])


def estimate_normals(cloud: PointCloud, k: int = 20) -> PointCloud:
    """Per-point normals from the k-NN covariance, oriented toward the sensor origin.

    Neighbourhoods whose covariance has rank < 2 fall back to the viewing direction.
    """
    if k < 3:
        raise ValueError("k must be >= 3")
    n = len(cloud)
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    pts = cloud.points
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx]
    centred = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    degenerate = evals[:, 1] <= 1e-12 * np.maximum(evals[:, 2], 1e-300)
    view = -pts / np.maximum(np.linalg.norm(pts, axis=1, keepdims=True), 1e-300)
    normals = np.where(degenerate[:, None], view, normals)
    flip = np.einsum("ij,ij->i", normals, -pts) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return replace(cloud, normals=normals)
