"""Frame-to-frame visual odometry by coloured point cloud registration.

The objective mixes a point-to-plane term with a photometric term built from
per-point intensity gradients on the target's tangent planes, so that motion
sliding along a surface is still observable through texture:

    E(T) = (1 - w) * sum ((T p - q) . n_q)^2
         + w * sum (I_q + g_q . (T p - q) - I_p)^2

and is minimised by damped Gauss-Newton on a left twist increment,
coarse to fine over a voxel pyramid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .core import Pose, PointCloud, RgbdFrame, backproject, estimate_normals, se3_exp, voxel_downsample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationConfig:
    voxel_sizes: Tuple[float, ...] = (0.04, 0.02, 0.01)
    iterations: Tuple[int, ...] = (50, 30, 14)
    color_weight: float = 0.032
    corr_factor: float = 3.0  # max correspondence distance per level = factor * voxel size
    max_corr_dist: Optional[Tuple[float, ...]] = None
    neighbors: int = 16
    stride: int = 2
    min_correspondences: int = 10
    max_halvings: int = 8

    def __post_init__(self):
        if len(self.voxel_sizes) != len(self.iterations):
            raise ValueError("voxel_sizes and iterations must have the same length")
        if any(b >= a for a, b in zip(self.voxel_sizes, self.voxel_sizes[1:])):
            raise ValueError("voxel sizes must be strictly decreasing")
        if not 0.0 <= self.color_weight <= 1.0:
            raise ValueError("color_weight must lie in [0, 1]")
        if self.max_corr_dist is not None and len(self.max_corr_dist) != len(self.voxel_sizes):
            raise ValueError("max_corr_dist needs one entry per level")

    def corr_dist(self, level: int) -> float:
        if self.max_corr_dist is not None:
            return self.max_corr_dist[level]
        return self.corr_factor * self.voxel_sizes[level]


def precompute_color_gradients(cloud: PointCloud, k: int = 16, neighbors=None) -> np.ndarray:
    """Tangent-plane intensity gradient per point, fitted by least squares over k neighbours.

    Points with fewer than 4 usable neighbours (or a singular fit) get a zero gradient.
    """
    if cloud.normals is None:
        raise ValueError("cloud needs normals")
    pts, nrm = cloud.points, cloud.normals
    n = len(pts)
    if n == 0:
        return np.zeros((0, 3))
    k = min(k, n)
    if neighbors is None:
        _, neighbors = cKDTree(pts).query(pts, k=k)
        neighbors = neighbors.reshape(n, -1)
    inten = cloud.intensity
    # orthonormal tangent basis (t1, t2) per point
    helper = np.where(np.abs(nrm[:, [0]]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    t1 = np.cross(nrm, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(nrm, t1)
    off = pts[neighbors] - pts[:, None, :]
    a1 = np.einsum("nkc,nc->nk", off, t1)
    a2 = np.einsum("nkc,nc->nk", off, t2)
    di = inten[neighbors] - inten[:, None]
    usable = (a1 * a1 + a2 * a2) > 1e-18
    a1, a2, di = a1 * usable, a2 * usable, di * usable
    h11, h12, h22 = (a1 * a1).sum(1), (a1 * a2).sum(1), (a2 * a2).sum(1)
    b1, b2 = (a1 * di).sum(1), (a2 * di).sum(1)
    det = h11 * h22 - h12 * h12
    scale = (h11 + h22) ** 2
    ok = (usable.sum(1) >= 4) & (det > 1e-10 * np.maximum(scale, 1e-300))
    safe = np.where(ok, det, 1.0)
    g1 = (h22 * b1 - h12 * b2) / safe
    g2 = (h11 * b2 - h12 * b1) / safe
    grad = g1[:, None] * t1 + g2[:, None] * t2
    grad[~ok] = 0.0
    return grad


@dataclass
class TargetLevel:
    cloud: PointCloud
    gradients: np.ndarray
    intensity: np.ndarray
    tree: cKDTree


def prepare_level(cloud: PointCloud, k: int) -> Optional[TargetLevel]:
    if len(cloud) < max(k, 4):
        return None
    _, nb = cKDTree(cloud.points).query(cloud.points, k=k)
    with_normals = estimate_normals(cloud, k)
    grads = precompute_color_gradients(with_normals, k, nb)
    return TargetLevel(with_normals, grads, with_normals.intensity, cKDTree(with_normals.points))


def build_pyramid(cloud: PointCloud, cfg: RegistrationConfig):
    """Downsampled clouds per level; target levels also carry normals and gradients."""
    return [voxel_downsample(cloud, v) for v in cfg.voxel_sizes]


@dataclass
class RegistrationResult:
    pose: Pose
    fitness: float
    energies: List[List[float]] = field(default_factory=list)
    converged: bool = True


def _energy(w_geo, w_col, r_g, r_c):
    return float(w_geo * r_g @ r_g + w_col * r_c @ r_c)


def _residuals(s, q, n, g, i_q, i_p):
    diff = s - q
    r_g = np.einsum("ij,ij->i", diff, n)
    r_c = i_q + np.einsum("ij,ij->i", diff, g) - i_p
    return r_g, r_c


def register_colored(source: PointCloud, target, cfg: RegistrationConfig = RegistrationConfig(),
                     init: Pose = Pose()) -> RegistrationResult:
    """Align ``source`` onto ``target`` and return the source-to-target pose.

    ``target`` is either a list of :class:`TargetLevel` (one per pyramid level)
    or a raw :class:`PointCloud`, which is prepared on the fly. Fewer than
    ``cfg.min_correspondences`` matches at the coarsest level returns ``init``
    with fitness 0.
    """
    if len(source) == 0:
        raise ValueError("empty source cloud")
    if isinstance(target, PointCloud):
        target = [prepare_level(c, cfg.neighbors) for c in build_pyramid(target, cfg)]
    w_col = cfg.color_weight
    w_geo = 1.0 - w_col
    pose = init
    energies = []
    fitness = 0.0
    src_levels = build_pyramid(source, cfg)
    for level, (src, tgt, iters) in enumerate(zip(src_levels, target, cfg.iterations)):
        level_energy = []
        energies.append(level_energy)
        max_d = cfg.corr_dist(level)
        if tgt is None or len(src) == 0:
            if level == 0:
                return RegistrationResult(init, 0.0, energies, False)
            continue
        i_p_all = src.intensity
        for _ in range(iters):
            s_all = pose.transform(src.points)
            dist, idx = tgt.tree.query(s_all, k=1, distance_upper_bound=max_d)
            m = np.isfinite(dist)
            if m.sum() < cfg.min_correspondences:
                if level == 0 and not level_energy:
                    return RegistrationResult(init, 0.0, energies, False)
                break
            p = src.points[m]
            s = s_all[m]
            j = idx[m]
            q, n, g = tgt.cloud.points[j], tgt.cloud.normals[j], tgt.gradients[j]
            i_q, i_p = tgt.intensity[j], i_p_all[m]
            r_g, r_c = _residuals(s, q, n, g, i_q, i_p)
            e0 = _energy(w_geo, w_col, r_g, r_c)
            level_energy.append(e0)
            jg = np.concatenate([np.cross(s, n), n], axis=1)
            jc = np.concatenate([np.cross(s, g), g], axis=1)
            H = w_geo * jg.T @ jg + w_col * jc.T @ jc
            b = w_geo * jg.T @ r_g + w_col * jc.T @ r_c
            delta = -np.linalg.lstsq(H, b, rcond=1e-12)[0]
            step = 1.0
            accepted = False
            for _ in range(cfg.max_halvings + 1):
                cand = se3_exp(step * delta) @ pose
                s_new = cand.transform(p)
                e1 = _energy(w_geo, w_col, *_residuals(s_new, q, n, g, i_q, i_p))
                if e1 <= e0:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            pose = cand
            level_energy.append(e1)
            if np.linalg.norm(step * delta) < 1e-10:
                break
    finest = src_levels[-1]
    tgt = next((t for t in reversed(target) if t is not None), None)
    if tgt is not None and len(finest):
        dist, _ = tgt.tree.query(pose.transform(finest.points), k=1,
                                 distance_upper_bound=cfg.corr_dist(len(target) - 1))
        fitness = float(np.isfinite(dist).mean())
    return RegistrationResult(pose, fitness, energies)


@dataclass
class OdometryState:
    levels: Optional[list] = None
    last_relative: Pose = field(default_factory=Pose)
    absolute: Pose = field(default_factory=Pose)
    frames: int = 0
    last_fitness: float = 1.0
    low_confidence: bool = False


def frame_cloud(frame: RgbdFrame, cfg: RegistrationConfig) -> PointCloud:
    return backproject(frame, cfg.stride)


def step_odometry(frame: RgbdFrame, state: OdometryState, cfg: RegistrationConfig = RegistrationConfig()) -> Pose:
    """Advance the odometry by one frame and return the new absolute pose.

    The first frame seeds the state and returns the identity. A failed
    registration keeps the constant-velocity guess and sets
    ``state.low_confidence``.
    """
    cloud = frame_cloud(frame, cfg)
    levels = [prepare_level(c, cfg.neighbors) for c in build_pyramid(cloud, cfg)]
    if state.levels is None:
        state.levels = levels
        state.frames = 1
        state.absolute = Pose()
        state.last_relative = Pose()
        state.low_confidence = False
        return state.absolute
    if len(cloud) == 0:
        rel, fitness = state.last_relative, 0.0
    else:
        result = register_colored(cloud, state.levels, cfg, state.last_relative)
        rel, fitness = result.pose, result.fitness
    state.low_confidence = fitness == 0.0
    if state.low_confidence:
        log.warning("odometry registration failed at t=%.3f; keeping constant-velocity guess", frame.timestamp)
    state.last_fitness = fitness
    state.last_relative = rel
    state.absolute = state.absolute @ rel
    state.levels = levels
    state.frames += 1
    return state.absolute
