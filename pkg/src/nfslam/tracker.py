"""Joint optimisation of camera poses and region fields.

Tracking refines the current pose against a frozen field; mapping updates
the field weights (and the poses of replayed keyframes) from pixels drawn
from the current frame and a few keyframes of the same region.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import Pose, RgbdFrame, left_twist_gradient, se3_exp, se3_left_jacobian, se3_log
from .field import EmbeddingBasis, FieldParams, field_backward, field_forward
from .render import (RenderConfig, composite, composite_backward, frame_loss, free_space_loss, opacity_loss,
                     ray_segments, sample_depths)


@dataclass(frozen=True)
class OptimConfig:
    pixels: int = 200
    tracking_iters: int = 10
    mapping_iters: int = 10
    init_mapping_iters: int = 200
    lr_params: float = 5e-3
    lr_pose: float = 5e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip: float = 1.0
    keyframe_window: int = 4
    keyframe_every: int = 25
    keyframe_cap: int = 40
    max_miss_fraction: float = 0.8
    density_step_scale: float = 10.0  # step multiplier for the density output unit
    prior_weight: float = 1e4  # pull of the odometry pose on tracking (per metre / radian)
    outlier_factor: float = 0.0  # tracking drops rays with depth error above this multiple of the median
    refine_keyframes: bool = False  # let mapping adjust stored keyframe poses

    def __post_init__(self):
        for name in ("pixels", "lr_params", "lr_pose", "clip", "density_step_scale", "outlier_factor",
                     "prior_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr_params >= 1 or self.lr_pose >= 1:
            raise ValueError("step sizes must be < 1")


class Adam:
    """Adaptive-moment updates applied in place to a list of arrays."""

    def __init__(self, shapes, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, dtype=np.float32,
                 scales=None):
        self.lr = lr
        # optional per-array step multipliers (scalars or broadcastable arrays)
        self.scales = [1.0] * len(shapes) if scales is None else list(scales)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros(s, dtype) for s in shapes]
        self.v = [np.zeros(s, dtype) for s in shapes]
        self.t = 0

    def step(self, arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for a, g, m, v, k in zip(arrays, grads, self.m, self.v, self.scales):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            a -= (k * self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class Keyframe:
    frame: RgbdFrame
    base_pose: Pose
    region_index: tuple
    fixed: bool = False
    twist: np.ndarray = field(default_factory=lambda: np.zeros(6))
    optimizer: Optional[Adam] = None

    @property
    def pose(self) -> Pose:
        if not np.any(self.twist):
            return self.base_pose
        return se3_exp(self.twist) @ self.base_pose


@dataclass
class RayBatch:
    frame_ids: np.ndarray  # (M,) index into the list of poses
    dirs: np.ndarray  # (M, 3) unit camera-frame directions
    ranges: np.ndarray  # (M,) measured distance along the ray, 0 = invalid
    colors: np.ndarray  # (M, 3)
    t: np.ndarray  # (M, S) sample distances
    far: np.ndarray  # (M,)

    def __len__(self):
        return len(self.frame_ids)


def region_far(region, cfg: RenderConfig) -> float:
    return cfg.far if cfg.far is not None else region.side * np.sqrt(3.0)


def select_pixels(rng, frame: RgbdFrame, pose: Pose, region, n: int):
    """Draw ``n`` valid-depth pixels; keep those whose surface point lies in ``region``.

    Returns ``(u, v, kept fraction)``.
    """
    valid = np.flatnonzero(frame.depth.ravel() > 0)
    if n == 0 or valid.size == 0:
        return np.zeros(0, int), np.zeros(0, int), 0.0
    pick = valid[rng.integers(0, valid.size, n)]
    v, u = np.divmod(pick, frame.depth.shape[1])
    pts = frame.intrinsics.rays(u, v) * frame.depth[v, u][:, None]
    inside = region.contains(pose.transform(pts))
    return u[inside], v[inside], float(inside.mean())


def build_batch(rng, frames: Sequence[RgbdFrame], poses: Sequence[Pose], pixel_sets, region,
                cfg: RenderConfig) -> RayBatch:
    """Rays for the chosen pixels of each frame, clipped to the region box and sampled."""
    ids, dirs, ranges, colors, origins, wdirs = [], [], [], [], [], []
    for k, (frame, pose, (u, v)) in enumerate(zip(frames, poses, pixel_sets)):
        if len(u) == 0:
            continue
        ray = frame.intrinsics.rays(u, v)
        norm = np.linalg.norm(ray, axis=1)
        d = ray / norm[:, None]
        ids.append(np.full(len(u), k))
        dirs.append(d)
        ranges.append(frame.depth[v, u] * norm)
        colors.append(frame.color[v, u])
        origins.append(np.broadcast_to(pose.translation, d.shape))
        wdirs.append(d @ pose.rotation.T)
    if not ids:
        return RayBatch(np.zeros(0, int), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
                        np.zeros((0, cfg.n_coarse + cfg.n_surface)), np.zeros(0))
    ids, dirs, ranges, colors = map(np.concatenate, (ids, dirs, ranges, colors))
    origins, wdirs = np.concatenate(origins), np.concatenate(wdirs)
    lo, hi = region.box
    far = region_far(region, cfg)
    t_min, t_max, hit = ray_segments(origins, wdirs, lo, hi, cfg, far)
    keep = hit & (ranges > 0)
    t = sample_depths(rng, t_min[keep], t_max[keep], ranges[keep], cfg)
    return RayBatch(ids[keep], dirs[keep], ranges[keep], colors[keep], t, t_max[keep])


@dataclass
class LossGrads:
    loss: float
    params: Optional[FieldParams]
    pose_left: Optional[np.ndarray]  # (n_frames, 6) gradient w.r.t. a left increment of each pose
    depth_error: np.ndarray


def batch_points(batch: RayBatch, poses: Sequence[Pose]) -> np.ndarray:
    rot = np.stack([p.rotation for p in poses])[batch.frame_ids]
    trans = np.stack([p.translation for p in poses])[batch.frame_ids]
    wdirs = np.einsum("mij,mj->mi", rot, batch.dirs)
    return trans[:, None, :] + batch.t[..., None] * wdirs[:, None, :]


def render_loss(params: FieldParams, basis: EmbeddingBasis, origin, half: float, batch: RayBatch,
                poses: Sequence[Pose], photometric_weight: float = 5.0,
                need_params: bool = True, need_pose: bool = True, free_space_weight: float = 0.0,
                free_space_margin: float = 0.05, outlier_factor: float = 0.0,
                opacity_weight: float = 0.0, shell_margin: Optional[float] = None) -> LossGrads:
    """Render the batch in one region and back-propagate the L1 frame loss.

    A positive ``free_space_weight`` adds the free-space optical depth penalty
    and a positive ``opacity_weight`` the missing-absorption penalty.
    A positive ``outlier_factor`` drops rays whose depth error exceeds that
    multiple of the batch median before the loss is formed.
    """
    pts = batch_points(batch, poses)
    m, s = batch.t.shape
    x = (pts - origin) / half
    rgb, sigma, cache = field_forward(params, basis, x.reshape(-1, 3), keep_cache=True)
    rgb = rgb.reshape(m, s, 3).astype(np.float64)
    sigma = sigma.reshape(m, s).astype(np.float64)
    res = composite(batch.t, sigma, rgb, batch.far)
    keep = inlier_rays(res.depth, batch.ranges, outlier_factor)
    d_color = np.zeros((m, 3))
    d_depth = np.zeros(m)
    loss, d_color[keep], d_depth[keep] = frame_loss(res.color[keep], res.depth[keep], batch.colors[keep],
                                                    batch.ranges[keep], photometric_weight)
    extra_grad = None
    if free_space_weight > 0:
        free, extra_grad = free_space_loss(batch.t, batch.far, sigma, batch.ranges, free_space_margin,
                                           free_space_weight, shell_margin)
        loss += free
    if opacity_weight > 0:
        opaque, opaque_grad = opacity_loss(batch.t, batch.far, res.weight_sum, batch.ranges, opacity_weight)
        loss += opaque
        extra_grad = opaque_grad if extra_grad is None else extra_grad + opaque_grad
    if not (need_params or need_pose):
        return LossGrads(loss, None, None, res.depth - batch.ranges)
    d_sigma, d_rgb = composite_backward(batch.t, batch.far, rgb, res, d_color, d_depth)
    if extra_grad is not None:
        d_sigma = d_sigma + extra_grad
    grads, d_x = field_backward(cache, basis, d_rgb.reshape(-1, 3), d_sigma.reshape(-1),
                                need_params=need_params, need_points=need_pose)
    pose_left = None
    if need_pose:
        d_p = d_x.astype(np.float64).reshape(m, s, 3) / half
        pose_left = np.zeros((len(poses), 6))
        for k in np.unique(batch.frame_ids):
            sel = batch.frame_ids == k
            pose_left[k] = left_twist_gradient(pts[sel].reshape(-1, 3), d_p[sel].reshape(-1, 3))
    return LossGrads(loss, grads, pose_left, res.depth - batch.ranges)


def inlier_rays(pred_depth, ranges, factor: float) -> np.ndarray:
    """Mask of rays kept by the median depth-error test (all rays when ``factor`` is 0)."""
    keep = np.ones(len(ranges), bool)
    if factor <= 0:
        return keep
    err = np.abs(pred_depth - ranges)
    valid = ranges > 0
    if valid.any():
        keep &= ~valid | (err <= factor * np.median(err[valid]))
    return keep


def twist_gradient(twist, left_grad) -> np.ndarray:
    """Chain a left-increment gradient through exp(twist) to the twist itself."""
    return se3_left_jacobian(twist).T @ left_grad


def clip_by_norm(arrays, max_norm: float):
    total = np.sqrt(sum(float((a.astype(np.float64) ** 2).sum()) for a in arrays))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for a in arrays:
            a *= scale
    return total


@dataclass
class TrackResult:
    pose: Pose
    loss: float
    confident: bool
    iterations: int = 0


def track_frame(rng, frame: RgbdFrame, init: Pose, region, basis: EmbeddingBasis, cfg: OptimConfig,
                render_cfg: RenderConfig = RenderConfig(), prior: Optional[Pose] = None) -> TrackResult:
    """Refine ``init`` by gradient descent on a left twist with the field frozen.

    With a ``prior`` pose and a positive ``cfg.prior_weight`` the objective also
    carries ``prior_weight / 2 * ||log(pose prior^-1)||^2``.
    """
    if cfg.tracking_iters == 0:
        return TrackResult(init, float("nan"), True, 0)
    twist = np.zeros(6)
    opt = Adam([(6,)], cfg.lr_pose, cfg.betas, cfg.adam_eps, dtype=np.float64)
    loss = float("nan")
    for it in range(cfg.tracking_iters):
        pose = se3_exp(twist) @ init
        u, v, kept = select_pixels(rng, frame, pose, region, cfg.pixels)
        if kept < 1.0 - cfg.max_miss_fraction:
            return TrackResult(init, loss, False, it)
        batch = build_batch(rng, [frame], [pose], [(u, v)], region, render_cfg)
        if len(batch) == 0:
            return TrackResult(init, loss, False, it)
        lg = render_loss(region.params, basis, region.origin, region.half, batch, [pose],
                         render_cfg.photometric_weight, need_params=False, need_pose=True,
                         outlier_factor=cfg.outlier_factor)
        loss = lg.loss
        grad = lg.pose_left[0]
        if prior is not None and cfg.prior_weight > 0:
            # small-deviation gradient of the quadratic prior on the left error twist
            grad = grad + cfg.prior_weight * se3_log(pose @ prior.inverse())
        opt.step([twist], [twist_gradient(twist, grad)])
    return TrackResult(se3_exp(twist) @ init, loss, True, cfg.tracking_iters)


def _param_optimizer(region, cfg: OptimConfig) -> Adam:
    if region.optimizer is None:
        arrays = region.params.arrays()
        scales = [1.0] * len(arrays)
        # the last layer is (W, b); its final output column is density
        w_scale = np.ones((1, arrays[-2].shape[1]), region.params.dtype)
        b_scale = np.ones(arrays[-1].shape, region.params.dtype)
        w_scale[0, -1] = b_scale[-1] = cfg.density_step_scale
        scales[-2], scales[-1] = w_scale, b_scale
        region.optimizer = Adam([a.shape for a in arrays], cfg.lr_params, cfg.betas,
                                cfg.adam_eps, dtype=region.params.dtype, scales=scales)
    region.optimizer.lr = cfg.lr_params
    return region.optimizer


def sparsity_grads(rng, params: FieldParams, basis: EmbeddingBasis, render_cfg: RenderConfig):
    """Parameter gradient of ``weight * mean density`` at uniform points of the region cube."""
    n = render_cfg.sparsity_points
    x = rng.uniform(-1.0, 1.0, (n, 3))
    _, _, cache = field_forward(params, basis, x, keep_cache=True)
    d_sigma = np.full(n, render_cfg.sparsity_weight / n)
    grads, _ = field_backward(cache, basis, np.zeros((n, 3)), d_sigma, need_params=True, need_points=False)
    return grads.arrays()


def map_step(rng, region, frame: Optional[RgbdFrame], pose: Optional[Pose], basis: EmbeddingBasis,
             cfg: OptimConfig, render_cfg: RenderConfig = RenderConfig(), update_poses: bool = True) -> float:
    """One mapping iteration on ``region``; returns the batch loss (nan if no rays)."""
    kfs = region.keyframes
    if len(kfs) > cfg.keyframe_window:
        chosen = [kfs[i] for i in sorted(rng.choice(len(kfs), cfg.keyframe_window, replace=False))]
    else:
        chosen = list(kfs)
    frames, poses, movable = [], [], []
    if frame is not None:
        frames.append(frame)
        poses.append(pose)
        movable.append(None)
    for kf in chosen:
        if frame is not None and kf.frame is frame:
            continue
        frames.append(kf.frame)
        poses.append(kf.pose)
        movable.append(kf if (update_poses and cfg.refine_keyframes and not kf.fixed) else None)
    if not frames:
        raise ValueError("map_step needs a current frame or at least one keyframe")
    per = [cfg.pixels // len(frames) + (1 if i < cfg.pixels % len(frames) else 0) for i in range(len(frames))]
    pixel_sets = [select_pixels(rng, f, p, region, n)[:2] for f, p, n in zip(frames, poses, per)]
    batch = build_batch(rng, frames, poses, pixel_sets, region, render_cfg)
    if len(batch) == 0:
        return float("nan")
    need_pose = any(k is not None for k in movable)
    lg = render_loss(region.params, basis, region.origin, region.half, batch, poses,
                     render_cfg.photometric_weight, need_params=True, need_pose=need_pose,
                     free_space_weight=render_cfg.free_space_weight,
                     free_space_margin=render_cfg.free_space_margin,
                     opacity_weight=render_cfg.opacity_weight, shell_margin=render_cfg.shell_margin)
    arrays = region.params.arrays()
    grads = lg.params.arrays()
    if render_cfg.sparsity_weight > 0 and render_cfg.sparsity_points > 0:
        for g, h in zip(grads, sparsity_grads(rng, region.params, basis, render_cfg)):
            g += h
    clip_by_norm(grads, cfg.clip)
    _param_optimizer(region, cfg).step(arrays, grads)
    region.params.bump()
    region.trained_steps += 1
    if need_pose:
        for k, kf in enumerate(movable):
            if kf is None or not np.any(batch.frame_ids == k):
                continue
            if kf.optimizer is None:
                kf.optimizer = Adam([(6,)], cfg.lr_pose, cfg.betas, cfg.adam_eps, dtype=np.float64)
            kf.optimizer.step([kf.twist], [twist_gradient(kf.twist, lg.pose_left[k])])
    return lg.loss


def maybe_add_keyframe(rng, frame: RgbdFrame, pose: Pose, region, cfg: OptimConfig, fixed: bool = False) -> bool:
    """First frame of a region always; then every ``keyframe_every``-th frame seen in it.

    At the cap a random keyframe other than the region's first is evicted.
    """
    region.frames_seen += 1
    if region.keyframes and region.frames_seen % cfg.keyframe_every != 0:
        return False
    if len(region.keyframes) >= cfg.keyframe_cap:
        victim = 1 + int(rng.integers(0, len(region.keyframes) - 1))
        del region.keyframes[victim]
    region.keyframes.append(Keyframe(frame, pose, region.grid_index, fixed=fixed))
    return True
