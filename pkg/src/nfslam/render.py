"""Depth-guided ray sampling, volumetric compositing and the L1 frame loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

EPS = 1e-8


@dataclass(frozen=True)
class RenderConfig:
    n_coarse: int = 24
    n_surface: int = 8
    surface_band: float = 0.15
    near: float = 0.05
    far: Optional[float] = None  # None -> diagonal of the region cube
    photometric_weight: float = 5.0
    free_space_weight: float = 1.0  # optical depth penalty in front of the measured surface (mapping only)
    free_space_margin: float = 0.05
    shell_margin: Optional[float] = 0.05  # also penalise density this far behind the measured surface
    opacity_weight: float = 5.0  # pushes rays with a measured depth to full absorption (mapping only)
    sparsity_weight: float = 0.1  # mean density penalty at random points of the region (mapping only)
    sparsity_points: int = 256


@dataclass
class RenderResult:
    color: np.ndarray  # (M, 3)
    depth: np.ndarray  # (M,)
    weight_sum: np.ndarray  # (M,)
    weights: np.ndarray  # (M, S)
    transmittance: np.ndarray  # (M, S + 1)


def ray_box(origins, dirs, box_min, box_max):
    """Slab test. Returns (t_enter, t_exit); a miss has t_exit < t_enter."""
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    d = np.atleast_2d(np.asarray(dirs, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (np.asarray(box_min) - o) * inv
        t1 = (np.asarray(box_max) - o) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    return lo.max(axis=1), hi.min(axis=1)


def stratified(rng: np.random.Generator, lo, hi, n: int) -> np.ndarray:
    """n jittered samples per interval [lo, hi], one per equal-width bin; shape (M, n)."""
    lo = np.asarray(lo, dtype=float)[:, None]
    hi = np.asarray(hi, dtype=float)[:, None]
    u = (np.arange(n) + rng.random((lo.shape[0], n))) / n
    return lo + (hi - lo) * u


def ray_segments(origins, dirs, box_min, box_max, cfg: RenderConfig, far: float):
    """Clip rays to [near, far] and the region box. Returns (t_min, t_max, hit mask)."""
    t_in, t_out = ray_box(origins, dirs, box_min, box_max)
    t_min = np.maximum(t_in, cfg.near)
    t_max = np.minimum(t_out, far)
    return t_min, t_max, t_max > t_min


def sample_depths(rng, t_min, t_max, ranges, cfg: RenderConfig) -> np.ndarray:
    """Coarse + surface-band samples for rays with a valid measured range; sorted, (M, S)."""
    coarse = stratified(rng, t_min, t_max, cfg.n_coarse)
    if cfg.n_surface == 0:
        return coarse
    lo = np.clip(ranges - cfg.surface_band, t_min, t_max)
    hi = np.clip(ranges + cfg.surface_band, t_min, t_max)
    band = stratified(rng, lo, hi, cfg.n_surface)
    return np.sort(np.concatenate([coarse, band], axis=1), axis=1)


def sample_ray(rng, pixel, depth, pose, intrinsics, cfg: RenderConfig, box_min, box_max,
               far: Optional[float] = None) -> np.ndarray:
    """Sample depths (metres along the unit ray) for one pixel.

    ``depth`` is the sensor z-depth (0 = invalid). An empty array means the ray
    misses the box.
    """
    u, v = pixel
    ray_c = intrinsics.rays(np.array([u]), np.array([v]))[0]
    norm = np.linalg.norm(ray_c)
    d_world = pose.rotation @ (ray_c / norm)
    far = cfg.far if far is None else far
    if far is None:
        far = float(np.linalg.norm(np.asarray(box_max) - np.asarray(box_min)))
    t_min, t_max, hit = ray_segments(pose.translation[None], d_world[None], box_min, box_max, cfg, far)
    if not hit[0]:
        return np.empty(0)
    if depth > 0:
        return sample_depths(rng, t_min, t_max, np.array([depth * norm]), cfg)[0]
    return stratified(rng, t_min, t_max, cfg.n_coarse)[0]


def composite(t, sigma, rgb, far) -> RenderResult:
    """Alpha-composite samples along rays.

    ``t`` and ``sigma`` are (M, S), ``rgb`` is (M, S, 3) and ``far`` (M,) closes
    the last interval.
    """
    t = np.atleast_2d(t)
    sigma = np.atleast_2d(sigma)
    rgb = np.asarray(rgb).reshape(t.shape + (3,))
    far = np.broadcast_to(np.asarray(far, dtype=t.dtype), t.shape[:1])
    delta = np.diff(np.concatenate([t, far[:, None]], axis=1), axis=1)
    tau = sigma * delta
    cum = np.concatenate([np.zeros_like(tau[:, :1]), np.cumsum(tau, axis=1)], axis=1)
    trans = np.exp(-cum)  # trans[:, i] = prod_{j<i} (1 - alpha_j)
    weights = trans[:, :-1] * -np.expm1(-tau)
    wsum = weights.sum(axis=1)
    color = np.einsum("ms,msc->mc", weights, rgb)
    depth = (weights * t).sum(axis=1) / np.maximum(wsum, EPS)
    return RenderResult(color, depth, wsum, weights, trans)


def composite_backward(t, far, rgb, res: RenderResult, d_color, d_depth):
    """Gradients of a scalar loss w.r.t. per-sample density and colour."""
    t = np.atleast_2d(t)
    far = np.broadcast_to(np.asarray(far, dtype=t.dtype), t.shape[:1])
    delta = np.diff(np.concatenate([t, far[:, None]], axis=1), axis=1)
    w = res.weights
    t_next = res.transmittance[:, 1:]  # T_{k+1}

    wc = w[:, :, None] * rgb
    dC_ds = t_next[:, :, None] * rgb - _suffix(wc)
    dW_ds = t_next - _suffix(w)
    wt = w * t
    dN_ds = t_next * t - _suffix(wt)
    wsum = res.weight_sum
    denom = np.maximum(wsum, EPS)
    num = wt.sum(axis=1)
    big = wsum > EPS
    dD_ds = np.where(big[:, None],
                     dN_ds / denom[:, None] - (num / denom ** 2)[:, None] * dW_ds,
                     dN_ds / EPS)
    d_tau = np.einsum("mc,msc->ms", d_color, dC_ds) + np.asarray(d_depth)[:, None] * dD_ds
    d_sigma = d_tau * delta
    d_rgb = w[:, :, None] * np.asarray(d_color)[:, None, :]
    return d_sigma, d_rgb


def free_space_loss(t, far, sigma, ranges, margin: float, weight: float, behind: Optional[float] = None):
    """weight * mean over rays of the optical depth sum(sigma_i * delta_i) over samples with t_i < d - margin.

    With ``behind`` set, samples with t_i > d + behind are penalised as well,
    which confines density to a shell around the measured surface.
    Returns ``(loss, d_sigma)``. Rays without a valid range contribute nothing.
    """
    t = np.atleast_2d(t)
    far = np.broadcast_to(np.asarray(far, dtype=t.dtype), t.shape[:1])
    delta = np.diff(np.concatenate([t, far[:, None]], axis=1), axis=1)
    ranges = np.asarray(ranges)
    mask = t < (ranges - margin)[:, None]
    if behind is not None:
        mask |= t > (ranges + behind)[:, None]
    mask &= (ranges > 0)[:, None]
    scale = weight / max(len(t), 1)
    d_sigma = np.where(mask, scale * delta, 0.0)
    return float((d_sigma * sigma).sum()), d_sigma


def opacity_loss(t, far, weight_sum, ranges, weight: float):
    """weight * mean over rays with a valid range of (1 - accumulated weight).

    Returns ``(loss, d_sigma)`` using dW/d(sigma_k) = delta_k * (1 - W).
    """
    t = np.atleast_2d(t)
    far = np.broadcast_to(np.asarray(far, dtype=t.dtype), t.shape[:1])
    delta = np.diff(np.concatenate([t, far[:, None]], axis=1), axis=1)
    valid = np.asarray(ranges) > 0
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(t)
    miss = np.where(valid, 1.0 - np.asarray(weight_sum), 0.0)
    d_sigma = -(weight / n) * (delta * miss[:, None]) * valid[:, None]
    return float(weight * miss.sum() / n), d_sigma


def _suffix(x):
    """sum_{i > k} x_i along axis 1."""
    return np.cumsum(x[:, ::-1], axis=1)[:, ::-1] - x


def frame_loss(pred_color, pred_depth, true_color, true_depth, photometric_weight: float = 5.0):
    """L = mean |d_hat - d| over valid depths + w * mean_pixels ||c_hat - c||_1.

    Returns ``(loss, d_color, d_depth)``. Pixels with true depth 0 only enter
    the photometric term.
    """
    pred_color = np.asarray(pred_color)
    n = pred_color.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    valid = np.asarray(true_depth) > 0
    n_valid = int(valid.sum())
    dd = np.where(valid, np.asarray(pred_depth) - true_depth, 0.0)
    dc = pred_color - true_color
    depth_term = np.abs(dd).sum() / n_valid if n_valid else 0.0
    color_term = np.abs(dc).sum() / n
    loss = float(depth_term + photometric_weight * color_term)
    d_depth = np.sign(dd) / n_valid if n_valid else np.zeros_like(dd)
    d_color = photometric_weight * np.sign(dc) / n
    return loss, d_color, d_depth
