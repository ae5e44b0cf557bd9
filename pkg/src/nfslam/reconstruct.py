"""Querying the stitched global map and exporting surface point clouds.

Inside an overlap zone every containing region is evaluated in its own
normalised coordinates and the outputs are averaged with weights that decay
exponentially with the infinity-norm distance from each region's centre.
The exponential is shifted and rescaled so a region's weight is 1 at its
centre and exactly 0 on its faces; a region therefore fades in continuously
where its cube begins instead of switching on with a finite weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .atlas import Atlas, region_transform
from .core import PointCloud
from .field import field_forward

CHUNK = 1 << 15


@dataclass(frozen=True)
class BlendConfig:
    decay: float = 4.0
    sigma_min: float = 50.0  # density threshold (1/m) for surface extraction
    resolution: float = 0.02  # metres between lattice points
    bounds: Optional[Tuple[Tuple[float, float, float], Tuple[float, float, float]]] = None  # optional crop box
    observed_only: bool = True  # drop points in voxels no camera has seen

    def __post_init__(self):
        if self.decay <= 0:
            raise ValueError("decay must be positive")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.sigma_min < 0:
            raise ValueError("sigma_min must be non-negative")
        if self.bounds is not None:
            lo, hi = np.asarray(self.bounds[0], float), np.asarray(self.bounds[1], float)
            if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
                raise ValueError("bounds must be ((x0, y0, z0), (x1, y1, z1)) with x1 > x0 etc.")


def blend_weight(points, origin, half: float, decay: float) -> np.ndarray:
    """(exp(-decay d) - exp(-decay)) / (1 - exp(-decay)) with d the inf-norm distance in half-sides."""
    d = np.max(np.abs(np.atleast_2d(points) - np.asarray(origin)), axis=1) / half
    floor = np.exp(-decay)
    return np.maximum(np.exp(-decay * d) - floor, 0.0) / (1.0 - floor)


def _region_output(region, basis, points):
    rgb = np.empty((len(points), 3), np.float32)
    sigma = np.empty(len(points), np.float32)
    for s in range(0, len(points), CHUNK):
        x = region_transform(points[s:s + CHUNK], region.origin, region.side)
        rgb[s:s + CHUNK], sigma[s:s + CHUNK] = field_forward(region.params, basis, x)
    return rgb, sigma


def _blend(atlas: Atlas, points: np.ndarray, decay: float, regions=None):
    """(rgb, sigma, covered) for points; uncovered points get zeros."""
    n = len(points)
    acc_rgb = np.zeros((n, 3))
    acc_sigma = np.zeros(n)
    acc_w = np.zeros(n)
    plain_rgb = np.zeros((n, 3))
    plain_sigma = np.zeros(n)
    count = np.zeros(n, int)
    single_rgb = np.zeros((n, 3), np.float32)
    single_sigma = np.zeros(n, np.float32)
    keys = sorted(atlas.regions) if regions is None else regions
    for key in keys:
        region = atlas.regions[key]
        inside = region.contains(points) if n else np.zeros(0, bool)
        if not inside.any():
            continue
        idx = np.flatnonzero(inside)
        rgb, sigma = _region_output(region, atlas.basis, points[idx])
        w = blend_weight(points[idx], region.origin, region.half, decay)
        acc_rgb[idx] += w[:, None] * rgb
        acc_sigma[idx] += w * sigma
        acc_w[idx] += w
        plain_rgb[idx] += rgb
        plain_sigma[idx] += sigma
        count[idx] += 1
        single_rgb[idx] = rgb
        single_sigma[idx] = sigma
    covered = count > 0
    # on a line where the faces of every containing region meet, all weights vanish; use the plain mean
    flat = covered & (acc_w <= 0)
    acc_rgb[flat], acc_sigma[flat], acc_w[flat] = plain_rgb[flat], plain_sigma[flat], count[flat]
    safe = np.where(covered, acc_w, 1.0)
    out_rgb = acc_rgb / safe[:, None]
    out_sigma = acc_sigma / safe
    # a point seen by one region returns that region's output untouched
    one = count == 1
    out_rgb[one] = single_rgb[one]
    out_sigma[one] = single_sigma[one]
    out_rgb[~covered] = 0.0
    out_sigma[~covered] = 0.0
    return out_rgb, out_sigma, covered


def blended_query(points, atlas: Atlas, cfg: BlendConfig = BlendConfig()):
    """Blended (rgb, sigma) at world points; raises if any point lies outside every region."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if not atlas.regions:
        raise ValueError("atlas has no regions")
    rgb, sigma, covered = _blend(atlas, pts, cfg.decay)
    if not covered.all():
        raise ValueError(f"{int((~covered).sum())} point(s) outside every region (unmapped space)")
    return rgb, sigma


def _lattice(atlas: Atlas, lo, hi, res: float):
    """Axis coordinates of the global lattice anchor + k * res that fall in [lo, hi]."""
    anchor = atlas.anchor if atlas.anchor is not None else np.zeros(3)
    k0 = np.ceil((lo - anchor) / res - 1e-9).astype(int)
    k1 = np.floor((hi - anchor) / res + 1e-9).astype(int)
    return [anchor[a] + res * np.arange(k0[a], k1[a] + 1) for a in range(3)]


def _extent(atlas: Atlas, keys, cfg: BlendConfig):
    boxes = [atlas.regions[k].box for k in keys]
    lo = np.min([b[0] for b in boxes], axis=0)
    hi = np.max([b[1] for b in boxes], axis=0)
    if cfg.bounds is not None:
        lo = np.maximum(lo, cfg.bounds[0])
        hi = np.minimum(hi, cfg.bounds[1])
    return lo, hi


def _crossings(axes, rgb, sigma, covered, threshold):
    """Linearly interpolated threshold crossings between lattice neighbours on each axis."""
    pts_out, col_out = [], []
    grids = np.meshgrid(*axes, indexing="ij")
    coords = np.stack(grids, axis=-1)
    for axis in range(3):
        n = sigma.shape[axis]
        if n < 2:
            continue
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis], b[axis] = slice(0, n - 1), slice(1, n)
        a, b = tuple(a), tuple(b)
        sa, sb = sigma[a], sigma[b]
        hit = covered[a] & covered[b] & ((sa >= threshold) != (sb >= threshold))
        if not hit.any():
            continue
        sa, sb = sa[hit].astype(float), sb[hit].astype(float)
        f = ((threshold - sa) / (sb - sa))[:, None]
        pa, pb = coords[a][hit], coords[b][hit]
        ca, cb = rgb[a][hit], rgb[b][hit]
        pts_out.append(pa + f * (pb - pa))
        col_out.append(ca + f * (cb - ca))
    if not pts_out:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.concatenate(pts_out), np.clip(np.concatenate(col_out), 0.0, 1.0)


def _export(atlas: Atlas, keys, cfg: BlendConfig, blend_keys) -> PointCloud:
    lo, hi = _extent(atlas, keys, cfg)
    if np.any(hi < lo):
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    axes = _lattice(atlas, lo, hi, cfg.resolution)
    shape = tuple(len(x) for x in axes)
    if 0 in shape:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    sigma = np.zeros(shape, np.float64)
    rgb = np.zeros(shape + (3,), np.float64)
    covered = np.zeros(shape, bool)
    gy, gz = np.meshgrid(axes[1], axes[2], indexing="ij")
    for i, x in enumerate(axes[0]):  # one x-slab at a time bounds memory
        pts = np.column_stack([np.full(gy.size, x), gy.ravel(), gz.ravel()])
        c, s, cov = _blend(atlas, pts, cfg.decay, blend_keys)
        if blend_keys is not None:
            cov &= np.any([atlas.regions[k].contains(pts) for k in keys], axis=0)
        sigma[i] = s.reshape(shape[1:])
        rgb[i] = c.reshape(shape[1:] + (3,))
        covered[i] = cov.reshape(shape[1:])
    points, colors = _crossings(axes, rgb, sigma, covered, cfg.sigma_min)
    if cfg.observed_only and len(points):
        if blend_keys is None:
            seen = atlas.observed(points)
        else:
            seen = np.any([atlas.regions[k].observed(points) for k in keys], axis=0)
        points, colors = points[seen], colors[seen]
    return PointCloud(points, colors)


def export_cloud(atlas: Atlas, cfg: BlendConfig = BlendConfig(), path=None) -> PointCloud:
    """Surface points where the blended density crosses ``cfg.sigma_min`` on the global lattice."""
    if not atlas.regions:
        raise ValueError("atlas has no regions")
    cloud = _export(atlas, sorted(atlas.regions), cfg, None)
    if path is not None:
        write_ply(path, cloud)
    return cloud


def export_region_cloud(atlas: Atlas, key, cfg: BlendConfig = BlendConfig(), path=None) -> PointCloud:
    """Surface points of a single region's own field (no blending) on the same global lattice."""
    cloud = _export(atlas, [tuple(key)], cfg, [tuple(key)])
    if path is not None:
        write_ply(path, cloud)
    return cloud


_PLY_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                        ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def write_ply(path, cloud: PointCloud) -> int:
    """Binary little-endian PLY with float xyz and uchar rgb. Returns bytes written."""
    n = len(cloud)
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {n}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\n"
              "end_header\n").encode("ascii")
    data = np.empty(n, _PLY_VERTEX)
    if n:
        data["x"], data["y"], data["z"] = cloud.points.T.astype(np.float32)
        rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        data["red"], data["green"], data["blue"] = rgb.T
    blob = header + data.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def read_ply(path) -> PointCloud:
    """Reader for the files written by :func:`write_ply`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise ValueError("not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError("only binary little-endian PLY is supported")
    n = next(int(l.split()[2]) for l in header if l.startswith("element vertex"))
    body = raw[end + len(b"end_header\n"):]
    if len(body) != n * _PLY_VERTEX.itemsize:
        raise ValueError("PLY body size does not match the vertex count")
    data = np.frombuffer(body, _PLY_VERTEX)
    pts = np.column_stack([data["x"], data["y"], data["z"]]).astype(float)
    cols = np.column_stack([data["red"], data["green"], data["blue"]]).astype(float) / 255.0
    return PointCloud(pts, cols)
