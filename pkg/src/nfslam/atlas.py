"""Global map as a grid of overlapping cubic regions, one field per region.

Regions are axis-aligned cubes of side ``L`` whose centres sit on a grid of
pitch ``(1 - overlap) * L`` anchored at the first camera position. The
working region is the instantiated region whose centre is nearest to the
camera; new regions are spawned as soon as the camera enters their cube and
start from a copy of the working region's weights.

Each region also keeps a coarse bit grid of the voxels that some camera has
seen, either as free space or as surface. It is stored with the weights and
lets surface extraction skip space that no frame ever constrained.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import Pose
from .field import EmbeddingBasis, FieldFormatError, FieldParams, blob_size, deserialize, serialize

REGION_VOLUME = 30.0
DEFAULT_SIDE = REGION_VOLUME ** (1.0 / 3.0)
DEFAULT_OVERLAP = 0.2

GridIndex = Tuple[int, int, int]

MAP_MAGIC = b"NFMP"
MAP_VERSION = 1
_MAP_HEADER = struct.Struct("<4sHHI5d")  # magic, version, mask resolution, n_regions, side, overlap, anchor xyz
_REGION_ENTRY = struct.Struct("<3i3dQ")  # grid index, origin, field blob length

OBSERVED_RES = 64  # voxels per region edge in the observation mask
OBSERVED_MARGIN = 0.1  # metres behind the measured depth still counted as seen


@dataclass
class Region:
    grid_index: GridIndex
    origin: np.ndarray
    side: float
    params: FieldParams
    keyframes: list = field(default_factory=list)
    trained_steps: int = 0
    frames_seen: int = 0
    optimizer: object = None
    seen: Optional[np.ndarray] = None  # (R, R, R) bool observation mask

    def __post_init__(self):
        if self.seen is None:
            self.seen = np.zeros((OBSERVED_RES,) * 3, bool)

    @property
    def half(self) -> float:
        return self.side / 2.0

    @property
    def box(self):
        return self.origin - self.half, self.origin + self.half

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all(np.abs(p - self.origin) <= self.half, axis=1)

    def voxel_centres(self) -> np.ndarray:
        res = self.seen.shape[0]
        c = (np.arange(res) + 0.5) * (self.side / res) - self.half
        g = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)
        return g + self.origin

    def observed(self, points) -> np.ndarray:
        """True where a point lies in this region and in a voxel marked as seen."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        res = self.seen.shape[0]
        idx = np.floor((p - self.origin + self.half) / self.side * res).astype(int)
        idx = np.clip(idx, 0, res - 1)
        return self.contains(p) & self.seen[idx[:, 0], idx[:, 1], idx[:, 2]]

    def mark_observed(self, depth: np.ndarray, intrinsics, pose: Pose, margin: float = OBSERVED_MARGIN):
        """Mark voxels whose centre projects onto a valid pixel no deeper than depth + margin."""
        pc = pose.inverse().transform(self.voxel_centres())
        z = pc[:, 2]
        front = z > 1e-6
        u = np.full(len(z), -1)
        v = np.full(len(z), -1)
        u[front] = np.floor(intrinsics.fx * pc[front, 0] / z[front] + intrinsics.cx + 0.5)
        v[front] = np.floor(intrinsics.fy * pc[front, 1] / z[front] + intrinsics.cy + 0.5)
        inside = front & (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
        d = np.zeros(len(z))
        d[inside] = depth[v[inside], u[inside]]
        hit = inside & (d > 0) & (z <= d + margin)
        self.seen |= hit.reshape(self.seen.shape)


def region_transform(points, origin, side: float) -> np.ndarray:
    """World points -> region coordinates; the region cube maps onto [-1, 1]^3."""
    return (np.asarray(points, dtype=float) - np.asarray(origin)) / (side / 2.0)


def region_pose_matrix(pose: Pose, origin, side: float) -> np.ndarray:
    """4x4 matrix taking camera-frame points to normalised region coordinates.

    World and region axes are parallel, so the rotation block is the camera
    rotation and the translation block is the camera centre minus the region
    origin, both divided by the half side.
    """
    m = np.eye(4)
    h = side / 2.0
    m[:3, :3] = pose.rotation / h
    m[:3, 3] = (pose.translation - np.asarray(origin)) / h
    return m


class Atlas:
    def __init__(self, basis: EmbeddingBasis, side: float = DEFAULT_SIDE, overlap: float = DEFAULT_OVERLAP,
                 anchor=None):
        if not 0.0 < overlap < 0.5:
            raise ValueError("overlap must lie in (0, 0.5)")
        if side <= 0:
            raise ValueError("side must be positive")
        self.basis = basis
        self.side = float(side)
        self.overlap = float(overlap)
        self.anchor = None if anchor is None else np.asarray(anchor, dtype=float)
        self.regions: Dict[GridIndex, Region] = {}
        self.working_index: Optional[GridIndex] = None

    # --- geometry -------------------------------------------------------------------------
    @property
    def pitch(self) -> float:
        return (1.0 - self.overlap) * self.side

    @property
    def half(self) -> float:
        return self.side / 2.0

    def origin_of(self, index) -> np.ndarray:
        return np.asarray(index, dtype=float) * self.pitch + self.anchor

    def containing_cells(self, point) -> List[GridIndex]:
        """All grid cells (instantiated or not) whose cube contains ``point``."""
        p = np.asarray(point, dtype=float)
        r = (p - self.anchor) / self.pitch
        reach = self.half / self.pitch
        ranges = []
        for axis, x in enumerate(r):
            lo, hi = int(np.ceil(x - reach)), int(np.floor(x + reach))
            # same arithmetic as origin_of / Region.contains so boundary cases agree
            ranges.append([i for i in range(lo - 1, hi + 2)
                           if abs(p[axis] - (float(i) * self.pitch + self.anchor[axis])) <= self.half])
        return sorted(tuple(c) for c in itertools.product(*ranges))

    def containing_regions(self, point) -> List[GridIndex]:
        p = np.asarray(point, dtype=float)
        return [c for c in self.containing_cells(p)
                if c in self.regions and bool(self.regions[c].contains(p)[0])]

    def nearest_region(self, point) -> GridIndex:
        p = np.asarray(point, dtype=float)
        best = min(self.regions, key=lambda k: (float(np.linalg.norm(self.regions[k].origin - p)), k))
        return best

    # --- lifecycle ------------------------------------------------------------------------
    def initialize(self, position, params: FieldParams) -> Region:
        """Anchor the grid at ``position`` and create the first region around it."""
        self.anchor = np.asarray(position, dtype=float).copy()
        region = self._make_region((0, 0, 0), params)
        self.working_index = (0, 0, 0)
        return region

    def _make_region(self, index: GridIndex, params: FieldParams) -> Region:
        region = Region(tuple(int(i) for i in index), self.origin_of(index), self.side, params)
        if self.regions:
            # inherit what neighbouring regions have already seen of this cube
            region.seen = self.observed(region.voxel_centres()).reshape(region.seen.shape)
        self.regions[region.grid_index] = region
        return region

    def observed(self, points) -> np.ndarray:
        """True where any region has seen the voxel holding a point."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros(len(p), bool)
        for key in sorted(self.regions):
            out |= self.regions[key].observed(p)
        return out

    def mark_observed(self, depth, intrinsics, pose: Pose, margin: float = OBSERVED_MARGIN):
        for key in sorted(self.regions):
            self.regions[key].mark_observed(depth, intrinsics, pose, margin)

    @property
    def working(self) -> Region:
        return self.regions[self.working_index]

    def update_working_region(self, position) -> Tuple[GridIndex, List[GridIndex]]:
        """Spawn regions for every cell containing ``position`` and pick the nearest centre.

        New regions copy the current working region's weights; existing ones are
        never re-initialised. Returns ``(working index, newly created indices)``.
        """
        if self.working_index is None:
            raise RuntimeError("atlas not initialised")
        p = np.asarray(position, dtype=float)
        created = []
        source = self.working.params
        for cell in self.containing_cells(p):
            if cell not in self.regions:
                self._make_region(cell, source.copy())
                created.append(cell)
        self.working_index = self.nearest_region(p)
        return self.working_index, created

    def train_intersection(self, position) -> List[Region]:
        """Non-working instantiated regions that also contain ``position``."""
        return [self.regions[c] for c in self.containing_regions(position) if c != self.working_index]

    def snapshot(self) -> "Atlas":
        """Copy of the geometry and weights only (no keyframes or optimiser state)."""
        snap = Atlas(self.basis, self.side, self.overlap, self.anchor)
        for k, r in self.regions.items():
            snap.regions[k] = Region(r.grid_index, r.origin.copy(), r.side, r.params.copy(),
                                     trained_steps=r.trained_steps, seen=r.seen.copy())
        snap.working_index = self.working_index
        return snap

    # --- persistence ----------------------------------------------------------------------
    def to_bytes(self) -> bytes:
        anchor = np.zeros(3) if self.anchor is None else self.anchor
        sizes = {r.seen.shape[0] for r in self.regions.values()}
        if len(sizes) > 1:
            raise ValueError("regions disagree on the observation mask resolution")
        res = sizes.pop() if sizes else OBSERVED_RES
        parts = [_MAP_HEADER.pack(MAP_MAGIC, MAP_VERSION, res, len(self.regions), self.side,
                                  self.overlap, *anchor)]
        blobs = []
        for key in sorted(self.regions):
            r = self.regions[key]
            blob = serialize(r.params, self.basis)
            parts.append(_REGION_ENTRY.pack(*key, *r.origin, len(blob)))
            blobs.append(blob)
            blobs.append(np.packbits(r.seen.ravel()).tobytes())
        return b"".join(parts + blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Atlas":
        try:
            magic, version, res, n, side, overlap, ax, ay, az = _MAP_HEADER.unpack_from(data, 0)
        except struct.error as exc:
            raise FieldFormatError("truncated map header") from exc
        if magic != MAP_MAGIC:
            raise FieldFormatError(f"not a map file (magic {magic!r})")
        if version != MAP_VERSION:
            raise FieldFormatError(f"unsupported map version {version}")
        if res == 0:
            raise FieldFormatError("observation mask resolution must be positive")
        mask_bytes = mask_size(res)
        pos = _MAP_HEADER.size
        entries = []
        for _ in range(n):
            try:
                vals = _REGION_ENTRY.unpack_from(data, pos)
            except struct.error as exc:
                raise FieldFormatError("truncated region table") from exc
            entries.append(vals)
            pos += _REGION_ENTRY.size
        basis = None
        regions = []
        for ix, iy, iz, ox, oy, oz, length in entries:
            params, b, used = deserialize(data, pos)
            if used != length:
                raise FieldFormatError("region blob length mismatch")
            pos += used
            if pos + mask_bytes > len(data):
                raise FieldFormatError("truncated observation mask")
            bits = np.frombuffer(data, np.uint8, mask_bytes, pos)
            seen = np.unpackbits(bits)[:res ** 3].astype(bool).reshape((res,) * 3)
            pos += mask_bytes
            basis = basis or b
            regions.append(((ix, iy, iz), np.array([ox, oy, oz]), params, seen))
        if pos != len(data):
            raise FieldFormatError("trailing bytes after the last region")
        if basis is None:
            basis = EmbeddingBasis.create(0)
        atlas = cls(basis, side, overlap, np.array([ax, ay, az]) if n else None)
        for key, origin, params, seen in regions:
            atlas.regions[key] = Region(key, origin, side, params, seen=seen)
        if regions:
            atlas.working_index = regions[0][0]
        return atlas

    def save(self, path):
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)
        return len(data)

    @classmethod
    def load(cls, path) -> "Atlas":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def manifest_size(n_regions: int) -> int:
    return _MAP_HEADER.size + n_regions * _REGION_ENTRY.size


def mask_size(res: int = OBSERVED_RES) -> int:
    return (res ** 3 + 7) // 8


def region_payload_size(dims, res: int = OBSERVED_RES) -> int:
    """Bytes stored per region: the field blob plus the packed observation mask."""
    return blob_size(dims) + mask_size(res)


def map_size_report(atlas: Atlas) -> dict:
    """Exact serialised byte counts: manifest plus one blob per region."""
    per_region = {}
    for key in sorted(atlas.regions):
        r = atlas.regions[key]
        per_region[key] = region_payload_size(r.params.dims, r.seen.shape[0])
    manifest = manifest_size(len(atlas.regions))
    return {"total_bytes": manifest + sum(per_region.values()), "manifest_bytes": manifest,
            "regions": per_region}
