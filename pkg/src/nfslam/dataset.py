"""TUM RGB-D sequence reader and a synthetic textured box-room generator."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import yaml
from PIL import Image

from .core import Intrinsics, Pose, RgbdFrame

TUM_DEPTH_SCALE = 5000.0

# Published calibrations of the three Freiburg sensors; anything else gets the generic default.
TUM_INTRINSICS = {
    "freiburg1": (517.3, 516.5, 318.6, 255.3),
    "freiburg2": (520.9, 521.0, 325.1, 249.7),
    "freiburg3": (535.4, 539.2, 320.1, 247.6),
}
DEFAULT_TUM_INTRINSICS = (525.0, 525.0, 319.5, 239.5)


class DatasetError(RuntimeError):
    pass


def associate(first: Sequence[float], second: Sequence[float], max_dt: float = 0.02):
    """Greedy nearest-timestamp matching, each stamp used at most once.

    Candidate pairs within ``max_dt`` are accepted in order of increasing time
    difference. Returns index pairs sorted by the first stream.
    """
    a = np.asarray(first, dtype=float)
    b = np.asarray(second, dtype=float)
    if a.size == 0 or b.size == 0:
        return []
    order = np.argsort(b)
    bs = b[order]
    cand = []
    for i, t in enumerate(a):
        lo = np.searchsorted(bs, t - max_dt, side="left")
        hi = np.searchsorted(bs, t + max_dt, side="right")
        for k in range(lo, hi):
            diff = abs(bs[k] - t)
            if diff <= max_dt:
                cand.append((diff, i, int(order[k])))
    cand.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def read_list(path) -> List[List[str]]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append(line.replace(",", " ").split())
    return rows


def read_groundtruth(path):
    """TUM ``t tx ty tz qx qy qz qw`` lines -> (timestamps, poses)."""
    stamps, poses = [], []
    for row in read_list(path):
        v = [float(x) for x in row[:8]]
        stamps.append(v[0])
        poses.append(Pose.from_quaternion(v[1:4], v[4:8]))
    return np.array(stamps), poses


@dataclass
class SequenceEntry:
    timestamp: float
    color_path: Path
    depth_path: Path
    gt_pose: Optional[Pose] = None


@dataclass
class SequenceIndex:
    entries: List[SequenceEntry]
    intrinsics: Intrinsics
    depth_scale: float = TUM_DEPTH_SCALE

    def __len__(self):
        return len(self.entries)

    def frame(self, i: int) -> RgbdFrame:
        e = self.entries[i]
        return RgbdFrame(e.timestamp, read_color(e.color_path), read_depth(e.depth_path, self.depth_scale),
                         self.intrinsics)

    def frames(self):
        for i in range(len(self)):
            yield self.frame(i)

    def groundtruth(self):
        return [(e.timestamp, e.gt_pose) for e in self.entries if e.gt_pose is not None]


def read_depth(path, scale: float = TUM_DEPTH_SCALE) -> np.ndarray:
    raw = np.asarray(Image.open(path))
    if raw.dtype not in (np.uint16, np.int32, np.uint32, np.int64):
        raise DatasetError(f"{path}: expected a 16-bit depth PNG, got {raw.dtype}")
    return raw.astype(np.float64) / scale


def read_color(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def tum_intrinsics(directory, width: int = 640, height: int = 480) -> Intrinsics:
    name = str(directory)
    fx, fy, cx, cy = DEFAULT_TUM_INTRINSICS
    for key, vals in TUM_INTRINSICS.items():
        if key in name:
            fx, fy, cx, cy = vals
    # calibrations refer to 640x480; rescale for resized images
    sx, sy = width / 640.0, height / 480.0
    return Intrinsics(fx * sx, fy * sy, (cx + 0.5) * sx - 0.5, (cy + 0.5) * sy - 0.5, width, height)


def load_tum(directory, max_dt: float = 0.02, intrinsics: Optional[Intrinsics] = None) -> SequenceIndex:
    directory = Path(directory)
    rgb_list, depth_list = directory / "rgb.txt", directory / "depth.txt"
    for p in (rgb_list, depth_list):
        if not p.is_file():
            raise DatasetError(f"missing list file {p}")
    rgb = [(float(r[0]), r[1]) for r in read_list(rgb_list)]
    depth = [(float(r[0]), r[1]) for r in read_list(depth_list)]
    pairs = associate([t for t, _ in rgb], [t for t, _ in depth], max_dt)
    if not pairs:
        raise DatasetError(f"{directory}: no color/depth associations within {max_dt} s")
    entries = [SequenceEntry(rgb[i][0], directory / rgb[i][1], directory / depth[j][1]) for i, j in pairs]
    gt_file = directory / "groundtruth.txt"
    if gt_file.is_file():
        gt_t, gt_poses = read_groundtruth(gt_file)
        gt_pairs = associate([e.timestamp for e in entries], gt_t, max_dt)
        for i, j in gt_pairs:
            entries[i].gt_pose = gt_poses[j]
        entries = [entries[i] for i, _ in gt_pairs]
        if not entries:
            raise DatasetError(f"{directory}: no frames associated with ground truth")
    stamps = np.array([e.timestamp for e in entries])
    if np.any(np.diff(stamps) <= 0):
        raise DatasetError("timestamps are not strictly increasing")
    for e in entries:
        for p in (e.color_path, e.depth_path):
            if not p.is_file():
                raise DatasetError(f"referenced file does not exist: {p}")
    if intrinsics is None:
        w, h = Image.open(entries[0].color_path).size
        intrinsics = tum_intrinsics(directory.resolve(), w, h)
    return SequenceIndex(entries, intrinsics)


# --- synthetic scenes -------------------------------------------------------------------------

DEFAULT_WIDTH, DEFAULT_HEIGHT = 320, 240


def default_intrinsics() -> Intrinsics:
    return Intrinsics(262.5, 262.5, 159.5, 119.5, DEFAULT_WIDTH, DEFAULT_HEIGHT)


def room_texture(points, cell: float = 0.4) -> np.ndarray:
    """Soft 3D checker over smooth per-channel colour gradients, values in [0, 1]."""
    p = np.asarray(points, dtype=float)
    x, y, z = p[..., 0] + 0.13, p[..., 1] + 0.29, p[..., 2] + 0.07
    checker = np.tanh(3.0 * np.sin(np.pi * x / cell) * np.sin(np.pi * y / cell) * np.sin(np.pi * z / cell))
    r = 0.5 + 0.22 * np.sin(2 * np.pi * (0.45 * x + 0.20 * y + 0.30 * z) + 0.3)
    g = 0.5 + 0.22 * np.sin(2 * np.pi * (0.15 * x - 0.40 * y + 0.35 * z) + 1.7)
    b = 0.5 + 0.22 * np.sin(2 * np.pi * (-0.30 * x + 0.25 * y + 0.45 * z) + 4.1)
    rgb = np.stack([r, g, b], axis=-1) + 0.2 * checker[..., None]
    return np.clip(rgb, 0.0, 1.0)


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose, OpenCV axes (x right, y down, z forward)."""
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), position)


def waypoint_trajectory(waypoints, n_frames: int) -> List[Pose]:
    """Piecewise-linear interpolation of (position, look_at) waypoints, equal time per leg."""
    pos = np.array([w["position"] for w in waypoints], dtype=float)
    tgt = np.array([w["look_at"] for w in waypoints], dtype=float)
    if len(pos) == 1 or n_frames == 1:
        return [look_at(pos[0], tgt[0])] * n_frames
    out = []
    legs = len(pos) - 1
    for i in range(n_frames):
        s = i / (n_frames - 1) * legs
        k = min(int(np.floor(s)), legs - 1)
        f = s - k
        out.append(look_at((1 - f) * pos[k] + f * pos[k + 1], (1 - f) * tgt[k] + f * tgt[k + 1]))
    return out


@dataclass
class SyntheticScene:
    room_min: np.ndarray
    room_max: np.ndarray
    trajectory: List[Pose]
    fps: float = 15.0
    cell: float = 0.4
    timestamps: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.room_min = np.asarray(self.room_min, dtype=float)
        self.room_max = np.asarray(self.room_max, dtype=float)
        if np.any(self.room_max <= self.room_min):
            raise ValueError("room_max must exceed room_min on every axis")
        for i, p in enumerate(self.trajectory):
            if not self.inside(p.translation):
                raise ValueError(f"trajectory pose {i} at {p.translation} is not strictly inside the room")
        if self.timestamps is None:
            self.timestamps = np.arange(len(self.trajectory)) / self.fps

    def inside(self, point) -> bool:
        point = np.asarray(point)
        return bool(np.all(point > self.room_min) and np.all(point < self.room_max))

    def __len__(self):
        return len(self.trajectory)

    def texture(self, points):
        return room_texture(points, self.cell)

    def surface_distance(self, points) -> np.ndarray:
        """Unsigned distance from points to the nearest room face."""
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        inside = np.all((p >= self.room_min) & (p <= self.room_max), axis=1)
        d_in = np.minimum(p - self.room_min, self.room_max - p).min(axis=1)
        outside = np.maximum(np.maximum(self.room_min - p, p - self.room_max), 0.0)
        d_out = np.linalg.norm(outside, axis=1)
        return np.where(inside, d_in, d_out)


def render_synthetic(scene: SyntheticScene, intrinsics: Intrinsics, frame_idx: int) -> RgbdFrame:
    """Exact ray/box depth and procedural colour for one trajectory pose."""
    if not 0 <= frame_idx < len(scene):
        raise IndexError(f"frame {frame_idx} outside trajectory of length {len(scene)}")
    pose = scene.trajectory[frame_idx]
    if not scene.inside(pose.translation):
        raise ValueError("camera is outside the room")
    v, u = np.mgrid[0:intrinsics.height, 0:intrinsics.width]
    rays_c = intrinsics.rays(u, v)  # z component is 1, so hit distance == z-depth
    dirs = rays_c @ pose.rotation.T
    o = pose.translation
    with np.errstate(divide="ignore"):
        t_hi = (scene.room_max - o) / dirs
        t_lo = (scene.room_min - o) / dirs
    t_axis = np.where(dirs > 0, t_hi, np.where(dirs < 0, t_lo, np.inf))
    depth = t_axis.min(axis=-1)
    hits = o + dirs * depth[..., None]
    color = scene.texture(hits)
    return RgbdFrame(float(scene.timestamps[frame_idx]), color, depth, intrinsics)


def synthetic_from_config(cfg: dict):
    """Build ``(scene, intrinsics)`` from a plain mapping (see README for the keys)."""
    known = {"room_min", "room_max", "waypoints", "frames", "fps", "cell", "intrinsics", "duration"}
    unknown = set(cfg) - known
    if unknown:
        raise ValueError(f"unknown synthetic scene keys: {sorted(unknown)}")
    fps = float(cfg.get("fps", 15.0))
    if "frames" in cfg:
        n = int(cfg["frames"])
    elif "duration" in cfg:
        n = int(round(float(cfg["duration"]) * fps))
    else:
        raise ValueError("synthetic scene needs 'frames' or 'duration'")
    intr = cfg.get("intrinsics")
    intrinsics = default_intrinsics() if intr is None else Intrinsics(**intr)
    traj = waypoint_trajectory(cfg["waypoints"], n)
    scene = SyntheticScene(cfg["room_min"], cfg["room_max"], traj, fps=fps, cell=float(cfg.get("cell", 0.4)))
    return scene, intrinsics


def load_synthetic_config(path):
    with open(path) as fh:
        return synthetic_from_config(yaml.safe_load(fh))


def desk_room_config(frames: int = 100, fps: float = 15.0) -> dict:
    """Box room (4.2 x 2.4 x 2.3 m) with a sweep of about 1.8 m along +x.

    Every observed surface stays within the region cubes the sweep creates.
    """
    return {
        "room_min": [-1.3, -1.2, -1.1],
        "room_max": [2.9, 1.2, 1.2],
        "frames": frames,
        "fps": fps,
        "waypoints": [
            {"position": [0.0, 0.2, 0.1], "look_at": [-0.3, -1.2, -0.9]},
            {"position": [0.6, 0.2, 0.15], "look_at": [0.8, -1.2, -0.7]},
            {"position": [1.2, 0.1, 0.1], "look_at": [1.9, -1.2, -0.8]},
            {"position": [1.8, 0.1, 0.0], "look_at": [2.9, -0.8, -0.7]},
        ],
    }


def synthetic_frames(scene: SyntheticScene, intrinsics: Intrinsics):
    for i in range(len(scene)):
        yield render_synthetic(scene, intrinsics, i)


def write_tum_sequence(directory, frames: Sequence[RgbdFrame], poses: Sequence[Pose] = ()):
    """Write frames as a TUM-format directory (PNG images and list files)."""
    directory = Path(directory)
    (directory / "rgb").mkdir(parents=True, exist_ok=True)
    (directory / "depth").mkdir(parents=True, exist_ok=True)
    rgb_lines, depth_lines, gt_lines = [], [], []
    for f, pose in zip(frames, list(poses) + [None] * (len(frames) - len(poses))):
        name = f"{f.timestamp:.6f}.png"
        Image.fromarray(np.round(f.color * 255).astype(np.uint8)).save(directory / "rgb" / name)
        raw = np.round(f.depth * TUM_DEPTH_SCALE).clip(0, 65535).astype(np.uint16)
        Image.fromarray(raw).save(directory / "depth" / name)
        rgb_lines.append(f"{f.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{f.timestamp:.6f} depth/{name}")
        if pose is not None:
            t, q = pose.translation, pose.quaternion()
            gt_lines.append(f"{f.timestamp:.6f} " + " ".join(f"{x:.9f}" for x in (*t, *q)))
    (directory / "rgb.txt").write_text("# color images\n" + "\n".join(rgb_lines) + "\n")
    (directory / "depth.txt").write_text("# depth maps\n" + "\n".join(depth_lines) + "\n")
    if gt_lines:
        (directory / "groundtruth.txt").write_text("# timestamp tx ty tz qx qy qz qw\n" + "\n".join(gt_lines) + "\n")
    return directory
