"""Trajectory accuracy (absolute trajectory error) and run metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .core import Pose
from .dataset import associate as _associate_stamps
from .dataset import read_groundtruth


class EvaluationError(ValueError):
    pass


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: List[Pose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[float, Pose]]) -> "Trajectory":
        return cls(np.array([t for t, _ in pairs], dtype=float), [p for _, p in pairs])

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02):
    """Nearest-timestamp pairs ``(est position, gt position)``; each pose used at most once."""
    if len(est) == 0 or len(gt) == 0:
        raise EvaluationError("cannot associate an empty trajectory")
    pairs = _associate_stamps(est.timestamps, gt.timestamps, max_dt)
    if not pairs:
        raise EvaluationError(f"no timestamps matched within {max_dt} s")
    i, j = np.array(pairs).T
    return est.positions[i], gt.positions[j]


def align_rigid(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotation and translation (unit scale) with ``R src + t ~ dst``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    r = u @ s @ vt
    return r, mu_d - r @ mu_s


def ate_rmse(est_positions, gt_positions) -> float:
    """RMSE of position residuals after rigid alignment of the estimate onto ground truth."""
    est = np.asarray(est_positions, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt_positions, dtype=float).reshape(-1, 3)
    if est.shape != gt.shape:
        raise EvaluationError("paired position arrays differ in shape")
    if len(est) < 3:
        raise EvaluationError("need at least 3 pose pairs")
    for pts in (est, gt):
        centred = pts - pts.mean(axis=0)
        sv = np.linalg.svd(centred, compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1e-300):
            raise EvaluationError("positions are degenerate (collinear or coincident); rotation is unobservable")
    r, t = align_rigid(est, gt)
    res = est @ r.T + t - gt
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


def trajectory_ate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> Tuple[float, int]:
    a, b = associate(est, gt, max_dt)
    return ate_rmse(a, b), len(a)


CSV_FIELDS = ("timestamp", "tx", "ty", "tz", "qx", "qy", "qz", "qw")


def write_trajectory_csv(path, traj: Trajectory):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for t, p in zip(traj.timestamps, traj.poses):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in (*p.translation, *p.quaternion())])


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(h.strip() for h in rows[0]) != CSV_FIELDS:
        raise EvaluationError(f"{path}: expected header {','.join(CSV_FIELDS)}")
    stamps, poses = [], []
    for k, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            vals = [float(x) for x in row]
        except ValueError as exc:
            raise EvaluationError(f"{path}:{k}: {exc}") from exc
        if len(vals) != 8:
            raise EvaluationError(f"{path}:{k}: expected 8 columns")
        stamps.append(vals[0])
        poses.append(Pose.from_quaternion(vals[1:4], vals[4:8]))
    return Trajectory(np.array(stamps), poses)


def read_trajectory(path) -> Trajectory:
    """CSV written by :func:`write_trajectory_csv` or a TUM-style whitespace file."""
    with open(path) as fh:
        head = fh.readline()
    if head.startswith("timestamp"):
        return read_trajectory_csv(path)
    stamps, poses = read_groundtruth(path)
    return Trajectory(np.asarray(stamps), list(poses))


def write_metrics(path, metrics: dict):
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
