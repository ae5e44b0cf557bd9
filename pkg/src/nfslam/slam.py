"""Per-frame pipeline: odometry -> pose tracking -> region bookkeeping -> mapping."""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, List, Optional

import numpy as np

from .atlas import DEFAULT_OVERLAP, DEFAULT_SIDE, Atlas
from .core import Pose, RgbdFrame
from .field import EMBED_SIGMA, EMBED_SIZE, EmbeddingBasis, init_params
from .odometry import OdometryState, RegistrationConfig, step_odometry
from .render import RenderConfig
from .tracker import OptimConfig, map_step, maybe_add_keyframe, track_frame

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SlamConfig:
    seed: int = 0
    region_side: float = DEFAULT_SIDE
    overlap: float = DEFAULT_OVERLAP
    embed_size: int = EMBED_SIZE
    embed_sigma: float = EMBED_SIGMA
    mode: str = "stepped"
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        if self.mode not in ("stepped", "pipelined"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class FrameRecord:
    timestamp: float
    pose: Pose
    odometry: Pose
    working: tuple
    loss: float
    confident: bool
    created: List[tuple] = field(default_factory=list)


class NeuralSlam:
    """Stateful tracker/mapper; feed frames in order with :meth:`process`."""

    def __init__(self, config: SlamConfig = SlamConfig()):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.basis = EmbeddingBasis.create(config.seed, config.embed_sigma, config.embed_size)
        self.atlas = Atlas(self.basis, config.region_side, config.overlap)
        self.odometry = OdometryState()
        self.records: List[FrameRecord] = []
        self.last_pose: Optional[Pose] = None
        self._worker: Optional[_MappingWorker] = None
        if config.mode == "pipelined":
            self._worker = _MappingWorker(self)

    def process(self, frame: RgbdFrame) -> FrameRecord:
        cfg = self.config
        odo_pose = step_odometry(frame, self.odometry, cfg.registration)
        if self.last_pose is None:
            return self._bootstrap(frame, odo_pose)
        if self._worker is not None:
            self._worker.wait()
        init = self.last_pose @ self.odometry.last_relative
        _, early = self.atlas.update_working_region(init.translation)
        result = track_frame(self.rng, frame, init, self.atlas.working, self.basis, cfg.optim, cfg.render,
                             prior=odo_pose)
        pose = result.pose if result.confident else init
        working, created = self.atlas.update_working_region(pose.translation)
        created = early + created
        if created:
            log.info("t=%.3f created regions %s; working region %s", frame.timestamp, created, working)
        self.atlas.mark_observed(frame.depth, frame.intrinsics, pose)
        self.last_pose = pose
        if self._worker is not None:
            self._worker.submit(frame, pose)
        else:
            self._map(frame, pose)
        rec = FrameRecord(frame.timestamp, pose, odo_pose, working, result.loss, result.confident, created)
        self.records.append(rec)
        return rec

    def _bootstrap(self, frame, odo_pose) -> FrameRecord:
        cfg = self.config
        pose = odo_pose
        params = init_params(self.rng, cfg.embed_size)
        region = self.atlas.initialize(pose.translation, params)
        maybe_add_keyframe(self.rng, frame, pose, region, cfg.optim, fixed=True)
        loss = float("nan")
        for _ in range(cfg.optim.init_mapping_iters):
            loss = map_step(self.rng, region, frame, pose, self.basis, cfg.optim, cfg.render)
        self.atlas.mark_observed(frame.depth, frame.intrinsics, pose)
        self.last_pose = pose
        rec = FrameRecord(frame.timestamp, pose, odo_pose, region.grid_index, loss, True, [region.grid_index])
        self.records.append(rec)
        return rec

    def _map(self, frame, pose):
        cfg = self.config
        atlas = self.atlas
        working = atlas.working
        others = atlas.train_intersection(pose.translation)
        maybe_add_keyframe(self.rng, frame, pose, working, cfg.optim)
        for r in others:
            maybe_add_keyframe(self.rng, frame, pose, r, cfg.optim)
        for _ in range(cfg.optim.mapping_iters):
            map_step(self.rng, working, frame, pose, self.basis, cfg.optim, cfg.render)
            for r in others:
                map_step(self.rng, r, frame, pose, self.basis, cfg.optim, cfg.render, update_poses=False)

    def run(self, frames: Iterable[RgbdFrame], progress=None) -> List[FrameRecord]:
        for i, frame in enumerate(frames):
            t0 = time.perf_counter()
            rec = self.process(frame)
            if progress is not None:
                progress(i, rec, time.perf_counter() - t0)
        self.finish()
        return self.records

    def finish(self):
        if self._worker is not None:
            self._worker.wait()

    def close(self):
        if self._worker is not None:
            self._worker.stop()
            self._worker = None

    def trajectory(self):
        return [(r.timestamp, r.pose) for r in self.records]


class _MappingWorker:
    """Runs the mapping half of each frame on a background thread.

    Tracking of frame k+1 waits for mapping of frame k to publish, so the pose
    stream keeps its order; numpy releases the GIL inside the heavy kernels.
    """

    def __init__(self, slam: NeuralSlam):
        self.slam = slam
        self.jobs: "queue.Queue" = queue.Queue()
        self.idle = threading.Event()
        self.idle.set()
        self.error: Optional[BaseException] = None
        self.thread = threading.Thread(target=self._loop, daemon=True)
        self.thread.start()

    def _loop(self):
        while True:
            job = self.jobs.get()
            if job is None:
                return
            try:
                self.slam._map(*job)
            except BaseException as exc:  # surfaced on the next wait()
                self.error = exc
            finally:
                self.idle.set()

    def submit(self, frame, pose):
        self.idle.clear()
        self.jobs.put((frame, pose))

    def wait(self):
        self.idle.wait()
        if self.error is not None:
            err, self.error = self.error, None
            raise err

    def stop(self):
        self.wait()
        self.jobs.put(None)
        self.thread.join()
