import numpy as np
import pytest

from nfslam.dataset import synthetic_frames, synthetic_from_config
from nfslam.slam import NeuralSlam, SlamConfig
from nfslam.tracker import OptimConfig

LIGHT = OptimConfig(pixels=64, tracking_iters=2, mapping_iters=2, init_mapping_iters=5)
SMALL_CAMERA = {"fx": 80.0, "fy": 80.0, "cx": 39.5, "cy": 29.5, "width": 80, "height": 60}


def walk(frames, length, **extra):
    """Sideways walk along world +x, looking at a textured corner; about 1 m from the walls."""
    cfg = {"room_min": [-1.3, -1.2, -1.1], "room_max": [3.3, 1.2, 1.2], "frames": frames,
           "intrinsics": SMALL_CAMERA,
           "waypoints": [{"position": [0.0, 0.0, 0.0], "look_at": [0.0, -1.2, -0.6]},
                         {"position": [length, 0.0, 0.0], "look_at": [length, -1.2, -0.6]}]}
    cfg.update(extra)
    return synthetic_from_config(cfg)


def small_scene(frames=6):
    return walk(frames, 0.02 * (frames - 1))


def run(config, frames=6):
    scene, intr = small_scene(frames)
    slam = NeuralSlam(config)
    try:
        slam.run(synthetic_frames(scene, intr))
    finally:
        slam.close()
    return slam, scene


def test_first_frame_bootstraps_a_region():
    slam, scene = run(SlamConfig(optim=LIGHT), frames=1)
    assert len(slam.records) == 1
    rec = slam.records[0]
    assert rec.created == [(0, 0, 0)] and rec.working == (0, 0, 0)
    assert np.allclose(rec.pose.as_matrix(), np.eye(4))
    region = slam.atlas.regions[(0, 0, 0)]
    assert np.allclose(region.origin, 0.0)  # the first camera position anchors the grid
    assert len(region.keyframes) == 1 and region.keyframes[0].fixed
    assert region.seen.any()


def test_trajectory_has_one_pose_per_frame_and_stays_close():
    slam, scene = run(SlamConfig(optim=LIGHT))
    traj = slam.trajectory()
    assert [t for t, _ in traj] == list(scene.timestamps)
    # poses are relative to the first camera, so compare relative motion
    g0 = scene.trajectory[0].inverse()
    for (_, pose), gt in zip(traj, scene.trajectory):
        assert np.linalg.norm(pose.translation - (g0 @ gt).translation) < 0.02


def test_same_seed_is_bit_identical():
    a, _ = run(SlamConfig(seed=3, optim=LIGHT), frames=4)
    b, _ = run(SlamConfig(seed=3, optim=LIGHT), frames=4)
    for (_, p), (_, q) in zip(a.trajectory(), b.trajectory()):
        assert np.array_equal(p.as_matrix(), q.as_matrix())
    assert a.atlas.to_bytes() == b.atlas.to_bytes()


def test_pipelined_matches_stepped():
    a, _ = run(SlamConfig(seed=1, optim=LIGHT, mode="stepped"), frames=4)
    b, _ = run(SlamConfig(seed=1, optim=LIGHT, mode="pipelined"), frames=4)
    for (_, p), (_, q) in zip(a.trajectory(), b.trajectory()):
        assert np.array_equal(p.as_matrix(), q.as_matrix())
    assert a.atlas.to_bytes() == b.atlas.to_bytes()


def test_walking_past_the_cube_creates_a_region():
    # a 1.5 m walk crosses the midpoint between region centres (1.24 m at the default size);
    # world +x is the first camera's -x axis, so the new region sits at index (-1, 0, 0)
    scene, intr = walk(51, 1.5)
    slam = NeuralSlam(SlamConfig(optim=OptimConfig(pixels=32, tracking_iters=1, mapping_iters=1,
                                                   init_mapping_iters=2)))
    slam.run(synthetic_frames(scene, intr))
    assert sorted(slam.atlas.regions) == [(-1, 0, 0), (0, 0, 0)]
    assert slam.records[-1].working == (-1, 0, 0)
    created = [r for r in slam.records if (-1, 0, 0) in r.created]
    assert len(created) == 1
    switch = next(i for i, r in enumerate(slam.records) if r.working == (-1, 0, 0))
    assert abs(slam.records[switch].pose.translation[0]) >= slam.atlas.pitch / 2


def test_bad_mode_rejected():
    with pytest.raises(ValueError):
        SlamConfig(mode="parallel")


def test_worker_errors_surface():
    slam = NeuralSlam(SlamConfig(optim=LIGHT, mode="pipelined"))
    scene, intr = small_scene(3)
    frames = list(synthetic_frames(scene, intr))
    slam.process(frames[0])

    def broken(frame, pose):
        raise RuntimeError("mapping failed")

    slam._map = broken
    slam.process(frames[1])
    with pytest.raises(RuntimeError, match="mapping failed"):
        slam.finish()
    slam.close()
