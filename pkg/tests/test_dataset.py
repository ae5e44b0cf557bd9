import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from nfslam.core import Intrinsics, Pose, backproject
from nfslam.dataset import (DatasetError, SyntheticScene, associate, desk_room_config, load_synthetic_config,
                            load_tum, look_at, read_depth, render_synthetic, synthetic_from_config,
                            write_tum_sequence)


def write_lists(d, rgb_stamps, depth_stamps, size=(4, 3)):
    (d / "rgb").mkdir()
    (d / "depth").mkdir()
    w, h = size
    with open(d / "rgb.txt", "w") as fh:
        fh.write("# color images\n# file\n# timestamp filename\n")
        for t in rgb_stamps:
            Image.fromarray(np.full((h, w, 3), 100, np.uint8)).save(d / "rgb" / f"{t:.6f}.png")
            fh.write(f"{t:.6f} rgb/{t:.6f}.png\n")
    with open(d / "depth.txt", "w") as fh:
        fh.write("# depth maps\n")
        for t in depth_stamps:
            Image.fromarray(np.full((h, w), 5000, np.uint16)).save(d / "depth" / f"{t:.6f}.png")
            fh.write(f"{t:.6f} depth/{t:.6f}.png\n")


# --- association -------------------------------------------------------------------------

def test_identical_stamps_pair_fully():
    t = [0.0, 0.1, 0.2, 0.3]
    assert associate(t, t) == [(0, 0), (1, 1), (2, 2), (3, 3)]


def test_threshold_boundary():
    assert associate([1.000], [1.015], 0.02) == [(0, 0)]
    assert associate([1.000], [1.015], 0.01) == []


def test_each_stamp_used_once():
    pairs = associate([1.0, 1.01], [1.005], 0.02)
    assert len(pairs) == 1


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=30, unique=True),
       st.lists(st.floats(0, 10), min_size=1, max_size=30, unique=True))
def test_association_is_symmetric(a, b):
    ab = set(associate(a, b, 0.05))
    ba = {(i, j) for j, i in associate(b, a, 0.05)}
    assert ab == ba


# --- TUM reader --------------------------------------------------------------------------

def test_load_tum_pairs_and_depth_scale(tmp_path):
    write_lists(tmp_path, [1.0, 2.0, 3.0], [1.005, 2.01, 3.5])
    seq = load_tum(tmp_path)
    assert [e.timestamp for e in seq.entries] == [1.0, 2.0]
    f = seq.frame(0)
    assert np.all(f.depth == 1.0)  # raw 5000 -> 1 m
    assert f.color.shape == (3, 4, 3)


def test_load_tum_with_groundtruth(tmp_path):
    write_lists(tmp_path, [1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    with open(tmp_path / "groundtruth.txt", "w") as fh:
        fh.write("# ground truth\n1.001 0.1 0.2 0.3 0 0 0 1\n3.0 1 2 3 0 0 0.7071068 0.7071068\n")
    seq = load_tum(tmp_path)
    assert [e.timestamp for e in seq.entries] == [1.0, 3.0]
    gt = seq.groundtruth()
    assert np.allclose(gt[0][1].translation, [0.1, 0.2, 0.3])
    assert np.allclose(gt[1][1].rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-6)


def test_missing_depth_list(tmp_path):
    write_lists(tmp_path, [1.0], [1.0])
    (tmp_path / "depth.txt").unlink()
    with pytest.raises(DatasetError):
        load_tum(tmp_path)


def test_no_associations(tmp_path):
    write_lists(tmp_path, [1.0, 2.0], [5.0, 6.0])
    with pytest.raises(DatasetError):
        load_tum(tmp_path)


def test_missing_image_file(tmp_path):
    write_lists(tmp_path, [1.0], [1.0])
    (tmp_path / "rgb" / "1.000000.png").unlink()
    with pytest.raises(DatasetError):
        load_tum(tmp_path)


def test_depth_png_scale(tmp_path):
    Image.fromarray(np.array([[5000, 10000], [0, 65535]], np.uint16)).save(tmp_path / "d.png")
    d = read_depth(tmp_path / "d.png")
    assert np.allclose(d, [[1.0, 2.0], [0.0, 13.107]])


def test_tum_round_trip(tmp_path):
    scene, k = synthetic_from_config(desk_room_config(frames=3))
    frames = [render_synthetic(scene, k, i) for i in range(3)]
    write_tum_sequence(tmp_path, frames, scene.trajectory)
    seq = load_tum(tmp_path, intrinsics=k)
    assert len(seq) == 3
    back = seq.frame(1)
    assert np.abs(back.depth - frames[1].depth).max() <= 0.5 / 5000 + 1e-12
    assert np.abs(back.color - frames[1].color).max() <= 0.5 / 255 + 1e-12
    for (_, p), q in zip(seq.groundtruth(), scene.trajectory):
        assert np.allclose(p.as_matrix(), q.as_matrix(), atol=1e-6)


# --- synthetic scenes --------------------------------------------------------------------

def centre_scene():
    pose = look_at([0, 0, 0], [0, 2, 0])
    return SyntheticScene([-3, -2, -1.5], [3, 2, 1.5], [pose])


def test_centre_pixel_depth():
    k = Intrinsics(100.0, 100.0, 50.0, 40.0, 101, 81)
    f = render_synthetic(centre_scene(), k, 0)
    assert f.depth[40, 50] == pytest.approx(2.0, abs=1e-12)


def test_render_deterministic():
    scene, k = synthetic_from_config(desk_room_config(frames=5))
    a, b = render_synthetic(scene, k, 3), render_synthetic(scene, k, 3)
    assert np.array_equal(a.depth, b.depth) and np.array_equal(a.color, b.color)


def test_corner_pixel_depth_matches_ray_plane():
    scene = centre_scene()
    k = Intrinsics(100.0, 100.0, 50.0, 40.0, 101, 81)
    f = render_synthetic(scene, k, 0)
    pose = scene.trajectory[0]
    for v, u in [(0, 0), (0, 100), (80, 0), (80, 100)]:
        d = pose.rotation @ k.rays(np.array([u]), np.array([v]))[0]
        best = np.inf
        for axis in range(3):
            for bound in (scene.room_min[axis], scene.room_max[axis]):
                if d[axis] != 0:
                    s = (bound - pose.translation[axis]) / d[axis]
                    if s > 0:
                        best = min(best, s)
        assert abs(f.depth[v, u] - best) < 1e-9


def test_backprojected_points_lie_on_faces():
    scene, k = synthetic_from_config(desk_room_config(frames=10))
    for i in (0, 5, 9):
        f = render_synthetic(scene, k, i)
        pts = scene.trajectory[i].transform(backproject(f, stride=3).points)
        assert scene.surface_distance(pts).max() < 1e-6


def test_pose_outside_room_rejected():
    with pytest.raises(ValueError):
        SyntheticScene([0, 0, 0], [1, 1, 1], [Pose(translation=[2.0, 0.5, 0.5])])


def test_config_keys_validated(tmp_path):
    cfg = desk_room_config()
    cfg["colour"] = "red"
    with pytest.raises(ValueError):
        synthetic_from_config(cfg)
    cfg = desk_room_config()
    del cfg["frames"]
    cfg["duration"] = 2.0
    scene, _ = synthetic_from_config(cfg)
    assert len(scene) == 30
    p = tmp_path / "scene.yaml"
    p.write_text("room_min: [-1, -1, -1]\nroom_max: [1, 1, 1]\nframes: 4\n"
                 "waypoints:\n  - {position: [0, 0, 0], look_at: [1, 0, 0]}\n"
                 "  - {position: [0.2, 0, 0], look_at: [1, 0.2, 0]}\n")
    scene, k = load_synthetic_config(p)
    assert len(scene) == 4 and k.width == 320
