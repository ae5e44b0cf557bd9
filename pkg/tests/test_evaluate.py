import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from nfslam.core import Pose, se3_exp
from nfslam.evaluate import (EvaluationError, Trajectory, align_rigid, associate, ate_rmse, read_trajectory,
                             read_trajectory_csv, trajectory_ate, write_metrics, write_trajectory_csv)


def traj(stamps, positions):
    return Trajectory(np.asarray(stamps, float), [Pose(translation=p) for p in positions])


def brute_force_ate(est, gt):
    """Independent oracle: grid search over rotations (translation from centroids), then local refinement."""
    ce, cg = est.mean(0), gt.mean(0)

    def cost(rotvec):
        r = Rotation.from_rotvec(rotvec).as_matrix()
        res = (est - ce) @ r.T + cg - gt
        return np.mean(np.sum(res * res, axis=1))

    best = None
    for yaw in np.linspace(-np.pi, np.pi, 24, endpoint=False):
        for pitch in np.linspace(-np.pi / 2, np.pi / 2, 7):
            for roll in np.linspace(-np.pi, np.pi, 12, endpoint=False):
                v = Rotation.from_euler("zyx", [yaw, pitch, roll]).as_rotvec()
                c = cost(v)
                if best is None or c < best[0]:
                    best = (c, v)
    out = minimize(cost, best[1], method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-16, "maxiter": 20000})
    return float(np.sqrt(out.fun))


SQUARE = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)


def test_identical_is_zero():
    assert ate_rmse(SQUARE, SQUARE) == pytest.approx(0, abs=1e-12)


def test_square_with_displaced_corner_matches_brute_force():
    est = SQUARE.copy()
    est[2] += [0.1, 0, 0]
    ours = ate_rmse(est, SQUARE)
    assert ours > 0
    assert abs(ours - brute_force_ate(est, SQUARE)) < 1e-4


def test_random_sets_match_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(3):
        gt = rng.normal(size=(8, 3))
        est = se3_exp(rng.normal(size=6)).transform(gt) + rng.normal(scale=0.05, size=(8, 3))
        assert abs(ate_rmse(est, gt) - brute_force_ate(est, gt)) < 1e-4


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rigid_invariance_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(10, 3))
    est = gt + rng.normal(scale=0.1, size=gt.shape)
    moved = se3_exp(rng.normal(size=6) * [2, 2, 2, 5, 5, 5]).transform(est)
    base = ate_rmse(est, gt)
    assert abs(ate_rmse(moved, gt) - base) < 1e-9
    assert abs(ate_rmse(gt, est) - base) < 1e-9
    assert ate_rmse(se3_exp(rng.normal(size=6)).transform(gt), gt) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_adding_aligned_pair_does_not_increase_error(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(6, 3))
    est = gt + rng.normal(scale=0.1, size=gt.shape)
    r, t = align_rigid(est, gt)
    base = ate_rmse(est, gt)
    # a new pair that the current alignment already maps exactly
    g_new = rng.normal(size=3)
    e_new = r.T @ (g_new - t)
    assert ate_rmse(np.vstack([est, e_new]), np.vstack([gt, g_new])) <= base + 1e-12


def test_noise_level_monte_carlo():
    # isotropic 1 cm noise per axis gives an RMSE near sqrt(3) cm, minus what alignment absorbs
    rng = np.random.default_rng(0)
    gt = np.cumsum(rng.normal(scale=0.05, size=(500, 3)), axis=0)
    vals = [ate_rmse(gt + rng.normal(scale=0.01, size=gt.shape), gt) for _ in range(20)]
    expected = 0.01 * np.sqrt(3 * (500 - 2) / 500)  # six fitted parameters over 1500 residuals
    assert abs(np.mean(vals) - expected) < 3e-4


def test_degenerate_inputs():
    with pytest.raises(EvaluationError):
        ate_rmse(SQUARE[:2], SQUARE[:2])
    line = np.column_stack([np.arange(5.0), np.zeros(5), np.zeros(5)])
    with pytest.raises(EvaluationError):
        ate_rmse(line, line)
    with pytest.raises(EvaluationError):
        ate_rmse(np.zeros((4, 3)), SQUARE)


def test_associate_examples():
    t = np.arange(10) * 0.1
    pos = np.random.default_rng(0).normal(size=(10, 3))
    a, b = associate(traj(t, pos), traj(t, pos))
    assert len(a) == 10 and np.array_equal(a, b)
    with pytest.raises(EvaluationError):
        associate(traj(t, pos), traj(t + 1.0, pos), 0.02)
    shifted = t + np.where(np.arange(10) % 2 == 0, 0.005, -0.005)
    a, b = associate(traj(t, pos), traj(shifted, pos), 0.02)
    assert len(a) == 10
    with pytest.raises(EvaluationError):
        associate(Trajectory(np.zeros(0), []), traj(t, pos))


def test_trajectory_requires_increasing_stamps():
    with pytest.raises(ValueError):
        traj([0.0, 0.0], SQUARE[:2])


def test_trajectory_ate_counts_pairs():
    rng = np.random.default_rng(2)
    gt_pos = rng.normal(size=(20, 3))
    t = np.arange(20) * 0.1
    err, n = trajectory_ate(traj(t + 0.001, gt_pos), traj(t, gt_pos))
    assert n == 20 and err < 1e-12


def test_csv_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    poses = [se3_exp(rng.normal(size=6)) for _ in range(5)]
    tr = Trajectory(np.arange(5) * 0.033 + 1e9, poses)
    write_trajectory_csv(tmp_path / "t.csv", tr)
    back = read_trajectory_csv(tmp_path / "t.csv")
    assert np.array_equal(back.timestamps, tr.timestamps)
    for p, q in zip(back.poses, tr.poses):
        assert np.array_equal(p.translation, q.translation)
        assert np.allclose(p.rotation, q.rotation, atol=1e-14)
    assert read_trajectory(tmp_path / "t.csv").timestamps.tolist() == tr.timestamps.tolist()


def test_reads_tum_groundtruth(tmp_path):
    p = tmp_path / "groundtruth.txt"
    p.write_text("# timestamp tx ty tz qx qy qz qw\n1.0 1 2 3 0 0 0 1\n2.0 4 5 6 0 0 0 1\n")
    tr = read_trajectory(p)
    assert np.allclose(tr.positions, [[1, 2, 3], [4, 5, 6]])


def test_bad_csv(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("time,x\n1,2\n")
    with pytest.raises(EvaluationError):
        read_trajectory_csv(p)
    p.write_text("timestamp,tx,ty,tz,qx,qy,qz,qw\n1,2,3\n")
    with pytest.raises(EvaluationError):
        read_trajectory_csv(p)


def test_metrics_json_sorted(tmp_path):
    write_metrics(tmp_path / "m.json", {"b": 1, "a": 2.5})
    text = (tmp_path / "m.json").read_text()
    assert text.index('"a"') < text.index('"b"')
