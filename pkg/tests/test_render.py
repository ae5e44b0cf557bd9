import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nfslam.core import Intrinsics, Pose
from nfslam.render import (RenderConfig, composite, composite_backward, frame_loss, free_space_loss, ray_box,
                           sample_depths, sample_ray)


def brute_force(t, sigma, rgb, far):
    """Literal product-sum over the transmittance recurrence."""
    n = len(t)
    ts = list(t) + [far]
    w = []
    for i in range(n):
        trans = 1.0
        for j in range(i):
            trans *= np.exp(-sigma[j] * (ts[j + 1] - ts[j]))
        alpha = 1.0 - np.exp(-sigma[i] * (ts[i + 1] - ts[i]))
        w.append(trans * alpha)
    w = np.array(w)
    color = (w[:, None] * rgb).sum(0)
    depth = (w * t).sum() / max(w.sum(), 1e-8)
    return w, color, depth


def random_case(rng, n):
    t = np.sort(rng.uniform(0.1, 3.0, n))
    far = t[-1] + rng.uniform(0.01, 1.0)
    sigma = rng.exponential(2.0, n) * (rng.random(n) > 0.2)
    rgb = rng.random((n, 3))
    return t, sigma, rgb, far


def test_empty_space():
    res = composite(np.array([[0.5, 1.0, 1.5]]), np.zeros((1, 3)), np.ones((1, 3, 3)), 2.0)
    assert np.all(res.weights == 0)
    assert np.all(res.color == 0)
    assert res.weight_sum[0] == 0


def test_opaque_first_sample():
    t = np.array([[1.0]])
    res = composite(t, np.array([[20.0]]), np.array([[[0.2, 0.4, 0.6]]]), 2.0)  # sigma * delta = 20
    assert abs(res.weights[0, 0] - 1) < 1e-8
    assert abs(res.depth[0] - 1.0) < 1e-8
    assert np.allclose(res.color[0], [0.2, 0.4, 0.6], atol=1e-8)


def test_three_sample_hand_computation():
    t = np.array([1.0, 1.5, 2.5])
    sigma = np.array([0.4, 2.0, 1.0])
    far = 3.0
    a = 1 - np.exp(-np.array([0.4 * 0.5, 2.0 * 1.0, 1.0 * 0.5]))
    w = np.array([a[0], (1 - a[0]) * a[1], (1 - a[0]) * (1 - a[1]) * a[2]])
    res = composite(t[None], sigma[None], np.zeros((1, 3, 3)), far)
    assert np.allclose(res.weights[0], w, atol=1e-12)


def test_composite_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        n = int(rng.integers(1, 6))
        t, sigma, rgb, far = random_case(rng, n)
        res = composite(t[None], sigma[None], rgb[None], far)
        w, color, depth = brute_force(t, sigma, rgb, far)
        assert np.allclose(res.weights[0], w, atol=1e-12, rtol=0)
        assert np.allclose(res.color[0], color, atol=1e-12, rtol=0)
        assert abs(res.depth[0] - depth) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_weights_are_sub_probability(n, seed):
    rng = np.random.default_rng(seed)
    t, sigma, rgb, far = random_case(rng, n)
    sigma *= rng.choice([1e-3, 1.0, 1e3])
    res = composite(t[None], sigma[None], rgb[None], far)
    assert res.weights.min() >= 0
    assert res.weight_sum[0] <= 1 + 1e-12
    if res.weight_sum[0] > 0:
        assert t[0] - 1e-12 <= res.depth[0] <= t[-1] + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_zero_density_insertion_invariance(n, seed):
    rng = np.random.default_rng(seed)
    t, sigma, rgb, far = random_case(rng, n)
    # a zero-density sample is neutral wherever the interval it splits carries no density:
    # before the first sample, or inside an interval that starts at a zero-density sample
    sigma[rng.random(n) < 0.5] = 0.0
    base = composite(t[None], sigma[None], rgb[None], far)
    spots = [rng.uniform(0.0, t[0])] + [rng.uniform(t[i], t[i + 1]) for i in range(n - 1) if sigma[i] == 0]
    for s in spots:
        k = np.searchsorted(t, s)
        t2 = np.insert(t, k, s)
        s2 = np.insert(sigma, k, 0.0)
        c2 = np.insert(rgb, k, rng.random(3), axis=0)
        res = composite(t2[None], s2[None], c2[None], far)
        assert np.allclose(res.color, base.color, atol=1e-9)
        assert abs(res.depth[0] - base.depth[0]) < 1e-9
        assert abs(res.weight_sum[0] - base.weight_sum[0]) < 1e-9


def test_composite_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    m, s = 4, 6
    t = np.sort(rng.uniform(0.2, 2.0, (m, s)), axis=1)
    far = t[:, -1] + 0.3
    sigma = rng.exponential(1.5, (m, s))
    rgb = rng.random((m, s, 3))
    dc, dd = rng.normal(size=(m, 3)), rng.normal(size=m)

    def loss(sg, c):
        r = composite(t, sg, c, far)
        return float((r.color * dc).sum() + (r.depth * dd).sum())

    res = composite(t, sigma, rgb, far)
    g_sigma, g_rgb = composite_backward(t, far, rgb, res, dc, dd)
    h = 1e-6
    for i in range(m):
        for j in range(s):
            sp, sm = sigma.copy(), sigma.copy()
            sp[i, j] += h
            sm[i, j] -= h
            fd = (loss(sp, rgb) - loss(sm, rgb)) / (2 * h)
            assert abs(g_sigma[i, j] - fd) < 1e-6 * max(1, abs(fd))
            for c in range(3):
                cp, cm = rgb.copy(), rgb.copy()
                cp[i, j, c] += h
                cm[i, j, c] -= h
                fd = (loss(sigma, cp) - loss(sigma, cm)) / (2 * h)
                assert abs(g_rgb[i, j, c] - fd) < 1e-6


def test_frame_loss_zero_at_truth():
    c = np.random.default_rng(0).random((5, 3))
    d = np.linspace(1, 2, 5)
    loss, gc, gd = frame_loss(c, d, c, d, 5.0)
    assert loss == 0 and not gc.any() and not gd.any()


def test_frame_loss_single_depth_term():
    loss, gc, gd = frame_loss(np.zeros((1, 3)), np.array([2.5]), np.zeros((1, 3)), np.array([2.0]), 7.0)
    assert loss == pytest.approx(0.5)
    assert gd[0] == 1.0


def test_frame_loss_batch_gradient():
    rng = np.random.default_rng(3)
    pc, pd = rng.random((8, 3)), rng.uniform(1, 2, 8)
    tc, td = rng.random((8, 3)), rng.uniform(1, 2, 8)
    td[2] = 0.0  # invalid depth: photometric term only
    loss, gc, gd = frame_loss(pc, pd, tc, td, 5.0)
    assert gd[2] == 0
    h = 1e-7
    for i in range(8):
        p = pd.copy(); p[i] += h
        m = pd.copy(); m[i] -= h
        fd = (frame_loss(pc, p, tc, td, 5.0)[0] - frame_loss(pc, m, tc, td, 5.0)[0]) / (2 * h)
        assert abs(gd[i] - fd) < 1e-6
        for c in range(3):
            p = pc.copy(); p[i, c] += h
            m = pc.copy(); m[i, c] -= h
            fd = (frame_loss(p, pd, tc, td, 5.0)[0] - frame_loss(m, pd, tc, td, 5.0)[0]) / (2 * h)
            assert abs(gc[i, c] - fd) < 1e-6


def test_frame_loss_empty_batch():
    with pytest.raises(ValueError):
        frame_loss(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros(0))


def test_free_space_loss_masks_and_gradient():
    t = np.array([[0.5, 1.0, 1.9, 2.0, 2.1]])
    sigma = np.array([[1.0, 2.0, 3.0, 4.0, 5.0]])
    loss, g = free_space_loss(t, 2.5, sigma, np.array([2.0]), margin=0.05, weight=2.0)
    # samples before 1.95 count: delta = 0.5, 0.9, 0.1
    assert loss == pytest.approx(2.0 * (1.0 * 0.5 + 2.0 * 0.9 + 3.0 * 0.1))
    assert np.allclose(g, [[1.0, 1.8, 0.2, 0.0, 0.0]])
    loss0, g0 = free_space_loss(t, 2.5, sigma, np.array([0.0]), 0.05, 2.0)
    assert loss0 == 0 and not g0.any()


# --- sampling ----------------------------------------------------------------------------

K = Intrinsics(100.0, 100.0, 50.0, 40.0, 100, 80)
BOX = (np.array([-2.0, -2.0, -2.0]), np.array([2.0, 2.0, 2.0]))


def test_invalid_depth_gives_coarse_only():
    cfg = RenderConfig()
    t = sample_ray(np.random.default_rng(0), (10, 20), 0.0, Pose(), K, cfg, *BOX)
    assert len(t) == cfg.n_coarse


def test_surface_band_bounds():
    cfg = RenderConfig(surface_band=0.1, n_coarse=0)
    t = sample_ray(np.random.default_rng(0), (50, 40), 1.5, Pose(), K, cfg, *BOX)
    assert len(t) == cfg.n_surface
    assert np.all((t >= 1.4) & (t <= 1.6))


def test_samples_strictly_increasing():
    rng = np.random.default_rng(1)
    cfg = RenderConfig()
    for _ in range(1000):
        u, v = rng.uniform(0, 100), rng.uniform(0, 80)
        d = rng.uniform(0.3, 1.9) if rng.random() > 0.1 else 0.0
        t = sample_ray(rng, (u, v), d, Pose(), K, cfg, *BOX)
        assert np.all(np.diff(t) > 0)


def test_ray_missing_box_gives_no_samples():
    pose = Pose(translation=[10.0, 0, 0])
    t = sample_ray(np.random.default_rng(0), (50, 40), 1.0, pose, K, RenderConfig(), *BOX)
    assert t.size == 0


def test_ray_box_slab():
    lo, hi = ray_box(np.array([[0, 0, -5.0]]), np.array([[0, 0, 1.0]]), [-1, -1, -1], [1, 1, 1])
    assert lo[0] == pytest.approx(4.0) and hi[0] == pytest.approx(6.0)


def test_sample_depths_clipped_to_segment():
    rng = np.random.default_rng(2)
    t = sample_depths(rng, np.array([0.1]), np.array([1.0]), np.array([0.98]), RenderConfig())
    assert t.min() >= 0.1 and t.max() <= 1.0
