import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from eventfield.field import AnalyticField
from eventfield.lie import PoseSE3
from eventfield.render import (M_STRAT, M_SURF, Ray, bell_weights, make_rays, render_backward, render_forward,
                               render_rays, sample_ray, sample_rays)
from eventfield.world import AnalyticScene, Intrinsics, Plane

K = Intrinsics(100.0, 100.0, 20.0, 15.0, 41, 31)


def test_principal_point_looks_down_z():
    r = make_rays(PoseSE3.identity(), K, [(20, 15)])
    np.testing.assert_allclose(r.dirs[0], [0, 0, 1], atol=1e-15)
    assert r[0].camera_id == "rgbd"


def test_translation_moves_origin_only(rng):
    px = rng.uniform(0, [40, 30], (10, 2))
    a = make_rays(PoseSE3.identity(), K, px)
    b = make_rays(PoseSE3([0, 0, 0, 1], [0.3, -1.0, 2.0]), K, px)
    np.testing.assert_array_equal(a.dirs, b.dirs)
    np.testing.assert_array_equal(b.origins, np.tile([0.3, -1.0, 2.0], (10, 1)))


def test_yaw_matches_rotation_matrix(rng):
    R = Rotation.from_euler("z", 90, degrees=True)
    pose = PoseSE3(R.as_quat(), [0, 0, 0])
    px = rng.uniform(0, [40, 30], (10, 2))
    r = make_rays(pose, K, px)
    np.testing.assert_allclose(r.dirs, K.directions(px) @ R.as_matrix().T, atol=1e-14)
    np.testing.assert_allclose(np.linalg.norm(r.dirs, axis=1), 1.0, atol=1e-12)


def test_rays_reject_bad_input():
    with pytest.raises(ValueError):
        make_rays(PoseSE3.identity(), K, [(41, 0)])
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([0, 0, 2.0]), (0, 0))


def test_invalid_depth_gives_only_stratified():
    assert len(sample_ray(None)) == M_STRAT
    assert len(sample_ray(0.0)) == M_STRAT
    assert len(sample_ray(np.nan)) == M_STRAT


def test_surface_samples_in_band(rng):
    z = sample_ray(2.0, tr=0.05, near=0.05, far=6.0, rng=rng)
    assert len(z) == M_STRAT + M_SURF
    in_band = (z >= 1.95) & (z <= 2.05)
    assert in_band.sum() >= M_SURF
    assert np.all(np.diff(z) > 0)


def test_stratified_one_per_bin(rng):
    z = sample_ray(None, near=0.5, far=4.5, rng=rng)
    edges = np.linspace(0.5, 4.5, M_STRAT + 1)
    counts, _ = np.histogram(z, edges)
    assert np.all(counts == 1)


def test_near_far_checked():
    with pytest.raises(ValueError):
        sample_rays(np.array([1.0]), near=2.0, far=1.0)
    with pytest.raises(ValueError):
        sample_rays(np.array([1.0]), tr=0.0)


def test_bell_weights_values(rng):
    assert bell_weights(0.0) == 0.25
    s = rng.normal(0, 0.1, 100)
    np.testing.assert_array_equal(bell_weights(s), bell_weights(-s))
    w = bell_weights(np.array([10 * 0.05, -10 * 0.05]), tr=0.05)
    # sigma(10) sigma(-10)
    np.testing.assert_allclose(w, 4.5395807735951673e-05, rtol=1e-12)
    assert np.all(w < 1e-4)
    assert np.all((bell_weights(s) > 0) & (bell_weights(s) <= 0.25))
    with pytest.raises(ValueError):
        bell_weights(0.0, tr=-1)


def test_single_sample_render():
    rgb = np.array([[[0.1, 0.2, 0.3]]])
    b, _ = render_forward(np.array([[1.7]]), np.array([[True]]), np.array([[0.01]]), rgb, np.array([[2.0]]))
    np.testing.assert_allclose(b.c_hat, rgb[:, 0], rtol=1e-15)
    assert b.d_hat[0] == pytest.approx(1.7, abs=1e-15)
    assert b.l_hat[0] == pytest.approx(2.0, abs=1e-15)


def test_equal_weights_mid_depth():
    s = np.array([[0.02, -0.02]])
    b, _ = render_forward(np.array([[1.0, 3.0]]), np.ones((1, 2), bool), s, truncate=False)
    assert b.d_hat[0] == pytest.approx(2.0, abs=1e-12)


def test_depth_within_sample_range(rng):
    z = np.sort(rng.uniform(0.1, 5, (50, 12)), axis=1)
    s = rng.uniform(-1, 1, (50, 12)) * 0.05
    b, _ = render_forward(z, np.ones_like(z, bool), s)
    assert np.all(b.d_hat >= z[:, 0] - 1e-12) and np.all(b.d_hat <= z[:, -1] + 1e-12)
    np.testing.assert_allclose(b.weights.sum(1), 1.0, atol=1e-12)
    assert np.all(b.weights >= 0)


def test_shuffle_then_sort_is_bitwise_identical(rng):
    z = np.sort(rng.uniform(0.1, 5, (20, 10)), axis=1)
    s = rng.uniform(-0.05, 0.05, z.shape)
    rgb = rng.uniform(0, 1, z.shape + (3,))
    ref, _ = render_forward(z, np.ones_like(z, bool), s, rgb)
    perm = rng.permutation(10)
    zs, ss, cs = z[:, perm], s[:, perm], rgb[:, perm]
    order = np.argsort(zs, axis=1)
    b, _ = render_forward(np.take_along_axis(zs, order, 1), np.ones_like(z, bool), np.take_along_axis(ss, order, 1),
                          np.take_along_axis(cs, order[..., None], 1))
    assert b.c_hat.tobytes() == ref.c_hat.tobytes() and b.d_hat.tobytes() == ref.d_hat.tobytes()


def test_plane_oracle_argmax_at_nearest_sample(rng):
    scene = AnalyticScene([Plane(point=(0, 0, 2.0), normal=(0, 0, -1.0))], 1.0, ((-3, -3, -1), (3, 3, 4)))
    f = AnalyticField(scene, tr=0.05)
    px = rng.uniform(5, [35, 25], (40, 2))
    rays = make_rays(PoseSE3.identity(), K, px)
    true_t = 2.0 / rays.dirs[:, 2]
    samp = sample_rays(true_t, rng=rng)
    b = render_rays(f, rays, samp)
    nearest = np.argmin(np.where(samp.valid, np.abs(samp.z - true_t[:, None]), np.inf), axis=1)
    np.testing.assert_array_equal(np.argmax(b.weights, axis=1), nearest)
    assert np.all(np.abs(b.d_hat - true_t) < 2 * 0.05)


def test_non_surface_ray_flagged():
    # s is clipped to [-1, 1], so raw weights bottom out at sigma(1/tr) sigma(-1/tr)
    s = np.full((1, 4), 1.0)
    b, _ = render_forward(np.array([[1.0, 2, 3, 4]]), np.ones((1, 4), bool), s, tr=0.02)
    assert not b.surface[0]
    assert np.all(np.isfinite(b.d_hat))
    b, _ = render_forward(np.array([[1.0, 2, 3, 4]]), np.ones((1, 4), bool), s, tr=0.05)
    assert b.surface[0]  # sigma(20) sigma(-20) ~ 2e-9 stays above the cut-off
    b2, _ = render_forward(np.array([[1.0, 2, 3, 4]]), np.ones((1, 4), bool), np.array([[0.5, 0.01, -0.3, -1]]))
    assert b2.surface[0]


def test_render_backward_matches_fd(rng):
    z = np.sort(rng.uniform(0.5, 3, (4, 6)), axis=1)
    s = rng.uniform(-0.06, 0.06, z.shape)
    rgb = rng.uniform(0, 1, z.shape + (3,))
    lum = rng.uniform(0, 4, z.shape)
    valid = np.ones_like(z, bool)
    gc, gl, gd = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=4)

    def f(sv):
        b, _ = render_forward(z, valid, sv, rgb, lum)
        return np.sum(gc * b.c_hat) + np.sum(gl * b.l_hat) + np.sum(gd * b.d_hat)

    _, cache = render_forward(z, valid, s, rgb, lum)
    d_s, _, _ = render_backward(cache, gc, gl, gd)
    eps = 1e-7
    fd = np.zeros_like(s)
    for idx in np.ndindex(s.shape):
        e = np.zeros_like(s)
        e[idx] = eps
        fd[idx] = (f(s + e) - f(s - e)) / (2 * eps)
    np.testing.assert_allclose(d_s, fd, rtol=1e-5, atol=1e-7)
