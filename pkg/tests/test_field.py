import numpy as np
import pytest

from eventfield import field as fld
from eventfield.autodiff import ParamVector
from eventfield.events import linlog
from eventfield.field import AnalyticField, FieldConfig, SceneField
from eventfield.fileio import DataError
from eventfield.world import LUMA, Sphere, AnalyticScene

SMALL = FieldConfig(bounds=((-1, -1, -1), (1, 1, 1)), levels=(4, 8, 16))


def test_zero_parameters():
    pv = ParamVector(fld.field_layout(SMALL))
    h, e, s, _ = fld.query_forward(SMALL, pv, np.random.default_rng(0).uniform(-1, 1, (20, 3)))
    np.testing.assert_allclose(e, np.log(2.0))
    np.testing.assert_array_equal(s, 0.0)
    np.testing.assert_array_equal(h, 0.0)


def test_vertex_query_equals_decoder_on_vertex_features():
    pv = fld.init_params(SMALL, 0, grid_std=0.3)
    i, j, k = 1, 2, 3
    x = np.array([[SMALL.lo[a] + (SMALL.hi[a] - SMALL.lo[a]) * (idx / 4) for a, idx in enumerate((i, j, k))]])
    h, e, s, cache = fld.query_forward(SMALL, pv, x)
    feats = []
    for fam in ("grid_g", "grid_c"):
        for l, n in enumerate(SMALL.levels):
            m = n // 4
            feats.append(pv[f"{fam}/{l}"][i * m, j * m, k * m])
    a = np.concatenate(feats)[None]
    for kk in range(len(SMALL.hidden) + 1):
        a = a @ pv[f"dec/W{kk}"] + pv[f"dec/b{kk}"]
        if kk < len(SMALL.hidden):
            a = np.tanh(a)
    np.testing.assert_allclose(s, np.tanh(a[:, -1]), rtol=1e-13)
    np.testing.assert_allclose(h, a[:, :SMALL.h_dim], rtol=1e-13)


def test_ds_dx_matches_fd():
    pv = fld.init_params(SMALL, 0, grid_std=0.3)
    x = np.random.default_rng(1).uniform(-0.8, 0.8, (5, 3))
    _, _, s, cache = fld.query_forward(SMALL, pv, x)
    d_x = fld.query_backward(SMALL, pv, cache, None, None, np.ones(5), None, need_params=False)
    eps = 1e-6
    for a in range(3):
        dx = np.zeros(3)
        dx[a] = eps
        fd = (fld.query_forward(SMALL, pv, x + dx)[2] - fld.query_forward(SMALL, pv, x - dx)[2]) / (2 * eps)
        np.testing.assert_allclose(d_x[:, a], fd, rtol=1e-4, atol=1e-9)


def test_out_of_bounds_is_flagged():
    f = SceneField(SMALL)
    f.tsdf(np.array([[0.0, 0.0, 0.0], [1.5, 0.0, 0.0]]))
    assert f.diagnostics["clamped_queries"] == 1


def test_output_ranges(rng):
    pv = fld.init_params(SMALL, 2, grid_std=1.0)
    _, e, s, _ = fld.query_forward(SMALL, pv, rng.uniform(-1, 1, (500, 3)))
    assert np.all(e > 0) and np.all(np.abs(s) <= 1)


def test_color_monotone_and_exposure_exchange(rng):
    pv = fld.init_params(SMALL, 0)
    pv["crf_c/v"] = rng.uniform(0, 1, pv.shape("crf_c/v"))
    e1 = rng.uniform(0.05, 2.0, (100, 3))
    e2 = e1 * rng.uniform(1.0, 3.0, (100, 3))
    c1, _ = fld.color_forward(SMALL, pv, e1)
    c2, _ = fld.color_forward(SMALL, pv, e2)
    assert np.all(c1 <= c2) and np.all((c1 >= 0) & (c1 <= 1))
    # doubling e while lowering ln dt by ln 2 is a no-op
    cfg2 = FieldConfig(**{**SMALL.__dict__, "log_exposure_rgb": -np.log(2.0)})
    c3, _ = fld.color_forward(cfg2, pv, 2 * e1)
    np.testing.assert_allclose(c3, c1, rtol=1e-12)


def test_identity_mapper_gives_half():
    pv = fld.init_params(SMALL, 0)
    pv["crf_c/alpha"] = 1.0
    pv["crf_c/v"] = 0.0
    pv["crf_c/b"] = 0.0
    c, _ = fld.color_forward(SMALL, pv, np.ones((4, 3)))
    np.testing.assert_array_equal(c, 0.5)


def test_luminance_monotone_and_exchange(rng):
    pv = fld.init_params(SMALL, 0)
    pv["crf_l/v"] = rng.uniform(0, 1, pv.shape("crf_l/v"))
    e = rng.uniform(0.05, 2.0, (50, 3))
    l1, _ = fld.luminance_forward(SMALL, pv, e)
    l2, _ = fld.luminance_forward(SMALL, pv, e * 1.5)
    assert np.all(l2 >= l1) and np.all(np.isfinite(l1))
    cfg2 = FieldConfig(**{**SMALL.__dict__, "log_exposure_event": -np.log(2.0)})
    l3, _ = fld.luminance_forward(cfg2, pv, 2 * e)
    np.testing.assert_allclose(l3, l1, rtol=1e-12)


def test_monotone_after_projection(rng):
    pv = fld.init_params(SMALL, 0)
    for name in ("crf_c/alpha", "crf_c/v", "crf_c/w"):
        pv[name] = rng.normal(0, 1, pv.shape(name))
    fld.project_constraints(pv)
    z = np.linspace(-6, 6, 400)
    g, _ = fld.mapper_forward(pv, "crf_c", np.repeat(z[:, None], 3, axis=1))
    assert np.all(np.diff(g, axis=0) >= -1e-12)


def test_exposure_bounded():
    v = fld.bounded_log_exposure(np.array([-1e3, 0.0, 1e3]))
    np.testing.assert_allclose(v, [-5.0, 0.0, 5.0])


def test_census_single_shared_representation():
    c = SceneField(SMALL).census()
    assert c == {"grid_g": 1, "grid_c": 1, "decoder": 1, "crf_c": 1, "crf_l": 1}


def test_shading_reads_one_query(monkeypatch):
    f = SceneField(SMALL)
    calls = []
    orig = fld.query_forward
    monkeypatch.setattr(fld, "query_forward", lambda *a, **k: calls.append(1) or orig(*a, **k))
    f.shading(np.zeros((3, 3)))
    assert len(calls) == 1


def test_interpolation_linear_within_cell(rng):
    cfg = FieldConfig(bounds=((0, 0, 0), (1, 1, 1)), levels=(4,), feat_dim=2)
    pv = fld.init_params(cfg, 0, grid_std=1.0)
    grid = pv["grid_g/0"]
    from eventfield.autodiff import trilinear_fwd
    # along a segment parallel to an axis inside one cell the interpolant is affine
    base = np.array([1.2, 2.3, 0.4])
    t = np.linspace(0, 0.5, 7)
    pts = base + t[:, None] * np.array([1.0, 0, 0])
    out, _ = trilinear_fwd(grid, pts)
    second = out[2:] - 2 * out[1:-1] + out[:-2]
    np.testing.assert_allclose(second, 0.0, atol=1e-12)
    # C0 across a cell face
    eps = 1e-9
    a, _ = trilinear_fwd(grid, np.array([[2.0 - eps, 1.5, 1.5], [2.0 + eps, 1.5, 1.5]]))
    np.testing.assert_allclose(a[0], a[1], atol=1e-7)


def test_checkpoint_round_trip(tmp_path):
    cfg = FieldConfig(levels=(4, 8), mapper_uses_h=True)
    f = SceneField(cfg, seed=3)
    f.save(tmp_path / "f.ckpt")
    g = SceneField.load(tmp_path / "f.ckpt")
    assert g.cfg == cfg
    np.testing.assert_array_equal(g.params.values, f.params.values.astype(np.float32))
    data = (tmp_path / "f.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(data[:-10])
    with pytest.raises(DataError):
        SceneField.load(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"JUNK" + data[4:])
    with pytest.raises(DataError):
        SceneField.load(tmp_path / "junk.ckpt")


def test_analytic_field_reproduces_simulator():
    scene = AnalyticScene([Sphere(albedo=(0.6, 0.3, 0.2), center=(0, 0, 0), radius=0.5)], 1.0,
                          ((-1, -1, -1), (1, 1, 1)))
    f = AnalyticField(scene, tr=0.05)
    x = np.array([[0.5, 0, 0], [0, 0.5, 0], [0.0, 0.0, -0.5]])
    s, rgb, l = f.shading(x)
    ref = np.clip(scene.radiance(x), 0, 1)
    np.testing.assert_allclose(s, 0.0, atol=1e-12)
    np.testing.assert_allclose(rgb, ref, rtol=1e-9)
    np.testing.assert_allclose(l, linlog(255.0 * ref @ LUMA), rtol=1e-9)
