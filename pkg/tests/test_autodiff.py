import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eventfield import autodiff as ad
from eventfield.autodiff import NonFiniteError, ParamVector, evaluate, evaluate_with_gradient, finite_difference_check
from toys import toy_workload


class Const:
    def __call__(self, p, need_grad):
        return 3.5, (p.zeros_like() if need_grad else None)


class SquaredNorm:
    def __call__(self, p, need_grad):
        v = p.values
        loss = float(v @ v)
        if not need_grad:
            return loss, None
        g = p.zeros_like()
        g.values[:] = 2 * v
        return loss, g


def test_param_vector_layout_partitions():
    pv = ParamVector({"a": (2, 3), "b": (4,), "c": ()})
    spans = sorted(pv.layout[k][:2] for k in pv.names())
    assert spans[0][0] == 0 and spans[-1][1] == pv.size == 11
    assert all(s[1] == t[0] for s, t in zip(spans, spans[1:]))
    pv["b"] = [1, 2, 3, 4]
    assert pv.locate(7) == ("b", 1)
    with pytest.raises(ValueError):
        ParamVector({"a": (2,)}, np.zeros(3))


def test_concat_rejects_duplicates():
    a = ParamVector({"x": (2,)})
    with pytest.raises(ValueError):
        ParamVector.concat(a, a)


def test_constant_workload_zero_grad():
    p = ParamVector({"x": (5,)}, np.arange(5.0))
    loss, g = evaluate_with_gradient(p, Const())
    assert loss == 3.5
    assert np.all(g.values == 0)


def test_squared_norm_gradient():
    p = ParamVector({"x": (2,)}, np.array([1.0, 2.0]))
    _, g = evaluate_with_gradient(p, SquaredNorm())
    np.testing.assert_array_equal(g.values, [2.0, 4.0])


def test_quadratic_fd_is_exact():
    p = ParamVector({"x": (6,)}, np.random.default_rng(0).normal(size=6))
    rep = finite_difference_check(p, SquaredNorm(), step=1e-6)
    assert rep.max_rel_error < 1e-8
    assert rep.n_checked == 6


def test_fd_check_rejects_empty_and_bad_args():
    with pytest.raises(ValueError, match="empty"):
        finite_difference_check(ParamVector({}), SquaredNorm())
    p = ParamVector({"x": (2,)})
    with pytest.raises(ValueError):
        finite_difference_check(p, SquaredNorm(), sample_count=3)
    with pytest.raises(ValueError):
        finite_difference_check(p, SquaredNorm(), step=0.0)


@pytest.mark.parametrize("variant", [dict(mapper_uses_h=False), dict(event_mode="normalized"),
                                     dict(use_crf=False, mapper_uses_h=False)])
def test_pipeline_gradient_variants(variant):
    params, wl = toy_workload(**variant)
    rep = finite_difference_check(params, wl, step=1e-4, floor=1e-6, order=4, sample_count=300, seed=1)
    assert rep.max_rel_error < 1e-4, rep


def test_forward_value_matches_gradient_pass_exactly():
    params, wl = toy_workload()
    assert evaluate(params, wl) == evaluate_with_gradient(params, wl)[0]


def test_zeroed_weight_removes_gradient_bit_exactly():
    params, wl = toy_workload()
    wl.w.ev = 0.0
    _, g0 = wl(params, True)
    # same batch with the event groups removed entirely
    wl.batch.ev_beta = wl.batch.ev_alpha = None
    _, g1 = wl(params, True)
    np.testing.assert_array_equal(g0.values, g1.values)


def test_total_is_weighted_sum():
    params, wl = toy_workload()
    total, _ = wl(params, False)
    w, c = wl.w, wl.last
    expect = w.ev * c["L_ev"] + w.rgb * c["L_rgb"] + w.d * c["L_d"] + w.sdf * c["L_sdf"] + w.fs * c["L_fs"]
    assert total == expect


def test_non_finite_names_primitive():
    with pytest.raises(NonFiniteError, match="affine"):
        ad.check_finite(np.array([np.nan]), "affine", "dec/W0")


def _fd_jac(f, x, eps=1e-6):
    x = np.asarray(x, dtype=float)
    out = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = eps
        out.append((f(x + e) - f(x - e)) / (2 * eps))
    return np.stack(out, -1)


def _rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


@pytest.mark.parametrize("name", ["sigmoid", "tanh", "softplus", "exp"])
def test_elementwise_vjp(name, rng):
    prim = ad.PRIMITIVES[name]
    x = rng.normal(size=5)
    y, cache = prim.forward(x)
    g = rng.normal(size=5)
    (dx,) = prim.vjp(g, cache)
    jac = _fd_jac(lambda z: prim.forward(z)[0], x)
    assert _rel(dx, g @ jac.T if jac.ndim == 2 else g * jac) < 1e-6


def test_log_vjp(rng):
    x = rng.uniform(0.5, 2.0, 4)
    g = rng.normal(size=4)
    (dx,) = ad.log_vjp(g, ad.log_fwd(x)[1])
    assert _rel(dx, g / x) < 1e-12


def test_affine_and_mse_vjp(rng):
    x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    y, cache = ad.affine_fwd(x, W, b)
    g = rng.normal(size=y.shape)
    dx, dW, db = ad.affine_vjp(g, cache)
    f = lambda Wf: np.sum(g * ad.affine_fwd(x, Wf.reshape(4, 2), b)[0])
    assert _rel(dW.ravel(), _fd_jac(f, W.ravel())) < 1e-6
    r = rng.normal(size=7)
    (dr,) = ad.mse_vjp(1.0, ad.mse_fwd(r)[1])
    assert _rel(dr, _fd_jac(lambda z: ad.mse_fwd(z)[0], r)) < 1e-6


def test_sum_vjp(rng):
    x = rng.normal(size=(3, 4))
    _, cache = ad.sum_fwd(x, axis=1)
    (dx,) = ad.sum_vjp(np.array([1.0, 2.0, 3.0]), cache)
    np.testing.assert_array_equal(dx, np.repeat([[1.0], [2.0], [3.0]], 4, axis=1))


def test_trilinear_vjp(rng):
    grid = rng.normal(size=(4, 5, 3, 2))
    coords = rng.uniform(0.1, [2.9, 3.9, 1.9], (6, 3))
    out, cache = ad.trilinear_fwd(grid, coords)
    g = rng.normal(size=out.shape)
    d_grid, d_c = ad.trilinear_vjp(g, cache)
    fg = lambda v: np.sum(g * ad.trilinear_fwd(v.reshape(grid.shape), coords)[0])
    fc = lambda c: np.sum(g * ad.trilinear_fwd(grid, c.reshape(coords.shape))[0])
    assert _rel(d_grid.ravel(), _fd_jac(fg, grid.ravel())) < 1e-6
    assert _rel(d_c.ravel(), _fd_jac(fc, coords.ravel())) < 1e-6


def test_trilinear_vertex_identity_and_partition(rng):
    grid = rng.normal(size=(3, 3, 3, 2))
    out, cache = ad.trilinear_fwd(grid, np.array([[1.0, 2.0, 0.0], [2.0, 2.0, 2.0]]))
    np.testing.assert_array_equal(out, grid[[1, 2], [2, 2], [0, 2]])
    _, wts, _, _ = ad.trilinear_stencil(grid.shape, rng.uniform(0, 2, (50, 3)))
    np.testing.assert_allclose(wts.sum(0), 1.0, atol=1e-14)


def test_se3_action_jacobian_at_identity(rng):
    x = rng.normal(size=(1, 3))
    fd = _fd_jac(lambda xi: ad.se3_action_fwd(xi, x)[0][0], np.zeros(6))
    np.testing.assert_allclose(fd, ad.se3_action_jacobian_at_identity(x[0]), atol=1e-8)
    xi = rng.normal(0, 0.3, 6)
    y, cache = ad.se3_action_fwd(xi, x)
    g = rng.normal(size=y.shape)
    d_xi, _ = ad.se3_action_vjp(g, cache)
    assert _rel(d_xi, _fd_jac(lambda v: np.sum(g * ad.se3_action_fwd(v, x)[0]), xi)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=64))
def test_pairwise_sum_matches_fsum(vals):
    import math
    assert abs(ad.pairwise_sum(np.array(vals)) - math.fsum(vals)) <= 1e-9 * max(1.0, sum(abs(v) for v in vals))


def test_sigmoid_no_overflow():
    with np.errstate(over="raise"):
        y = ad.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])
