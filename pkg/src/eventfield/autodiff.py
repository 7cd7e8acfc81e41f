"""Reverse-mode differentiation for the fixed field/render/loss graph.

There is no tape. Each primitive is a ``(forward, vjp)`` pair; the pipeline
workloads in :mod:`eventfield.slam` chain them in a fixed order and walk
the chain backwards by hand. Everything runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Protocol

import numpy as np
from scipy.linalg import expm_frechet

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or inf."""

    def __init__(self, primitive: str, segment: str = ""):
        self.primitive = primitive
        self.segment = segment
        where = f" (segment {segment!r})" if segment else ""
        super().__init__(f"non-finite value produced by primitive {primitive!r}{where}")


def check_finite(x: np.ndarray, primitive: str, segment: str = "") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(primitive, segment)
    return x


class ParamVector:
    """Flat float64 vector partitioned into named, shaped segments."""

    def __init__(self, layout: Mapping[str, tuple[int, ...]], values: np.ndarray | None = None):
        self.layout: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in layout.items():
            shape = tuple(int(s) for s in shape)
            size = int(np.prod(shape)) if shape else 1
            self.layout[name] = (offset, offset + size, shape)
            offset += size
        self.size = offset
        if values is None:
            values = np.zeros(offset, dtype=DTYPE)
        values = np.asarray(values, dtype=DTYPE)
        if values.shape != (offset,):
            raise ValueError(f"expected {offset} values, got shape {values.shape}")
        self.values = values

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        pv = cls({k: np.shape(v) for k, v in arrays.items()})
        for k, v in arrays.items():
            pv[k] = v
        return pv

    @classmethod
    def concat(cls, *parts: "ParamVector") -> "ParamVector":
        layout: dict[str, tuple[int, ...]] = {}
        for p in parts:
            for name in p.names():
                if name in layout:
                    raise ValueError(f"duplicate segment {name!r}")
                layout[name] = p.shape(name)
        return cls(layout, np.concatenate([p.values for p in parts]) if parts else None)

    def names(self) -> list[str]:
        return list(self.layout)

    def shape(self, name: str) -> tuple[int, ...]:
        return self.layout[name][2]

    def slice(self, name: str) -> slice:
        start, stop, _ = self.layout[name]
        return slice(start, stop)

    def __contains__(self, name: str) -> bool:
        return name in self.layout

    def __getitem__(self, name: str) -> np.ndarray:
        start, stop, shape = self.layout[name]
        return self.values[start:stop].reshape(shape)

    def __setitem__(self, name: str, value) -> None:
        start, stop, shape = self.layout[name]
        self.values[start:stop] = np.broadcast_to(np.asarray(value, dtype=DTYPE), shape).ravel()

    def __len__(self) -> int:
        return self.size

    def zeros_like(self) -> "ParamVector":
        return ParamVector({k: v[2] for k, v in self.layout.items()})

    def copy(self) -> "ParamVector":
        return ParamVector({k: v[2] for k, v in self.layout.items()}, self.values.copy())

    def locate(self, index: int) -> tuple[str, int]:
        """Map a flat index to ``(segment, offset within segment)``."""
        for name, (start, stop, _) in self.layout.items():
            if start <= index < stop:
                return name, index - start
        raise IndexError(index)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


class Workload(Protocol):
    """A scalar loss over a ParamVector.

    ``__call__(params, need_grad)`` returns ``(loss, grad)`` where ``grad`` is a
    ParamVector with the layout of ``params`` (or None when not requested).
    """

    def __call__(self, params: ParamVector, need_grad: bool) -> tuple[float, ParamVector | None]: ...


def evaluate_with_gradient(params: ParamVector, workload: Workload) -> tuple[float, ParamVector]:
    loss, grad = workload(params, True)
    if grad.layout != params.layout:
        raise ValueError("workload returned a gradient with a different layout")
    return loss, grad


def evaluate(params: ParamVector, workload: Workload) -> float:
    return workload(params, False)[0]


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple[str, int] | None
    fd_step: float
    n_checked: int = 0


def finite_difference_check(params: ParamVector, workload: Workload, step: float = 1e-6,
                            sample_count: int | None = None, seed: int = 0,
                            floor: float = 1e-8, indices: Iterable[int] | None = None,
                            order: int = 2) -> GradCheckReport:
    """Compare analytic gradients to central differences on sampled coordinates.

    Relative error per coordinate is ``|a - b| / max(|a|, |b|, floor)``.
    ``order=4`` uses the five-point stencil, which tolerates a larger step
    and so loses less to round-off.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if params.size == 0:
        raise ValueError("empty parameter space")
    if step <= 0:
        raise ValueError("step must be positive")
    _, grad = evaluate_with_gradient(params, workload)
    if indices is None:
        n = params.size if sample_count is None else int(sample_count)
        if n > params.size:
            raise ValueError("sample_count exceeds parameter dimension")
        rng = np.random.default_rng(seed)
        indices = np.sort(rng.choice(params.size, size=n, replace=False))
    indices = np.asarray(list(indices), dtype=np.int64)
    probe = params.copy()
    worst, worst_idx = 0.0, None
    for i in indices:
        orig = probe.values[i]

        def at(k):
            probe.values[i] = orig + k * step
            return evaluate(probe, workload)

        if order == 2:
            fd = (at(1) - at(-1)) / (2 * step)
        else:
            fd = (8 * (at(1) - at(-1)) - (at(2) - at(-2))) / (12 * step)
        probe.values[i] = orig
        a = grad.values[i]
        err = abs(a - fd) / max(abs(a), abs(fd), floor)
        if err > worst or worst_idx is None:
            worst, worst_idx = err, int(i)
    return GradCheckReport(float(worst), params.locate(worst_idx) if worst_idx is not None else None,
                           step, len(indices))


# --------------------------------------------------------------------------
# primitives: forward(*inputs) -> (out, cache); vjp(g, cache) -> input grads

@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    vjp: Callable


def affine_fwd(x, W, b):
    return x @ W + b, (x, W)


def affine_vjp(g, cache):
    x, W = cache
    return g @ W.T, x.T @ g, g.sum(axis=0)


def sigmoid(x):
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_fwd(x):
    y = sigmoid(x)
    return y, y


def sigmoid_vjp(g, y):
    return (g * y * (1.0 - y),)


def tanh_fwd(x):
    y = np.tanh(x)
    return y, y


def tanh_vjp(g, y):
    return (g * (1.0 - y * y),)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_fwd(x):
    return softplus(x), x


def softplus_vjp(g, x):
    return (g * sigmoid(x),)


def log_fwd(x):
    return np.log(x), x


def log_vjp(g, x):
    return (g / x,)


def exp_fwd(x):
    y = np.exp(x)
    return y, y


def exp_vjp(g, y):
    return (g * y,)


def sum_fwd(x, axis=-1):
    return x.sum(axis=axis), (x.shape, axis)


def sum_vjp(g, cache):
    shape, axis = cache
    return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)


def mse_fwd(r):
    """Mean of squares over all entries of the residual."""
    return float(np.mean(r * r)) if r.size else 0.0, r


def mse_vjp(g, r):
    return (g * 2.0 * r / max(r.size, 1),)


_CORNERS = np.array([(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)])


def _corner_factors(f):
    """Per-axis linear factors for each corner, three (8, P) arrays of f or 1 - f."""
    two = np.stack([1.0 - f, f])
    return tuple(two[_CORNERS[:, a], :, a] for a in range(3))


def trilinear_stencil(shape, coords):
    """Corner indices, weights and factors for grids of ``shape`` (R0, R1, R2, ...).

    Coordinates are clamped to the grid; the cell index is clamped to
    ``[0, R-2]`` so the last vertex is reached with fraction 1. Grids with
    the same resolution can share one stencil.
    """
    res = np.array(shape[:3])
    c = np.clip(coords, 0.0, res - 1.0)
    i0 = np.minimum(np.floor(c).astype(np.int64), res - 2)
    f = c - i0
    inside = (coords >= 0.0) & (coords <= res - 1.0)  # per axis: clamped axes get no gradient
    strides = np.array([res[1] * res[2], res[2], 1])
    idx = (i0 @ strides)[None, :] + (_CORNERS @ strides)[:, None]
    fac = _corner_factors(f)
    return idx, fac[0] * fac[1] * fac[2], fac, inside


def trilinear_fwd(grid, coords, stencil=None):
    """Interpolate ``grid`` (R0, R1, R2, F) at continuous vertex coordinates (P, 3)."""
    idx, wts, fac, inside = stencil if stencil is not None else trilinear_stencil(grid.shape, coords)
    corner_vals = np.take(grid.reshape(-1, grid.shape[3]), idx, axis=0)
    out = np.einsum("kp,kpf->pf", wts, corner_vals)
    return out, (grid.shape, idx, wts, fac, corner_vals, inside)


def trilinear_vjp(g, cache, need_grid=True):
    shape, idx, wts, fac, corner_vals, inside = cache
    n_vert = shape[0] * shape[1] * shape[2]
    F = shape[3]
    d_grid = None
    if need_grid:
        d_flat = np.empty((n_vert, F), dtype=g.dtype)
        flat_idx = idx.ravel()
        for j in range(F):
            d_flat[:, j] = np.bincount(flat_idx, weights=(wts * g[None, :, j]).ravel(), minlength=n_vert)
        d_grid = d_flat.reshape(shape)
    # d out / d f_axis: signed corner values weighted by the other two factors
    proj = np.einsum("kpf,pf->kp", corner_vals, g)
    sign = np.where(_CORNERS == 1, 1.0, -1.0)  # (8, 3)
    d_coords = np.stack([
        sign[:, 0] @ (fac[1] * fac[2] * proj),
        sign[:, 1] @ (fac[0] * fac[2] * proj),
        sign[:, 2] @ (fac[0] * fac[1] * proj),
    ], axis=1)
    d_coords *= inside
    return d_grid, d_coords


def hat(v):
    v = np.asarray(v, dtype=DTYPE)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _se3_generator(xi):
    A = np.zeros((4, 4))
    A[:3, :3] = hat(xi[3:])
    A[:3, 3] = xi[:3]
    return A


_GENERATORS = [_se3_generator(np.eye(6)[k]) for k in range(6)]


def se3_action_fwd(xi, x):
    """Apply exp(xi^) to points ``x`` (P, 3); ``xi = (rho, phi)``, translation first."""
    A = _se3_generator(xi)
    derivs = [expm_frechet(A, G, compute_expm=True) for G in _GENERATORS]
    T = derivs[0][0]
    y = x @ T[:3, :3].T + T[:3, 3]
    return y, (T, [d[1] for d in derivs], x)


def se3_action_vjp(g, cache):
    T, dTs, x = cache
    d_xi = np.array([np.sum(g * (x @ dT[:3, :3].T + dT[:3, 3])) for dT in dTs])
    d_x = g @ T[:3, :3]
    return d_xi, d_x


def se3_action_jacobian_at_identity(x):
    """d/dxi [exp(xi^) x] at xi = 0: the 3x6 block ``[I | -x^]``."""
    return np.hstack([np.eye(3), -hat(x)])


PRIMITIVES: dict[str, Primitive] = {
    p.name: p for p in [
        Primitive("affine", affine_fwd, affine_vjp),
        Primitive("sigmoid", sigmoid_fwd, sigmoid_vjp),
        Primitive("tanh", tanh_fwd, tanh_vjp),
        Primitive("softplus", softplus_fwd, softplus_vjp),
        Primitive("log", log_fwd, log_vjp),
        Primitive("exp", exp_fwd, exp_vjp),
        Primitive("sum", sum_fwd, sum_vjp),
        Primitive("mse", mse_fwd, mse_vjp),
        Primitive("trilinear", trilinear_fwd, trilinear_vjp),
        Primitive("se3_action", se3_action_fwd, se3_action_vjp),
    ]
}


def pairwise_sum(x: np.ndarray) -> float:
    """Fixed-order pairwise reduction, independent of chunking or threads."""
    x = np.asarray(x, dtype=DTYPE).ravel()
    while x.size > 1:
        if x.size % 2:
            x = np.append(x, 0.0)
        x = x[0::2] + x[1::2]
    return float(x[0]) if x.size else 0.0
