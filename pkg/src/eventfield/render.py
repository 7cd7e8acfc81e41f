"""Ray generation, depth-guided sampling and bell-weight TSDF rendering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import sigmoid
from .lie import PoseSE3
from .world import Intrinsics

TR = 0.05
M_STRAT = 24
M_SURF = 8
NEAR = 0.05
NON_SURFACE_EPS = 1e-12


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple
    camera_id: str = "rgbd"

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be a unit vector")


@dataclass
class RayBatch:
    """Rays stored as arrays; indexing yields single :class:`Ray` objects."""

    origins: np.ndarray
    dirs: np.ndarray
    pixels: np.ndarray
    camera_id: str = "rgbd"

    def __len__(self):
        return len(self.dirs)

    def __getitem__(self, i) -> Ray:
        return Ray(self.origins[i], self.dirs[i], tuple(self.pixels[i]), self.camera_id)

    def points(self, z: np.ndarray) -> np.ndarray:
        return self.origins[:, None, :] + z[..., None] * self.dirs[:, None, :]


def make_rays(pose: PoseSE3, intrinsics: Intrinsics, pixels, camera_id: str = "rgbd") -> RayBatch:
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if np.any((pixels < 0) | (pixels > [intrinsics.width - 1, intrinsics.height - 1])):
        raise ValueError("pixel outside the image")
    d = intrinsics.directions(pixels) @ pose.rotation.T
    o = np.broadcast_to(pose.trans, d.shape).copy()
    return RayBatch(o, d, pixels, camera_id)


def ray_distance(z_depth, dirs_cam) -> np.ndarray:
    """Convert z-depth to distance along unit camera-frame directions (invalid stays 0)."""
    z_depth = np.asarray(z_depth, dtype=float)
    valid = np.isfinite(z_depth) & (z_depth > 0)
    return np.where(valid, np.where(valid, z_depth, 0.0) / dirs_cam[:, 2], 0.0)


@dataclass
class RaySamples:
    z: np.ndarray  # (N, M) ascending; masked slots sit beyond ``far``
    valid: np.ndarray  # (N, M) bool

    @property
    def M(self):
        return self.z.shape[1]


def sample_ray(sensor_depth, tr: float = TR, M_strat: int = M_STRAT, M_surf: int = M_SURF,
               near: float = NEAR, far: float = 6.0, rng=None) -> np.ndarray:
    """Depths along one ray: stratified over [near, far] plus a band around the sensor depth."""
    s = sample_rays(np.array([np.nan if sensor_depth is None else sensor_depth]), tr, M_strat, M_surf,
                    near, far, rng)
    return s.z[0, s.valid[0]]


def sample_rays(sensor_depth, tr: float = TR, M_strat: int = M_STRAT, M_surf: int = M_SURF,
                near: float = NEAR, far: float = 6.0, rng=None) -> RaySamples:
    """Batched :func:`sample_ray`. ``rng=None`` gives deterministic bin centres.

    Rays without a valid depth get their surface slots parked beyond ``far``
    and masked out.
    """
    if tr <= 0:
        raise ValueError("tr must be positive")
    if near >= far:
        raise ValueError("near must be smaller than far")
    d = np.asarray(sensor_depth, dtype=float)
    N = len(d)
    edges = np.linspace(near, far, M_strat + 1)
    u = rng.random((N, M_strat)) if rng is not None else np.full((N, M_strat), 0.5)
    strat = edges[:-1] + u * (edges[1:] - edges[:-1])
    has_depth = np.isfinite(d) & (d > 0)
    if M_surf == 0:
        return RaySamples(strat, np.ones_like(strat, dtype=bool))
    if rng is not None:
        v = rng.random((N, M_surf))
    else:
        v = np.broadcast_to((np.arange(M_surf) + 0.5) / M_surf, (N, M_surf))
    surf = np.where(has_depth, d, 0.0)[:, None] - tr + 2 * tr * v
    parked = far + 1.0 + np.arange(M_surf) * 1e-3
    surf = np.where(has_depth[:, None], surf, parked)
    z = np.concatenate([strat, surf], axis=1)
    valid = np.concatenate([np.ones_like(strat, dtype=bool), np.broadcast_to(has_depth[:, None], surf.shape)], 1)
    order = np.argsort(z, axis=1, kind="stable")
    return RaySamples(np.take_along_axis(z, order, 1), np.take_along_axis(valid, order, 1))


def bell_weights(s, tr: float = TR):
    """sigma(s/tr) * sigma(-s/tr): peaks at 0.25 on the zero crossing."""
    if tr <= 0:
        raise ValueError("tr must be positive")
    u = np.asarray(s, dtype=float) / tr
    return sigmoid(u) * sigmoid(-u)


def surface_mask(z, s, valid, tr: float):
    """Keep samples up to ``tr`` past the first +/- crossing (all if no crossing).

    ``s`` is the TSDF in units of ``tr``.
    """
    if z.shape[1] < 2:
        return valid
    s0, s1 = s[:, :-1], s[:, 1:]
    cross = valid[:, :-1] & valid[:, 1:] & (s0 > 0) & (s1 <= 0)
    has = cross.any(axis=1)
    i = np.argmax(cross, axis=1)
    rows = np.arange(len(z))
    za, zb, sa, sb = z[rows, i], z[rows, i + 1], s0[rows, i], s1[rows, i]
    with np.errstate(divide="ignore", invalid="ignore"):
        zc = za + np.where(sa != sb, sa / (sa - sb), 0.0) * (zb - za)
    keep = z <= (zc + tr)[:, None]
    return valid & (keep | ~has[:, None])


@dataclass
class RenderBundle:
    c_hat: np.ndarray | None
    l_hat: np.ndarray | None
    d_hat: np.ndarray
    weights: np.ndarray  # normalised
    surface: np.ndarray  # False for non-surface rays


def render_forward(z, valid, s, rgb=None, lum=None, tr: float = TR, truncate: bool = True):
    """Compose colour, log-luminance and depth with normalised bell weights.

    ``s`` is the (N, M) network TSDF output; like the weights of
    :func:`bell_weights` it is divided by ``tr``, which gives a bell a few
    millimetres wide when ``s`` is normalised. ``rgb`` (N, M, 3) and ``lum``
    (N, M) are optional. Returns a :class:`RenderBundle` and a cache for the reverse pass.
    """
    mask = surface_mask(z, s, valid, tr) if truncate else valid
    sig = sigmoid(s / tr)
    w_raw = sig * (1.0 - sig)
    w = w_raw * mask
    W = w.sum(axis=1, keepdims=True)
    surface = np.any(w >= NON_SURFACE_EPS, axis=1)
    Wsafe = np.where(W > 0, W, 1.0)
    wn = w / Wsafe
    c_hat = np.einsum("nm,nmc->nc", wn, rgb) if rgb is not None else None
    l_hat = np.sum(wn * lum, axis=1) if lum is not None else None
    d_hat = np.sum(wn * z, axis=1)
    bundle = RenderBundle(c_hat, l_hat, d_hat, wn, surface)
    return bundle, (z, mask, sig, w_raw, Wsafe, wn, rgb, lum, tr)


def render_backward(cache, d_c=None, d_l=None, d_d=None):
    """Returns (d s, d rgb, d lum) for upstream gradients of c_hat, l_hat, d_hat."""
    z, mask, sig, w_raw, Wsafe, wn, rgb, lum, tr = cache
    a = np.zeros_like(z)
    d_rgb = d_lum = None
    if d_c is not None:
        a += np.einsum("nc,nmc->nm", d_c, rgb)
        d_rgb = wn[:, :, None] * d_c[:, None, :]
    if d_l is not None:
        a += d_l[:, None] * lum
        d_lum = wn * d_l[:, None]
    if d_d is not None:
        a += d_d[:, None] * z
    mean_a = np.sum(wn * a, axis=1, keepdims=True)
    d_w = mask * (a - mean_a) / Wsafe
    d_s = d_w * w_raw * (1.0 - 2.0 * sig) / tr
    return d_s, d_rgb, d_lum


def render_rays(field, rays: RayBatch, samples: RaySamples, tr: float = TR, chunk: int = 4096,
                truncate: bool = True) -> RenderBundle:
    """Forward-only rendering through any object exposing ``shading(x)``."""
    parts = []
    for i in range(0, len(rays), chunk):
        sl = slice(i, i + chunk)
        z, valid = samples.z[sl], samples.valid[sl]
        x = rays.origins[sl, None, :] + z[..., None] * rays.dirs[sl, None, :]
        n, m = z.shape
        s, rgb, lum = field.shading(x.reshape(-1, 3))
        b, _ = render_forward(z, valid, s.reshape(n, m), rgb.reshape(n, m, 3), lum.reshape(n, m), tr, truncate)
        parts.append(b)
    return RenderBundle(*(np.concatenate([getattr(p, k) for p in parts])
                          for k in ("c_hat", "l_hat", "d_hat", "weights", "surface")))
