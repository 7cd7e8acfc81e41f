"""Tracking and mapping: losses, event temporal aggregation and the SLAM loop.

Each optimisation step builds a :class:`Batch` of RGB-D rays and event ray
pairs, and :class:`SlamWorkload` evaluates the weighted loss and walks the
graph backwards by hand (field -> mappers -> renderer -> losses).
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import field as fld
from .autodiff import NonFiniteError, ParamVector
from .dataset import Sequence, load_sequence
from .events import EventIndex
from .fileio import ConfigError, DataError, read_kv, write_kv, write_tum
from .lie import PoseSE3, so3_exp, so3_left_jacobian
from .render import render_backward, render_forward, sample_rays, surface_mask
from .world import Intrinsics

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("frame", "L_ev", "L_rgb", "L_d", "L_sdf", "L_fs", "total", "prev_id")


# ---------------------------------------------------------------- configuration

@dataclass
class LossWeights:
    ev: float = 0.05
    rgb: float = 5.0
    d: float = 0.1
    sdf: float = 10.0
    fs: float = 10.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")


@dataclass
class RunConfig:
    """Every tunable of a run; serialised as flat ``key = value`` text."""

    seed: int = 0
    n_frames: int = 0  # 0 = whole sequence
    lambda_ev: float = 0.05
    lambda_rgb: float = 5.0
    lambda_d: float = 0.1
    lambda_sdf: float = 10.0
    lambda_fs: float = 10.0
    event_mode: str = "known"  # known | normalized
    eta: bool = True
    use_crf: bool = True
    mapper_uses_h: bool = False
    radiance_channels: int = 3
    levels: tuple = (16, 32, 64)
    feat_dim: int = 2
    hidden: tuple = (32, 32)
    h_dim: int = 16
    crf_hidden: int = 16
    bounds: tuple = ()  # empty = from the dataset's scene.json
    tr: float = 0.05
    m_strat: int = 24
    m_surf: int = 8
    near: float = 0.05
    far: float = 0.0  # 0 = scene diagonal
    truncate_after_surface: bool = True
    n_track_rays: int = 1024
    n_ba_rays: int = 2048
    n_event_rays: int = 512
    track_iters: int = 10
    ba_iters: int = 10
    init_iters: int = 100
    ba_every: int = 5
    kf_every: int = 5
    w_d: int = 5
    w_s: int = 2
    ls_factor: float = 1.5
    ls_window: int = 20
    lr_grid: float = 1e-2
    lr_decoder: float = 1e-3
    lr_crf: float = 1e-3
    lr_rot: float = 1e-3
    lr_trans: float = 1e-3
    grid_init_std: float = 1e-2

    def __post_init__(self):
        if self.event_mode not in ("known", "normalized"):
            raise ConfigError(f"event_mode must be 'known' or 'normalized', got {self.event_mode!r}")
        if self.w_d < 1 or self.w_s < 0:
            raise ConfigError("w_d must be >= 1 and w_s >= 0")
        LossWeights(*self.weights_tuple())

    def weights_tuple(self):
        return (self.lambda_ev, self.lambda_rgb, self.lambda_d, self.lambda_sdf, self.lambda_fs)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(*self.weights_tuple())

    def field_config(self, bounds) -> fld.FieldConfig:
        return fld.FieldConfig(bounds=bounds, levels=self.levels, feat_dim=self.feat_dim, hidden=self.hidden,
                               h_dim=self.h_dim, crf_hidden=self.crf_hidden,
                               radiance_channels=self.radiance_channels, use_crf=self.use_crf,
                               mapper_uses_h=self.mapper_uses_h)

    def to_kv(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = " ".join(str(x) for x in np.ravel(v))
            out[f.name] = v
        return out

    @classmethod
    def from_kv(cls, kv: dict, base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        known = {f.name: f for f in fields(cls)}
        vals = asdict(base)
        for key, text in kv.items():
            if key not in known:
                raise ConfigError(f"unknown configuration key {key!r}")
            cur = getattr(base, key)
            try:
                if isinstance(cur, bool):
                    if text.lower() not in ("true", "false", "1", "0"):
                        raise ValueError(text)
                    vals[key] = text.lower() in ("true", "1")
                elif isinstance(cur, int):
                    vals[key] = int(text)
                elif isinstance(cur, float):
                    vals[key] = float(text)
                elif isinstance(cur, tuple):
                    nums = [float(x) for x in text.replace(",", " ").split()]
                    if key == "bounds":
                        vals[key] = (tuple(nums[:3]), tuple(nums[3:])) if nums else ()
                    else:
                        vals[key] = tuple(int(x) for x in nums)
                else:
                    vals[key] = text
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {text!r}") from exc
        return cls(**vals)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_kv(read_kv(path))

    def save(self, path) -> None:
        write_kv(path, self.to_kv(), "eventfield run configuration")


# ---------------------------------------------------------------- losses

def event_loss(l_beta, l_alpha, n, C: float, mode: str = "known", need_grad: bool = False):
    """Mean squared mismatch between accumulated events and the rendered log change.

    ``known``: residual ``n C - (l_beta - l_alpha)``. ``normalized``: both the
    count vector and the rendered difference are scaled to unit RMS first.
    Returns the loss, plus d loss / d (l_beta - l_alpha) when requested.
    """
    delta = np.asarray(l_beta, dtype=float) - np.asarray(l_alpha, dtype=float)
    n = np.asarray(n, dtype=float)
    N = delta.size
    if N == 0:
        raise ValueError("event loss needs at least one ray pair")
    if mode == "known":
        r = n * C - delta
        loss = float(np.mean(r * r))
        g = -2.0 * r / N
    elif mode == "normalized":
        rn = math.sqrt(float(np.mean(n * n)))
        rd = max(math.sqrt(float(np.mean(delta * delta))), 1e-12)
        a = n / rn if rn > 0 else np.zeros_like(n)
        b = delta / rd
        r = a - b
        loss = float(np.mean(r * r))
        gb = 2.0 * r / N * -1.0
        # d b / d delta = (I - b b^T / N) / rd
        g = (gb - b * np.sum(gb * b) / N) / rd
    else:
        raise ValueError(f"unknown event loss mode {mode!r}")
    return (loss, g) if need_grad else loss


def rgbd_losses(c_hat, c_obs, d_hat, d_obs, depth_valid, need_grad: bool = False):
    """Colour MSE over rays and channels; depth MSE over rays with valid depth."""
    rc = c_hat - c_obs
    L_rgb = float(np.mean(rc * rc)) if rc.size else 0.0
    dv = np.asarray(depth_valid, dtype=bool)
    nd = int(dv.sum())
    rd = np.where(dv, d_hat - np.where(dv, d_obs, 0.0), 0.0)
    L_d = float(np.sum(rd * rd) / nd) if nd else 0.0
    if nd == 0:
        log.debug("no valid depth in batch; depth loss set to 0")
    if not need_grad:
        return L_rgb, L_d
    g_c = 2.0 * rc / max(rc.size, 1)
    g_d = 2.0 * rd / nd if nd else np.zeros_like(rd)
    return L_rgb, L_d, g_c, g_d


def sdf_losses(z, s, d_obs, tr: float, sample_valid=None, depth_valid=None, need_grad: bool = False):
    """Truncated SDF supervision per ray, averaged over rays with valid depth.

    Near the surface (``|d - z| <= tr``) the target of ``s`` is ``(d - z) / tr``;
    in observed free space (``z < d - tr``) the target is 1. Samples behind
    ``d + tr`` are ignored.
    """
    z = np.asarray(z, dtype=float)
    s = np.asarray(s, dtype=float)
    sv = np.ones_like(z, dtype=bool) if sample_valid is None else sample_valid
    dv = np.isfinite(d_obs) & (d_obs > 0) if depth_valid is None else np.asarray(depth_valid, dtype=bool)
    d = np.where(dv, d_obs, 0.0)[:, None]
    gap = d - z
    near = sv & dv[:, None] & (np.abs(gap) <= tr)
    free = sv & dv[:, None] & (gap > tr)
    R = int(dv.sum())
    r_near = np.where(near, s - gap / tr, 0.0)
    r_free = np.where(free, s - 1.0, 0.0)
    cn = np.maximum(near.sum(axis=1, keepdims=True), 1)
    cf = np.maximum(free.sum(axis=1, keepdims=True), 1)
    if R == 0:
        L_sdf = L_fs = 0.0
    else:
        L_sdf = float(np.sum(r_near * r_near / cn) / R)
        L_fs = float(np.sum(r_free * r_free / cf) / R)
    if not need_grad:
        return L_sdf, L_fs
    scale = 1.0 / max(R, 1)
    return L_sdf, L_fs, 2.0 * r_near / cn * scale, 2.0 * r_free / cf * scale


# ---------------------------------------------------------------- batches and workload

@dataclass
class RayGroup:
    """Rays in colour-camera coordinates of their frame, with sample depths."""

    frame: np.ndarray
    origin: np.ndarray
    dirs: np.ndarray
    z: np.ndarray
    valid: np.ndarray

    def __len__(self):
        return len(self.frame)


@dataclass
class Batch:
    rgbd: RayGroup | None = None
    rgb: np.ndarray | None = None
    dist: np.ndarray | None = None
    has_depth: np.ndarray | None = None
    ev_beta: RayGroup | None = None
    ev_alpha: RayGroup | None = None
    n_events: np.ndarray | None = None
    C: float = 0.2


class SlamWorkload:
    """Weighted total loss over a :class:`Batch` as a function of field and pose segments.

    Pose segments are named ``pose/<frame>`` and hold ``(rho, phi)``; the pose
    used is ``R = Exp(phi) R0``, ``t = t0 + rho`` around the base poses.
    """

    def __init__(self, cfg: fld.FieldConfig, weights: LossWeights, batch: Batch, base_poses: dict,
                 tr: float = 0.05, event_mode: str = "known", field_grad: bool = True, truncate: bool = True):
        self.cfg = cfg
        self.w = weights
        self.batch = batch
        self.base = base_poses
        self.tr = tr
        self.event_mode = event_mode
        self.field_grad = field_grad
        self.truncate = truncate
        self.last: dict = {}

    def _groups(self):
        b = self.batch
        groups = []
        if b.rgbd is not None and len(b.rgbd):
            groups.append(("rgbd", b.rgbd))
        if self.w.ev > 0 and b.ev_beta is not None and len(b.ev_beta):
            groups += [("beta", b.ev_beta), ("alpha", b.ev_alpha)]
        return groups

    def _active(self, g: RayGroup, s):
        return (surface_mask(g.z, s, g.valid, self.tr) if self.truncate else g.valid).ravel()

    def _frame_poses(self, params, frames):
        R, t, phis = {}, {}, {}
        for k in frames:
            R0, t0 = self.base[int(k)]
            name = f"pose/{int(k)}"
            if name in params:
                xi = params[name]
                R[k] = so3_exp(xi[3:]) @ R0
                t[k] = t0 + xi[:3]
                phis[k] = xi[3:].copy()
            else:
                R[k], t[k] = R0, t0
        return R, t, phis

    def __call__(self, params: ParamVector, need_grad: bool):
        cfg, w, b, tr = self.cfg, self.w, self.batch, self.tr
        groups = self._groups()
        if not groups:
            raise ValueError("empty batch")
        frames = np.unique(np.concatenate([g.frame for _, g in groups]))
        R, t, phis = self._frame_poses(params, frames)
        pts, rots, sizes = [], [], []
        for _, g in groups:
            p = g.origin[:, None, :] + g.z[..., None] * g.dirs[:, None, :]
            Rr = np.stack([R[k] for k in g.frame])
            tt = np.stack([t[k] for k in g.frame])
            y = np.einsum("nij,nmj->nmi", Rr, p)
            rots.append(y)
            pts.append((y + tt[:, None, :]).reshape(-1, 3))
            sizes.append(g.z.shape)
        x = np.concatenate(pts)
        h, e, s, qcache = fld.query_forward(cfg, params, x)
        self.last["clamped"] = qcache["oob"]
        use_h = cfg.mapper_uses_h
        offs = np.cumsum([0] + [n * m for n, m in sizes])
        sl = {name: slice(offs[i], offs[i + 1]) for i, (name, _) in enumerate(groups)}
        comp = dict(L_ev=0.0, L_rgb=0.0, L_d=0.0, L_sdf=0.0, L_fs=0.0)
        d_s_all = np.zeros(len(x))
        d_e_all = np.zeros_like(e)
        d_h_all = np.zeros_like(h) if use_h else None
        grad = params.zeros_like() if need_grad else None

        if "rgbd" in sl:
            g = b.rgbd
            n, m = g.z.shape
            q = sl["rgbd"]
            s_r = s[q].reshape(n, m)
            # samples with zero render weight need no colour
            act = self._active(g, s_r)
            e_q, h_q = e[q], h[q]
            rgb_act, ccache = fld.color_forward(cfg, params, e_q[act], h_q[act] if use_h else None)
            rgb_pts = np.zeros((n * m, 3))
            rgb_pts[act] = rgb_act
            bundle, rcache = render_forward(g.z, g.valid, s_r, rgb_pts.reshape(n, m, 3), None, tr, self.truncate)
            dv = b.has_depth & bundle.surface
            L_rgb, L_d, g_c, g_d = rgbd_losses(bundle.c_hat, b.rgb, bundle.d_hat, b.dist, dv, True)
            L_sdf, L_fs, g_sdf, g_fs = sdf_losses(g.z, s_r, b.dist, tr, g.valid, b.has_depth, True)
            comp.update(L_rgb=L_rgb, L_d=L_d, L_sdf=L_sdf, L_fs=L_fs)
            self.last["rgb_sq"] = np.mean((bundle.c_hat - b.rgb) ** 2, axis=1)
            self.last["d_hat"] = bundle.d_hat
            if need_grad:
                d_s, d_rgb, _ = render_backward(rcache, w.rgb * g_c, None, w.d * g_d)
                d_s = d_s + w.sdf * g_sdf + w.fs * g_fs
                d_s_all[q] = d_s.ravel()
                de, dh = fld.color_backward(cfg, params, d_rgb.reshape(-1, 3)[act], ccache, grad, self.field_grad)
                d_e_all[q][act] += de
                if use_h and dh is not None:
                    d_h_all[q][act] += dh

        if "beta" in sl:
            qb, qa = sl["beta"], sl["alpha"]
            gb, ga = b.ev_beta, b.ev_alpha
            act = np.concatenate([self._active(gb, s[qb].reshape(gb.z.shape)),
                                  self._active(ga, s[qa].reshape(ga.z.shape))])
            e_ev = np.concatenate([e[qb], e[qa]])[act]
            h_ev = np.concatenate([h[qb], h[qa]])[act] if use_h else None
            lum_act, lcache = fld.luminance_forward(cfg, params, e_ev, h_ev)
            lum = np.zeros(len(act))
            lum[act] = lum_act
            nb = qb.stop - qb.start
            rend = []
            for gg, q, lpart in ((gb, qb, lum[:nb]), (ga, qa, lum[nb:])):
                n, m = gg.z.shape
                bundle, rc = render_forward(gg.z, gg.valid, s[q].reshape(n, m), None, lpart.reshape(n, m), tr,
                                            self.truncate)
                rend.append((bundle, rc))
            L_ev, g_delta = event_loss(rend[0][0].l_hat, rend[1][0].l_hat, b.n_events, b.C, self.event_mode, True)
            comp["L_ev"] = L_ev
            if need_grad:
                d_lum = np.zeros(len(lum))
                for (bundle, rc), q, sign, part in ((rend[0], qb, 1.0, slice(0, nb)),
                                                    (rend[1], qa, -1.0, slice(nb, None))):
                    ds, _, dl = render_backward(rc, None, sign * w.ev * g_delta, None)
                    d_s_all[q] += ds.ravel()
                    d_lum[part] = dl.ravel()
                de_act, dh_act = fld.luminance_backward(cfg, params, d_lum[act], lcache, grad, self.field_grad)
                de = np.zeros((len(act), e.shape[1]))
                de[act] = de_act
                d_e_all[qb] += de[:nb]
                d_e_all[qa] += de[nb:]
                if use_h and dh_act is not None:
                    dh = np.zeros((len(act), h.shape[1]))
                    dh[act] = dh_act
                    d_h_all[qb] += dh[:nb]
                    d_h_all[qa] += dh[nb:]

        total = (w.ev * comp["L_ev"] + w.rgb * comp["L_rgb"] + w.d * comp["L_d"]
                 + w.sdf * comp["L_sdf"] + w.fs * comp["L_fs"])
        comp["total"] = total
        self.last.update(comp)
        if not np.isfinite(total):
            raise NonFiniteError("loss")
        if not need_grad:
            return total, None

        pose_frames = [k for k in frames if f"pose/{int(k)}" in params]
        d_x = fld.query_backward(cfg, params, qcache, d_h_all, d_e_all, d_s_all, grad,
                                 need_params=self.field_grad, need_x=bool(pose_frames))
        if pose_frames:
            off = 0
            for (_, g), y, (n, m) in zip(groups, rots, sizes):
                gx = d_x[off:off + n * m].reshape(n, m, 3)
                off += n * m
                for k in pose_frames:
                    sel = g.frame == k
                    if not sel.any():
                        continue
                    gk = gx[sel]
                    seg = grad[f"pose/{int(k)}"]
                    seg[:3] += gk.sum(axis=(0, 1))
                    seg[3:] += so3_left_jacobian(phis[k]).T @ np.cross(y[sel], gk).sum(axis=(0, 1))
        return total, grad


# ---------------------------------------------------------------- event temporal aggregation

@dataclass
class TableEntry:
    loss: float
    cur: int
    prev: int


class PrevIndexTable:
    """Per-frame final loss and the partner frame chosen for it."""

    def __init__(self):
        self.entries: dict[int, TableEntry] = {}

    def __contains__(self, i):
        return i in self.entries

    def __getitem__(self, i) -> TableEntry:
        return self.entries[i]

    def __len__(self):
        return len(self.entries)

    def record(self, i: int, loss: float, prev: int) -> None:
        if i in self.entries:
            raise ValueError(f"table entry for frame {i} already written")
        if prev >= i and i > 0:
            raise ValueError("prev must precede the current frame")
        self.entries[int(i)] = TableEntry(float(loss), int(i), int(prev))

    def threshold(self, factor: float = 1.5, window: int = 20) -> float:
        if not self.entries:
            return math.inf
        recent = [self.entries[k].loss for k in sorted(self.entries)[-window:]]
        return factor * float(np.median(recent))


def forward_query(table: PrevIndexTable, i: int, w_d: int = 5, w_s: int = 2, L_s: float = math.inf) -> int:
    """Partner frame for frame ``i``: ``i - w_d``, or the lowest-loss processed
    frame within ``w_s`` of it when the default partner's loss exceeds ``L_s``."""
    if i < 1:
        raise ValueError("forward query needs i >= 1")
    prev = max(i - w_d, 0)
    if prev in table and table[prev].loss > L_s:
        lo, hi = max(i - w_d - w_s, 0), min(i - w_d + w_s, i - 1)
        cands = [j for j in range(lo, hi + 1) if j in table]
        if cands:
            prev = min(cands, key=lambda j: (table[j].loss, j))
    return prev


# ---------------------------------------------------------------- probability-weighted sampling

def project_to_mini_plane(m_c, Z_c, K: Intrinsics, K_m: Intrinsics, T_ec):
    """Project colour pixels with depth into the event mini-plane: (pixels, depth in event frame)."""
    m_c = np.asarray(m_c, dtype=float).reshape(-1, 2)
    Z_c = np.asarray(Z_c, dtype=float).reshape(-1)
    T_ec = np.asarray(T_ec, dtype=float)
    if np.array_equal(T_ec, np.eye(4)) and K.as_list()[:4] == K_m.as_list()[:4]:
        return m_c.copy(), Z_c.copy()
    X = np.stack([(m_c[:, 0] - K.cx) / K.fx * Z_c, (m_c[:, 1] - K.cy) / K.fy * Z_c, Z_c], axis=1)
    Xe = X @ T_ec[:3, :3].T + T_ec[:3, 3]
    Z_e = Xe[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        m_e = np.stack([K_m.fx * Xe[:, 0] / Z_e + K_m.cx, K_m.fy * Xe[:, 1] / Z_e + K_m.cy], axis=1)
    return m_e, Z_e


def patch_probabilities(patch_losses, depth, K: Intrinsics, K_m: Intrinsics, T_ec) -> np.ndarray:
    """Sampling probability per event patch (one patch per mini-plane pixel).

    Colour patch centres are projected into the mini-plane and their losses
    splatted bilinearly; patches with invalid centre depth are skipped.
    """
    L = np.asarray(patch_losses, dtype=float)
    if not np.all(np.isfinite(L)):
        raise ValueError("patch losses must be finite")
    ph, pw = L.shape
    H, W = depth.shape
    rows, cols = np.mgrid[0:ph, 0:pw]
    uc = (cols.ravel() + 0.5) * W / pw - 0.5
    vc = (rows.ravel() + 0.5) * H / ph - 0.5
    Z = depth[np.clip(np.round(vc).astype(int), 0, H - 1), np.clip(np.round(uc).astype(int), 0, W - 1)]
    ok = np.isfinite(Z) & (Z > 0)
    m_e, Z_e = project_to_mini_plane(np.stack([uc, vc], 1)[ok], Z[ok], K, K_m, T_ec)
    lv = L.ravel()[ok]
    front = Z_e > 0
    m_e, lv = m_e[front], lv[front]
    acc = np.zeros(K_m.height * K_m.width)
    wsum = np.zeros_like(acc)
    x0 = np.floor(m_e[:, 0]).astype(int)
    y0 = np.floor(m_e[:, 1]).astype(int)
    fx, fy = m_e[:, 0] - x0, m_e[:, 1] - y0
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
        inside = (xi >= 0) & (xi < K_m.width) & (yi >= 0) & (yi < K_m.height)
        idx = yi[inside] * K_m.width + xi[inside]
        acc += np.bincount(idx, weights=wgt[inside] * lv[inside], minlength=acc.size)
        wsum += np.bincount(idx, weights=wgt[inside], minlength=acc.size)
    Le = np.where(wsum > 0, acc / np.where(wsum > 0, wsum, 1.0), 0.0)
    total = Le.sum()
    if total <= 0:
        return np.full(Le.shape, 1.0 / Le.size)
    return Le / total


def sample_patches(probs, Q: int, rng) -> np.ndarray:
    return rng.choice(len(probs), size=Q, p=probs)


def pw_sampling(patch_losses, depth, K: Intrinsics, K_event: Intrinsics, mini_size, T_ec, Q: int, rng):
    """Event-sensor pixels drawn patch-wise with probability proportional to projected RGB loss."""
    K_m = K_event.scaled(*mini_size)
    probs = patch_probabilities(patch_losses, depth, K, K_m, T_ec)
    q = sample_patches(probs, Q, rng)
    return pixels_in_patches(q, K_event, mini_size, rng), probs


def pixels_in_patches(q, K_event: Intrinsics, mini_size, rng) -> np.ndarray:
    mw, mh = mini_size
    pw, ph = K_event.width / mw, K_event.height / mh
    qx, qy = q % mw, q // mw
    u = np.floor((qx + rng.random(len(q))) * pw).astype(np.int64)
    v = np.floor((qy + rng.random(len(q))) * ph).astype(np.int64)
    return np.stack([np.minimum(u, K_event.width - 1), np.minimum(v, K_event.height - 1)], 1)


def event_depth_map(depth, K: Intrinsics, K_e: Intrinsics, T_ec) -> np.ndarray:
    """Reproject a colour z-depth map into the event camera with a z-buffer (0 = hole)."""
    pix = K.pixel_grid()
    Z = depth.ravel()
    ok = np.isfinite(Z) & (Z > 0)
    m_e, Z_e = project_to_mini_plane(pix[ok], Z[ok], K, K_e, T_ec)
    u = np.round(m_e[:, 0]).astype(np.int64)
    v = np.round(m_e[:, 1]).astype(np.int64)
    keep = (Z_e > 0) & (u >= 0) & (u < K_e.width) & (v >= 0) & (v < K_e.height)
    out = np.full(K_e.width * K_e.height, np.inf)
    np.minimum.at(out, v[keep] * K_e.width + u[keep], Z_e[keep])
    out[~np.isfinite(out)] = 0.0
    return out.reshape(K_e.height, K_e.width)


# ---------------------------------------------------------------- optimiser

class Adam:
    """Adam with per-segment state and learning rates (scalar or per-element)."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.state: dict[str, list] = {}

    def step(self, params: ParamVector, grad: ParamVector, lrs: dict, scale: float = 1.0) -> None:
        for name, lr in lrs.items():
            g = grad[name]
            st = self.state.setdefault(name, [np.zeros_like(g), np.zeros_like(g), 0])
            st[2] += 1
            st[0] = self.b1 * st[0] + (1 - self.b1) * g
            st[1] = self.b2 * st[1] + (1 - self.b2) * g * g
            mh = st[0] / (1 - self.b1 ** st[2])
            vh = st[1] / (1 - self.b2 ** st[2])
            params[name] = params[name] - scale * np.asarray(lr) * mh / (np.sqrt(vh) + self.eps)


# ---------------------------------------------------------------- the SLAM loop

def constant_velocity(poses: list, i: int) -> PoseSE3:
    if i == 1:
        return poses[0]
    a, b = poses[i - 2], poses[i - 1]
    return b @ (a.inverse() @ b)


class EventSLAM(BaseEstimator):
    """Joint RGB-D + event tracking and mapping on one sequence.

    ``fit(sequence)`` sets ``trajectory_``, ``field_``, ``loss_log_``,
    ``table_`` and ``flagged_frames_``.
    """

    def __init__(self, config: RunConfig | None = None):
        self.config = config

    # -- helpers
    def _setup(self, seq: Sequence):
        cfg = self.config or RunConfig()
        self.cfg_ = cfg
        rig = seq.rig
        if cfg.bounds:
            bounds = cfg.bounds
        elif seq.scene is not None:
            bounds = seq.scene.bounds
        else:
            raise ConfigError("no scene bounds: set 'bounds' in the run configuration")
        bounds = (tuple(bounds[0]), tuple(bounds[1]))
        self.fcfg_ = cfg.field_config(bounds)
        self.field_ = fld.SceneField(self.fcfg_, fld.init_params(self.fcfg_, cfg.seed, cfg.grid_init_std))
        self.far_ = cfg.far if cfg.far > 0 else float(np.linalg.norm(np.subtract(bounds[1], bounds[0])))
        self.rng_rgb_ = np.random.default_rng([cfg.seed, 0])
        self.rng_ev_ = np.random.default_rng([cfg.seed, 1])
        self.field_adam_ = Adam()
        self.index_ = EventIndex(seq.events)
        self.T_ec_ = np.asarray(rig.T_ec, dtype=float)
        self.ev_origin_ = -self.T_ec_[:3, :3].T @ self.T_ec_[:3, 3]
        self._ev_depth = {}
        H, W = seq.rgb.shape[1:3]
        mw, mh = rig.mini_size
        self.patch_shape_ = (mh, mw)
        self.patch_losses_ = {}
        self.dirs_c_ = rig.K.directions(rig.K.pixel_grid()).reshape(H, W, 3)

    def _field_lrs(self, pv):
        c = self.cfg_
        out = {}
        for name in pv.names():
            if name.startswith("grid_"):
                out[name] = c.lr_grid
            elif name.startswith("dec/"):
                out[name] = c.lr_decoder
            elif name.startswith(("crf_", "exposure/")) and self.fcfg_.use_crf:
                out[name] = c.lr_crf
        return out

    def _pose_lr(self):
        c = self.cfg_
        return np.array([c.lr_trans] * 3 + [c.lr_rot] * 3)

    def _rgbd_rays(self, seq, frames, pixels, rng):
        rig = seq.rig
        u, v = pixels[:, 0], pixels[:, 1]
        dirs = self.dirs_c_[v, u]
        zdep = seq.depth[frames, v, u]
        has = np.isfinite(zdep) & (zdep > 0)
        dist = np.where(has, np.where(has, zdep, 1.0) / dirs[:, 2], 0.0)
        c = self.cfg_
        S = sample_rays(np.where(has, dist, np.nan), c.tr, c.m_strat, c.m_surf, c.near, self.far_, rng)
        group = RayGroup(frames.astype(np.int64), np.zeros_like(dirs), dirs, S.z, S.valid)
        return group, seq.rgb[frames, v, u], dist, has

    def _ev_depth_of(self, seq, k):
        if k not in self._ev_depth:
            self._ev_depth[k] = event_depth_map(seq.depth[k], seq.rig.K, seq.rig.K_event, self.T_ec_)
        return self._ev_depth[k]

    def _event_group(self, seq, k, pixels, rng):
        rig, c = seq.rig, self.cfg_
        d_e = rig.K_event.directions(pixels)
        dirs = d_e @ self.T_ec_[:3, :3]
        Z = self._ev_depth_of(seq, k)[pixels[:, 1], pixels[:, 0]]
        dist = np.where(Z > 0, Z / d_e[:, 2], np.nan)
        S = sample_rays(dist, c.tr, c.m_strat, c.m_surf, c.near, self.far_, rng)
        n = len(pixels)
        return RayGroup(np.full(n, k, dtype=np.int64), np.broadcast_to(self.ev_origin_, (n, 3)).copy(), dirs,
                        S.z, S.valid)

    def _event_pairs(self, seq, pairs, rng):
        """``pairs``: list of (cur, prev, Q). Returns (beta group, alpha group, counts)."""
        rig, c = seq.rig, self.cfg_
        betas, alphas, counts = [], [], []
        for cur, prev, Q in pairs:
            if Q <= 0:
                continue
            if c.eta:
                losses = self.patch_losses_.get(cur, np.ones(self.patch_shape_))
                pix, _ = pw_sampling(losses, seq.depth[cur], rig.K, rig.K_event, rig.mini_size, self.T_ec_, Q, rng)
            else:
                pix = np.stack([rng.integers(0, rig.K_event.width, Q), rng.integers(0, rig.K_event.height, Q)], 1)
            betas.append(self._event_group(seq, cur, pix, rng))
            alphas.append(self._event_group(seq, prev, pix, rng))
            counts.append(self.index_.accumulate(pix[:, 0], pix[:, 1], int(seq.timestamps[prev]),
                                                 int(seq.timestamps[cur])))
        if not betas:
            return None, None, None
        cat = lambda gs: RayGroup(*(np.concatenate([getattr(g, f.name) for g in gs]) for f in fields(RayGroup)))
        return cat(betas), cat(alphas), np.concatenate(counts)

    def _update_patch_losses(self, k, pixels, rgb_sq, shape_hw):
        ph, pw = self.patch_shape_
        H, W = shape_hw
        pid = (pixels[:, 1] * ph // H) * pw + pixels[:, 0] * pw // W
        tab = self.patch_losses_.setdefault(k, np.ones(self.patch_shape_)).ravel()
        s = np.bincount(pid, weights=rgb_sq, minlength=ph * pw)
        cnt = np.bincount(pid, minlength=ph * pw)
        tab[cnt > 0] = s[cnt > 0] / cnt[cnt > 0]
        self.patch_losses_[k] = tab.reshape(self.patch_shape_)

    def _partner(self, i):
        c = self.cfg_
        if not c.eta:
            return i - 1
        return forward_query(self.table_, i, c.w_d, c.w_s, self.table_.threshold(c.ls_factor, c.ls_window))

    def _base(self, frames):
        return {int(k): (self.poses_[k].rotation, self.poses_[k].trans.copy()) for k in frames}

    # -- stages
    def _map_step(self, seq, frames_pool, n_rays, pairs, train_poses, pose_adam, lr_scale=1.0):
        """One joint step on the field (and keyframe poses). Returns the loss components."""
        c = self.cfg_
        H, W = seq.rgb.shape[1:3]
        rng = self.rng_rgb_
        frames = np.asarray(frames_pool)[rng.integers(0, len(frames_pool), n_rays)]
        pixels = np.stack([rng.integers(0, W, n_rays), rng.integers(0, H, n_rays)], 1)
        group, rgb, dist, has = self._rgbd_rays(seq, frames, pixels, rng)
        batch = Batch(group, rgb, dist, has, C=seq.events.threshold_C)
        if c.lambda_ev > 0 and pairs:
            batch.ev_beta, batch.ev_alpha, batch.n_events = self._event_pairs(seq, pairs, self.rng_ev_)
        involved = set(frames.tolist())
        if batch.ev_beta is not None:
            involved |= set(batch.ev_beta.frame.tolist()) | set(batch.ev_alpha.frame.tolist())
        pose_pv = ParamVector({f"pose/{k}": (6,) for k in train_poses})
        pv = ParamVector.concat(self.field_.params, pose_pv)
        wl = SlamWorkload(self.fcfg_, c.weights, batch, self._base(involved), c.tr, c.event_mode, True,
                          c.truncate_after_surface)
        try:
            _, grad = wl(pv, True)
        except NonFiniteError:
            return None
        self.field_adam_.step(pv, grad, self._field_lrs(pv), lr_scale)
        fld.project_constraints(pv)
        if train_poses:
            pose_adam.step(pv, grad, {f"pose/{k}": self._pose_lr() for k in train_poses}, lr_scale)
            for k in train_poses:
                xi = pv[f"pose/{k}"]
                self.poses_[k] = self.poses_[k].retract(xi[:3], xi[3:])
        self.field_.params.values[:] = pv.values[:self.field_.params.size]
        return dict(wl.last)

    def _initialise(self, seq):
        c = self.cfg_
        comp = None
        for _ in range(c.init_iters):
            comp = self._map_step(seq, [0], c.n_ba_rays, [], [], None) or comp
        comp = comp or dict(L_ev=0.0, L_rgb=0.0, L_d=0.0, L_sdf=0.0, L_fs=0.0, total=0.0)
        self.table_.record(0, comp["total"], 0)
        self._log(0, comp, -1)

    def _track(self, seq, i):
        c = self.cfg_
        H, W = seq.rgb.shape[1:3]
        init = constant_velocity(self.poses_, i)
        self.poses_.append(init)
        prev = self._partner(i) if c.lambda_ev > 0 else -1
        adam = Adam()
        best = (math.inf, init, None)
        rng = self.rng_rgb_
        diverged = False
        for _ in range(c.track_iters):
            frames = np.full(c.n_track_rays, i)
            pixels = np.stack([rng.integers(0, W, c.n_track_rays), rng.integers(0, H, c.n_track_rays)], 1)
            group, rgb, dist, has = self._rgbd_rays(seq, frames, pixels, rng)
            batch = Batch(group, rgb, dist, has, C=seq.events.threshold_C)
            if prev >= 0:
                batch.ev_beta, batch.ev_alpha, batch.n_events = self._event_pairs(
                    seq, [(i, prev, c.n_event_rays)], self.rng_ev_)
            pv = ParamVector.concat(self.field_.params, ParamVector({f"pose/{i}": (6,)}))
            base = self._base({i, prev} if prev >= 0 else {i})
            wl = SlamWorkload(self.fcfg_, c.weights, batch, base, c.tr, c.event_mode, False,
                              c.truncate_after_surface)
            try:
                loss, grad = wl(pv, True)
            except NonFiniteError:
                diverged = True
                break
            self._update_patch_losses(i, pixels, wl.last["rgb_sq"], (H, W))
            if loss < best[0]:
                best = (loss, self.poses_[i], dict(wl.last))
            adam.step(pv, grad, {f"pose/{i}": self._pose_lr()})
            xi = pv[f"pose/{i}"]
            self.poses_[i] = self.poses_[i].retract(xi[:3], xi[3:])
        if diverged or best[2] is None:
            log.warning("tracking diverged at frame %d; keeping the motion-model pose", i)
            self.flagged_frames_.append(i)
            self.poses_[i] = init
            comp = dict(L_ev=math.nan, L_rgb=math.nan, L_d=math.nan, L_sdf=math.nan, L_fs=math.nan, total=math.inf)
        else:
            self.poses_[i] = best[1]
            comp = best[2]
        self.table_.record(i, comp["total"], max(prev, 0))
        self._log(i, comp, prev)

    def _global_ba(self, seq):
        c = self.cfg_
        kfs = list(self.keyframes_)
        train = [k for k in kfs if k != 0]
        ev_frames = [k for k in kfs if k >= 1]
        pairs = []
        if c.lambda_ev > 0 and ev_frames:
            q = max(1, c.n_event_rays // len(ev_frames))
            pairs = [(k, self.table_[k].prev if c.eta else k - 1, q) for k in ev_frames]
        adam = Adam()
        scale = 1.0
        for _ in range(c.ba_iters):
            comp = self._map_step(seq, kfs, c.n_ba_rays, pairs, train, adam, scale)
            scale = 0.5 if comp is None else 1.0

    def _log(self, i, comp, prev):
        self.loss_log_.append((i, comp["L_ev"], comp["L_rgb"], comp["L_d"], comp["L_sdf"], comp["L_fs"],
                               comp["total"], prev))

    # -- public API
    def fit(self, X: Sequence, y=None):
        seq = X
        self._setup(seq)
        c = self.cfg_
        n = len(seq) if c.n_frames <= 0 else min(c.n_frames, len(seq))
        if n < 1:
            raise DataError("sequence has no frames")
        self.poses_ = [seq.gt_poses[0]]
        self.table_ = PrevIndexTable()
        self.keyframes_ = [0]
        self.loss_log_ = []
        self.flagged_frames_ = []
        self._initialise(seq)
        for i in range(1, n):
            self._track(seq, i)
            if i % c.kf_every == 0:
                self.keyframes_.append(i)
            if i % c.ba_every == 0:
                self._global_ba(seq)
            log.info("frame %d/%d loss %.5g", i, n - 1, self.loss_log_[-1][6])
        self.timestamps_ = np.asarray(seq.timestamps[:n])
        self.trajectory_ = list(self.poses_)
        return self

    def predict(self, X=None) -> list[PoseSE3]:
        check_is_fitted(self, "trajectory_")
        return self.trajectory_


def overfit_frame(seq: Sequence, config: RunConfig | None = None, frame: int = 0, steps: int = 2000,
                  n_rays: int | None = None, with_events: bool = True) -> EventSLAM:
    """Fit the field alone to one frame at its ground-truth pose.

    Events between ``frame`` and the next frame enter through the event loss
    when ``with_events`` is set. Returns the estimator with ``field_`` and
    ``loss_log_`` (one row per step) filled in.
    """
    slam = EventSLAM(config)
    slam._setup(seq)
    c = slam.cfg_
    slam.poses_ = list(seq.gt_poses)
    slam.loss_log_ = []
    nxt = frame + 1 if frame + 1 < len(seq) else frame - 1
    pairs = [(max(frame, nxt), min(frame, nxt), c.n_event_rays)] if with_events and nxt >= 0 else []
    for k in range(steps):
        comp = slam._map_step(seq, [frame], n_rays or c.n_ba_rays, pairs, [], None)
        if comp is not None:
            slam._log(k, comp, pairs[0][1] if pairs else -1)
    return slam


def format_loss_log(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(LOSS_COLUMNS)
    for r in rows:
        wr.writerow([r[0]] + [repr(float(v)) for v in r[1:7]] + [r[7]])
    return buf.getvalue()


def run_sequence(dataset_dir, config: RunConfig, out_dir) -> EventSLAM:
    """Run the pipeline and write ``traj_est.txt``, ``losses.csv``, ``field.ckpt`` and ``run_config.txt``.

    Inputs are parsed before anything is written, so a corrupt dataset leaves
    no partial outputs.
    """
    seq = load_sequence(dataset_dir)
    slam = EventSLAM(config).fit(seq)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "traj_est.txt", slam.timestamps_, slam.trajectory_)
    (out / "losses.csv").write_text(format_loss_log(slam.loss_log_))
    slam.field_.save(out / "field.ckpt")
    config.save(out / "run_config.txt")
    return slam
