"""Trajectory and reconstruction metrics, mesh extraction."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .fileio import DataError
from .render import make_rays, render_forward, sample_rays

log = logging.getLogger(__name__)

COMPLETION_THRESHOLD = 0.05


@dataclass
class AteReport:
    rmse: float
    mean: float
    median: float
    alignment: np.ndarray  # 4x4 similarity applied to the estimate
    scale: float = 1.0
    n_matched: int = 0

    def as_dict(self):
        return {"rmse_cm": self.rmse, "mean_cm": self.mean, "median_cm": self.median, "scale": self.scale,
                "n_matched": self.n_matched}


@dataclass
class MeshReport:
    accuracy: float  # cm, nan when the mesh is empty
    completion: float  # cm
    completion_ratio: float  # percent
    depth_l1: float = float("nan")  # cm
    accuracy_defined: bool = True


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = False):
    """Least-squares (s, R, t) with dst ~ s R src + t."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / np.mean(np.sum(xs * xs, 1))) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def associate(ts_est, ts_gt, max_dt: int) -> list[tuple[int, int]]:
    """Nearest-timestamp pairs (est index, gt index) within ``max_dt``."""
    ts_gt = np.asarray(ts_gt, dtype=np.int64)
    order = np.argsort(ts_gt)
    sorted_gt = ts_gt[order]
    pairs = []
    for i, t in enumerate(np.asarray(ts_est, dtype=np.int64)):
        j = np.searchsorted(sorted_gt, t)
        best = None
        for k in (j - 1, j):
            if 0 <= k < len(sorted_gt):
                dt = abs(int(sorted_gt[k]) - int(t))
                if dt <= max_dt and (best is None or dt < best[0]):
                    best = (dt, int(order[k]))
        if best is not None:
            pairs.append((i, best[1]))
    return pairs


def compute_ate(est_ts, est_poses, gt_ts, gt_poses, align: str = "se3", max_dt: int | None = None) -> AteReport:
    """Translational ATE in cm after closed-form alignment of the estimate onto ground truth."""
    if align not in ("se3", "sim3"):
        raise ValueError("align must be 'se3' or 'sim3'")
    gt_ts = np.asarray(gt_ts, dtype=np.int64)
    if max_dt is None:
        period = int(np.median(np.diff(np.sort(gt_ts)))) if len(gt_ts) > 1 else 0
        max_dt = period // 2
    pairs = associate(est_ts, gt_ts, max_dt)
    if len(pairs) < 3:
        raise DataError(f"ATE needs at least 3 timestamp matches, got {len(pairs)}")
    P = np.stack([est_poses[i].trans for i, _ in pairs])
    Q = np.stack([gt_poses[j].trans for _, j in pairs])
    s, R, t = umeyama(P, Q, with_scale=align == "sim3")
    err = np.linalg.norm((s * P @ R.T + t) - Q, axis=1) * 100.0
    T = np.eye(4)
    T[:3, :3] = s * R
    T[:3, 3] = t
    return AteReport(float(np.sqrt(np.mean(err ** 2))), float(err.mean()), float(np.median(err)), T, s, len(pairs))


# ---------------------------------------------------------------- depth L1

def first_surface_depth(field, origins, dirs, near: float, far: float, n_coarse: int = 256):
    """Ray distance of the first +/- crossing of the field TSDF (nan when none)."""
    z = np.linspace(near, far, n_coarse)
    x = origins[:, None, :] + z[None, :, None] * dirs[:, None, :]
    s = field.tsdf(x.reshape(-1, 3)).reshape(len(dirs), n_coarse)
    cross = (s[:, :-1] > 0) & (s[:, 1:] <= 0)
    has = cross.any(1)
    i = np.argmax(cross, 1)
    rows = np.arange(len(dirs))
    sa, sb = s[rows, i], s[rows, i + 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(sa != sb, sa / (sa - sb), 0.0)
    d = z[i] + frac * (z[1] - z[0])
    return np.where(has, d, np.nan)


def render_depth(field, pose, intr, pixels, tr: float = 0.05, near: float = 0.05, far: float = 6.0,
                 m_strat: int = 24, m_surf: int = 8, n_coarse: int = 256):
    """Rendered z-depth per pixel: a dense pass locates the surface, then the
    usual depth-guided samples are composed with bell weights."""
    rays = make_rays(pose, intr, pixels)
    guess = first_surface_depth(field, rays.origins, rays.dirs, near, far, n_coarse)
    S = sample_rays(guess, tr, m_strat, m_surf, near, far, None)
    x = rays.points(S.z).reshape(-1, 3)
    s = field.tsdf(x).reshape(S.z.shape)
    b, _ = render_forward(S.z, S.valid, s, None, None, tr)
    dirs_c = intr.directions(pixels)
    return b.d_hat * dirs_c[:, 2]


def compute_depth_l1(field, poses, depths, intr, n_poses: int = 50, n_pixels: int = 500, seed: int = 0,
                     tr: float = 0.05, near: float = 0.05, far: float = 6.0) -> float:
    """Mean |rendered - ground-truth| z-depth (cm) over random valid pixels of random views."""
    if n_poses < 1 or len(poses) == 0:
        raise DataError("depth L1 needs at least one pose")
    rng = np.random.default_rng(seed)
    views = rng.choice(len(poses), size=n_poses, replace=len(poses) < n_poses)
    errs = []
    for k in views:
        d = depths[k]
        vv, uu = np.nonzero(np.isfinite(d) & (d > 0))
        if len(uu) == 0:
            continue
        pick = rng.choice(len(uu), size=min(n_pixels, len(uu)), replace=False)
        pix = np.stack([uu[pick], vv[pick]], 1).astype(float)
        rd = render_depth(field, poses[k], intr, pix, tr, near, far)
        errs.append(np.abs(rd - d[vv[pick], uu[pick]]))
    if not errs:
        raise DataError("no valid depth pixels in the sampled views")
    e = np.concatenate(errs)
    if not np.all(np.isfinite(e)):
        raise FloatingPointError("non-finite rendered depth")
    return float(np.mean(e) * 100.0)


# ---------------------------------------------------------------- meshes

def extract_mesh(field, resolution: int = 128, bounds=None, chunk: int = 262144):
    """Zero isosurface of the field TSDF by marching cubes on a regular grid.

    Returns (vertices, faces); both empty when the TSDF has no sign change.
    """
    if resolution < 3:
        raise ValueError("resolution too coarse for marching cubes (need >= 3)")
    lo, hi = (np.asarray(b, dtype=float) for b in (bounds or field.cfg.bounds))
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], 1)
    s = np.concatenate([field.tsdf(pts[i:i + chunk]) for i in range(0, len(pts), chunk)])
    vol = s.reshape(resolution, resolution, resolution)
    if vol.min() > 0 or vol.max() < 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    spacing = tuple((hi - lo) / (resolution - 1))
    verts, faces, _, _ = marching_cubes(vol, level=0.0, spacing=spacing)
    return verts + lo, faces.astype(np.int64)


def sample_mesh(verts, faces, n: int, rng) -> np.ndarray:
    if len(faces) == 0:
        return np.zeros((0, 3))
    tri = verts[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    if area.sum() <= 0:
        return tri[:, 0]
    k = rng.choice(len(faces), size=n, p=area / area.sum())
    a, b = rng.random(n), rng.random(n)
    flip = a + b > 1
    a[flip], b[flip] = 1 - a[flip], 1 - b[flip]
    t = tri[k]
    return t[:, 0] + a[:, None] * (t[:, 1] - t[:, 0]) + b[:, None] * (t[:, 2] - t[:, 0])


def sample_scene_surface(scene, n: int, rng, resolution: int = 96) -> np.ndarray:
    """Points on the analytic zero level set: marching cubes on the exact SDF, then projection."""
    lo, hi = scene.lo, scene.hi
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    vol = scene.sdf(np.stack([X.ravel(), Y.ravel(), Z.ravel()], 1)).reshape(X.shape)
    verts, faces, _, _ = marching_cubes(vol, 0.0, spacing=tuple((hi - lo) / (resolution - 1)))
    p = sample_mesh(verts + lo, faces, n, rng)
    for _ in range(3):
        p = p - scene.sdf(p)[:, None] * scene.normal(p)
    return p


def compute_mesh_metrics(verts, faces, scene, n_samples: int = 20000, seed: int = 0,
                         threshold: float = COMPLETION_THRESHOLD, gt_points=None) -> MeshReport:
    """Accuracy (mesh -> surface), completion (surface -> mesh) in cm and completion ratio in %."""
    rng = np.random.default_rng(seed)
    gt = gt_points if gt_points is not None else sample_scene_surface(scene, n_samples, rng)
    if len(faces) == 0:
        log.warning("empty mesh: accuracy undefined")
        return MeshReport(float("nan"), float("inf"), 0.0, accuracy_defined=False)
    mp = sample_mesh(np.asarray(verts, float), np.asarray(faces), n_samples, rng)
    acc = float(np.mean(np.abs(scene.sdf(mp)))) * 100.0
    dist, _ = cKDTree(mp).query(gt)
    return MeshReport(acc, float(dist.mean() * 100.0), float(np.mean(dist < threshold) * 100.0))
