"""Analytic SDF scenes, a sphere-tracing ground-truth renderer and camera paths."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import PoseSE3, interpolate, look_at, rotation_angle_deg

LUMA = np.array([0.2126, 0.7152, 0.0722])
SHADE_FLOOR = 0.35
K_SUB = 8
DARK_GAMMA = 0.05


@dataclass
class Primitive:
    """Base SDF primitive with an albedo and an optional 3-D checker texture."""

    albedo: tuple = (0.7, 0.7, 0.7)
    checker: float = 0.0
    albedo2: tuple = (0.3, 0.3, 0.3)

    def albedo_at(self, x: np.ndarray) -> np.ndarray:
        a = np.broadcast_to(np.asarray(self.albedo, dtype=float), x.shape).copy()
        if self.checker > 0:
            parity = np.floor(x / self.checker).astype(np.int64).sum(axis=1) % 2 == 1
            a[parity] = np.asarray(self.albedo2, dtype=float)
        return a

    def to_dict(self) -> dict:
        d = {k: (list(v) if isinstance(v, (tuple, np.ndarray)) else v) for k, v in self.__dict__.items()}
        d["kind"] = type(self).__name__.lower()
        return d


@dataclass
class Sphere(Primitive):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5

    def sdf(self, x):
        r = x - np.asarray(self.center)
        return np.sqrt(np.einsum("...i,...i->...", r, r)) - self.radius

    def intersect(self, o, d):
        oc = o - np.asarray(self.center)
        b = np.sum(oc * d, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - c
        t = -b - np.sqrt(np.maximum(disc, 0.0))
        return np.where((disc >= 0) & (t > 0), t, np.inf)


@dataclass
class Box(Primitive):
    """Axis-aligned box; ``inverted`` makes the inside the free space (a room)."""

    center: tuple = (0.0, 0.0, 0.0)
    half_size: tuple = (0.5, 0.5, 0.5)
    inverted: bool = False

    def sdf(self, x):
        q = np.abs(x - np.asarray(self.center)) - np.asarray(self.half_size)
        m = np.maximum(q, 0.0)
        outside = np.sqrt(np.einsum("...i,...i->...", m, m))
        inside = np.minimum(q.max(axis=-1), 0.0)
        s = outside + inside
        return -s if self.inverted else s

    def intersect(self, o, d):
        lo = np.asarray(self.center) - np.asarray(self.half_size)
        hi = np.asarray(self.center) + np.asarray(self.half_size)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        if self.inverted:
            return np.where(tmax > 0, tmax, np.inf)
        return np.where((tmax >= tmin) & (tmin > 0), tmin, np.inf)


@dataclass
class Plane(Primitive):
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)

    def _n(self):
        n = np.asarray(self.normal, dtype=float)
        return n / np.linalg.norm(n)

    def sdf(self, x):
        return (x - np.asarray(self.point)) @ self._n()

    def intersect(self, o, d):
        n = self._n()
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(self.point) - o) @ n) / denom
        return np.where((denom < 0) & (t > 0), t, np.inf)


_KINDS = {"sphere": Sphere, "box": Box, "plane": Plane}


def primitive_from_dict(d: dict) -> Primitive:
    d = dict(d)
    cls = _KINDS[d.pop("kind")]
    return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> "Intrinsics":
        sx, sy = width / self.width, height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    def pixel_grid(self) -> np.ndarray:
        v, u = np.mgrid[0:self.height, 0:self.width]
        return np.stack([u.ravel(), v.ravel()], axis=1).astype(float)

    def directions(self, pixels) -> np.ndarray:
        """Unit camera-frame directions through pixel centres (pixel (u, v) sits at u, v)."""
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        d = np.stack([(pixels[:, 0] - self.cx) / self.fx, (pixels[:, 1] - self.cy) / self.fy,
                      np.ones(len(pixels))], axis=1)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def as_list(self) -> list[float]:
        return [self.fx, self.fy, self.cx, self.cy, self.width, self.height]


@dataclass
class AnalyticScene:
    primitives: list
    ambient_level: float = 1.0
    bounds: tuple = ((-2.0, -2.0, 0.0), (2.0, 2.0, 3.0))
    light_dir: tuple = (0.3, -0.5, 0.8)

    @property
    def lo(self):
        return np.asarray(self.bounds[0], dtype=float)

    @property
    def hi(self):
        return np.asarray(self.bounds[1], dtype=float)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def sdf(self, x: np.ndarray) -> np.ndarray:
        out = self.primitives[0].sdf(x)
        for p in self.primitives[1:]:
            out = np.minimum(out, p.sdf(x))
        return out

    def sdf_and_index(self, x):
        vals = np.stack([p.sdf(x) for p in self.primitives])
        idx = np.argmin(vals, axis=0)
        return np.take_along_axis(vals, idx[None], 0)[0], idx

    def normal(self, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
        g = np.zeros_like(x)
        for k in range(3):
            e = np.zeros(3)
            e[k] = eps
            g[:, k] = self.sdf(x + e) - self.sdf(x - e)
        return g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)

    def radiance(self, x: np.ndarray) -> np.ndarray:
        """Linear RGB leaving the surface nearest to each point (before clipping)."""
        s, idx = self.sdf_and_index(x)
        n = self.normal(x)
        xs = x - s[:, None] * n
        light = np.asarray(self.light_dir, dtype=float)
        light = light / np.linalg.norm(light)
        shade = SHADE_FLOOR + (1 - SHADE_FLOOR) * np.clip(n @ light, 0.0, None)
        albedo = np.zeros_like(x)
        for k, p in enumerate(self.primitives):
            m = idx == k
            if m.any():
                albedo[m] = p.albedo_at(xs[m])
        return albedo * shade[:, None] * self.ambient_level

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def intersect(self, o, d) -> np.ndarray:
        """Closed-form first hit distance (oracle for the sphere tracer)."""
        return np.min(np.stack([p.intersect(o, d) for p in self.primitives]), axis=0)

    def to_dict(self) -> dict:
        return {"primitives": [p.to_dict() for p in self.primitives], "ambient_level": self.ambient_level,
                "bounds": [list(self.bounds[0]), list(self.bounds[1])], "light_dir": list(self.light_dir)}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticScene":
        return cls([primitive_from_dict(p) for p in d["primitives"]], d["ambient_level"],
                   (tuple(d["bounds"][0]), tuple(d["bounds"][1])), tuple(d["light_dir"]))


def _exit_distance(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    return np.nanmin(np.maximum(t1, t2), axis=-1)


def sphere_trace(scene: AnalyticScene, origins, dirs, eps: float = 2e-4, max_steps: int = 256,
                 newton_steps: int = 3):
    """March along rays by the SDF value; returns hit distance (inf on miss).

    Marching stops at ``eps``; the root is then polished with Newton steps on
    the SDF restricted to the ray.
    """
    n = len(dirs)
    origins = np.broadcast_to(origins, dirs.shape)
    t = np.zeros(n)
    t_max = _exit_distance(origins, dirs, scene.lo, scene.hi)
    hit = np.full(n, np.inf)
    active = np.flatnonzero(t_max > 0)
    for _ in range(max_steps):
        if active.size == 0:
            break
        x = origins[active] + t[active, None] * dirs[active]
        s = scene.sdf(x)
        done = s < eps
        hit[active[done]] = t[active[done]]
        t[active] += np.where(done, 0.0, s)
        active = active[~done & (t[active] < t_max[active])]
    ok = np.flatnonzero(np.isfinite(hit))
    h = 1e-5
    for _ in range(newton_steps):
        x = origins[ok] + hit[ok, None] * dirs[ok]
        s = scene.sdf(x)
        ds = (scene.sdf(x + h * dirs[ok]) - scene.sdf(x - h * dirs[ok])) / (2 * h)
        step = np.where(ds < -1e-3, -s / np.where(ds < -1e-3, ds, -1.0), 0.0)
        hit[ok] += np.clip(step, -10 * eps, 10 * eps)
    return hit


@dataclass
class FramePacket:
    rgb: np.ndarray
    depth: np.ndarray
    timestamp: int
    intensity: np.ndarray | None = None


def luma(rgb: np.ndarray) -> np.ndarray:
    return rgb @ LUMA


def render_view(scene: AnalyticScene, pose: PoseSE3, intr: Intrinsics):
    """Sphere-trace a full view; returns (rgb HxWx3, z-depth HxW with 0 = invalid)."""
    dirs_c = intr.directions(intr.pixel_grid())
    dirs = dirs_c @ pose.rotation.T
    t = sphere_trace(scene, pose.trans, dirs)
    valid = np.isfinite(t)
    rgb = np.zeros((len(t), 3))
    if valid.any():
        x = pose.trans + t[valid, None] * dirs[valid]
        rgb[valid] = np.clip(scene.radiance(x), 0.0, 1.0)
    depth = np.where(valid, np.where(valid, t, 0.0) * dirs_c[:, 2], 0.0)
    return rgb.reshape(intr.height, intr.width, 3), depth.reshape(intr.height, intr.width)


def render_ground_truth(scene: AnalyticScene, pose: PoseSE3, intrinsics: Intrinsics,
                        timestamp: int = 0, event_intrinsics: Intrinsics | None = None,
                        T_ec: np.ndarray | None = None) -> FramePacket:
    """Render RGB-D for the colour camera and, optionally, event-camera intensity."""
    if not scene.contains(pose.trans):
        raise ValueError("camera position outside scene bounds")
    rgb, depth = render_view(scene, pose, intrinsics)
    intensity = None
    if event_intrinsics is not None:
        intensity = render_intensity(scene, event_pose(pose, T_ec), event_intrinsics)
    return FramePacket(rgb, depth, timestamp, intensity)


def render_intensity(scene, pose_e: PoseSE3, intr_e: Intrinsics) -> np.ndarray:
    rgb, _ = render_view(scene, pose_e, intr_e)
    return luma(rgb) * 255.0


def event_pose(pose_c: PoseSE3, T_ec: np.ndarray | None) -> PoseSE3:
    """World pose of the event camera given the colour pose and T_ec (colour -> event coords)."""
    if T_ec is None:
        return pose_c
    return PoseSE3.from_matrix(pose_c.matrix() @ np.linalg.inv(T_ec))


def degrade(frames: list[FramePacket], mode: str, gamma: float = DARK_GAMMA,
            subframes: list[list[np.ndarray]] | None = None) -> list[FramePacket]:
    """Apply a capture degradation to RGB only; depth and event intensity pass through.

    ``blur`` replaces each RGB image by the mean of its sub-frame renders.
    ``dark`` scales by ``gamma`` and quantises to 8 bits.
    """
    if mode not in ("normal", "blur", "dark"):
        raise ValueError(f"unknown degradation mode {mode!r}")
    if mode == "normal":
        return list(frames)
    if mode == "dark":
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        return [FramePacket(np.round(np.clip(f.rgb * gamma, 0, 1) * 255.0) / 255.0, f.depth, f.timestamp,
                            f.intensity) for f in frames]
    if subframes is None or len(subframes) != len(frames):
        raise ValueError("blur needs one list of sub-frame renders per frame")
    return [FramePacket(np.mean(np.stack(s), axis=0), f.depth, f.timestamp, f.intensity)
            for f, s in zip(frames, subframes)]


@dataclass
class Trajectory:
    timestamps: np.ndarray  # int nanoseconds
    poses: list
    frame_rate: float = 30.0

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        for i in range(1, len(self.poses)):
            if rotation_angle_deg(self.poses[i - 1], self.poses[i]) >= 30.0:
                raise ValueError(f"rotation step of 30 degrees or more at pose {i}")

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.stack([p.trans for p in self.poses])

    def check_inside(self, scene: AnalyticScene, clearance: float = 0.05) -> None:
        for i, p in enumerate(self.poses):
            if not scene.contains(p.trans) or scene.sdf(p.trans[None])[0] < clearance:
                raise ValueError(f"trajectory pose {i} lies outside the free space of the scene")


def default_scene(ambient_level: float = 1.0) -> AnalyticScene:
    """A 4 m x 4 m x 3 m room with textured walls and four objects."""
    room = Box(albedo=(0.85, 0.8, 0.7), checker=0.5, albedo2=(0.45, 0.5, 0.6),
               center=(0.0, 0.0, 1.5), half_size=(2.0, 2.0, 1.5), inverted=True)
    prims = [
        room,
        Box(albedo=(0.75, 0.45, 0.25), center=(0.9, 1.1, 0.4), half_size=(0.5, 0.4, 0.4)),
        Sphere(albedo=(0.3, 0.7, 0.35), checker=0.2, albedo2=(0.8, 0.85, 0.4), center=(-0.9, 1.0, 0.6), radius=0.45),
        Box(albedo=(0.35, 0.4, 0.8), checker=0.25, albedo2=(0.85, 0.85, 0.9), center=(-1.2, -1.2, 0.75),
            half_size=(0.3, 0.3, 0.75)),
        Sphere(albedo=(0.9, 0.3, 0.3), center=(1.1, -1.0, 1.3), radius=0.3),
    ]
    return AnalyticScene(prims, ambient_level, ((-2.05, -2.05, -0.05), (2.05, 2.05, 3.05)))


def default_trajectory(n_frames: int = 60, fps: float = 30.0, speed: float = 1.0) -> Trajectory:
    """Smooth orbit-like path near the room centre looking outward at the objects."""
    ts = np.round(np.arange(n_frames) * 1e9 / fps).astype(np.int64)
    poses = []
    for t in ts / 1e9:
        a = speed * 0.45 * t
        eye = np.array([0.35 * np.cos(a) - 0.1, 0.35 * np.sin(a), 1.3 + 0.08 * np.sin(2.3 * a)])
        yaw = 1.2 + speed * 0.35 * t
        target = eye + np.array([np.cos(yaw), np.sin(yaw), -0.35 + 0.05 * np.cos(1.7 * a)])
        poses.append(look_at(eye, target))
    return Trajectory(ts, poses, fps)


def subframe_poses(traj: Trajectory, i: int, k_sub: int = K_SUB) -> list[PoseSE3]:
    """The ``k_sub`` poses covering the interval ending at frame ``i`` (last one is the frame pose)."""
    if i == 0:
        return [traj.poses[0]] * k_sub
    return interpolate(traj.poses[i - 1], traj.poses[i], np.arange(1, k_sub + 1) / k_sub)
