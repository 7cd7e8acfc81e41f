"""Write and read synthetic RGB-D + event sequences.

Directory layout::

    scene.json  traj_gt.txt  calib.txt  events.evs
    frames/000000.rgb.pfm  frames/000000.depth.pfm  ...
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import events as ev
from .fileio import DataError, parse_floats, read_kv, read_pfm, read_tum, write_kv, write_pfm, write_tum
from .lie import PoseSE3
from .world import (DARK_GAMMA, K_SUB, AnalyticScene, FramePacket, Intrinsics, Trajectory, degrade,
                    event_pose, render_intensity, render_view, subframe_poses)

log = logging.getLogger(__name__)

EXPOSURE = 5.21e-5


def _default_T_ec() -> np.ndarray:
    # event camera 6 cm right of the colour camera, yawed 3 degrees
    a = np.radians(3.0)
    R_ce = np.array([[np.cos(a), 0.0, np.sin(a)], [0.0, 1.0, 0.0], [-np.sin(a), 0.0, np.cos(a)]])
    c_e = np.array([0.06, 0.0, 0.0])
    T = np.eye(4)
    T[:3, :3] = R_ce.T
    T[:3, 3] = -R_ce.T @ c_e
    return T


@dataclass
class Rig:
    """Colour and event camera calibration plus sensor constants."""

    K: Intrinsics = field(default_factory=lambda: Intrinsics(120.0, 120.0, 80.0, 60.0, 160, 120))
    K_event: Intrinsics = field(default_factory=lambda: Intrinsics(100.0, 100.0, 64.0, 48.0, 128, 96))
    mini_size: tuple = (16, 12)
    T_ec: np.ndarray = field(default_factory=_default_T_ec)
    exposure_rgb: float = EXPOSURE
    exposure_event: float = EXPOSURE
    C: float = ev.DEFAULT_C
    B: float = ev.DEFAULT_B
    k_sub: int = K_SUB

    @property
    def K_mini(self) -> Intrinsics:
        return self.K_event.scaled(*self.mini_size)

    def to_kv(self) -> dict:
        return {"K": self.K.as_list(), "K_event": self.K_event.as_list(), "K_mini": self.K_mini.as_list(),
                "T_ec": self.T_ec, "exposure_rgb": self.exposure_rgb, "exposure_event": self.exposure_event,
                "C": self.C, "B": self.B, "k_sub": self.k_sub}

    @classmethod
    def from_kv(cls, kv: dict) -> "Rig":
        def intr(key):
            v = parse_floats(kv[key])
            return Intrinsics(*v[:4], int(v[4]), int(v[5]))
        try:
            mini = intr("K_mini")
            return cls(intr("K"), intr("K_event"), (mini.width, mini.height),
                       parse_floats(kv["T_ec"]).reshape(4, 4), float(kv["exposure_rgb"]),
                       float(kv["exposure_event"]), float(kv["C"]), float(kv["B"]), int(kv["k_sub"]))
        except KeyError as exc:
            raise DataError(f"calib.txt is missing {exc.args[0]!r}") from exc


@dataclass
class Sequence:
    rgb: np.ndarray
    depth: np.ndarray
    timestamps: np.ndarray
    gt_poses: list
    events: ev.EventStream
    rig: Rig
    scene: AnalyticScene | None = None
    mode: str = "normal"

    def __len__(self):
        return len(self.timestamps)


def simulate(scene: AnalyticScene, traj: Trajectory, rig: Rig, blur: bool = False):
    """Render every frame, its event-camera sub-frames and (for blur) colour sub-frames."""
    traj.check_inside(scene)
    frames, subframes, log_frames = [], [], []
    memory = None
    for i, pose in enumerate(traj.poses):
        t_i = int(traj.timestamps[i])
        rgb, depth = render_view(scene, pose, rig.K)
        subs = subframe_poses(traj, i, rig.k_sub)
        if i == 0:
            L0 = ev.linlog(render_intensity(scene, event_pose(pose, rig.T_ec), rig.K_event), rig.B)
            memory = ev.PixelMemory.from_frame(L0, t_i)
            log_frames.append((t_i, L0))
        else:
            t_prev = int(traj.timestamps[i - 1])
            for j, sp in enumerate(subs, 1):
                tj = t_prev + (t_i - t_prev) * j // rig.k_sub
                log_frames.append((tj, ev.linlog(render_intensity(scene, event_pose(sp, rig.T_ec), rig.K_event),
                                                 rig.B)))
        if blur:
            renders = [rgb if k == len(subs) - 1 or i == 0 else render_view(scene, sp, rig.K)[0]
                       for k, sp in enumerate(subs)]
            subframes.append(renders)
        frames.append(FramePacket(rgb, depth, t_i))
        log.debug("rendered frame %d", i)
    stream = ev.generate_events(log_frames, rig.C, memory, rig.B)
    return frames, (subframes if blur else None), stream, log_frames


def write_sequence(out: Path, scene: AnalyticScene, traj: Trajectory, rig: Rig, frames, stream, mode: str,
                   gamma: float = DARK_GAMMA) -> Path:
    out = Path(out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "scene.json").write_text(json.dumps(scene.to_dict(), indent=2, sort_keys=True) + "\n")
    write_tum(out / "traj_gt.txt", traj.timestamps, traj.poses)
    kv = rig.to_kv()
    kv.update({"fps": float(traj.frame_rate), "mode": mode, "gamma": gamma, "n_frames": len(frames)})
    write_kv(out / "calib.txt", kv, "eventfield calibration v1")
    for i, f in enumerate(frames):
        write_pfm(out / "frames" / f"{i:06d}.rgb.pfm", f.rgb)
        write_pfm(out / "frames" / f"{i:06d}.depth.pfm", f.depth)
    ev.write_stream(stream, out / "events.evs")
    return out


def make_sequence(scene: AnalyticScene, trajectory: Trajectory, modes, out_dir, rig: Rig | None = None,
                  gamma: float = DARK_GAMMA) -> dict[str, Path]:
    """Render once and write one dataset directory per mode under ``out_dir/<mode>``."""
    rig = rig or Rig()
    modes = [modes] if isinstance(modes, str) else list(modes)
    for m in modes:
        if m not in ("normal", "blur", "dark"):
            raise ValueError(f"unknown mode {m!r}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out_dir}: {exc}") from exc
    frames, subframes, stream, _ = simulate(scene, trajectory, rig, blur="blur" in modes)
    written = {}
    for m in modes:
        degraded = degrade(frames, m, gamma, subframes)
        written[m] = write_sequence(out_dir / m, scene, trajectory, rig, degraded, stream, m, gamma)
    return written


def load_sequence(path) -> Sequence:
    path = Path(path)
    if not (path / "calib.txt").exists():
        raise DataError(f"{path}: no calib.txt")
    kv = read_kv(path / "calib.txt")
    rig = Rig.from_kv(kv)
    ts, poses = read_tum(path / "traj_gt.txt")
    n = int(kv.get("n_frames", len(ts)))
    rgb = np.stack([read_pfm(path / "frames" / f"{i:06d}.rgb.pfm") for i in range(n)])
    depth = np.stack([read_pfm(path / "frames" / f"{i:06d}.depth.pfm") for i in range(n)])
    stream = ev.read_stream(path / "events.evs")
    scene = None
    if (path / "scene.json").exists():
        scene = AnalyticScene.from_dict(json.loads((path / "scene.json").read_text()))
    return Sequence(rgb, depth, ts[:n], poses[:n], stream, rig, scene, kv.get("mode", "normal"))
