"""Command line: dataset generation, runs and evaluation.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import events as ev
from .dataset import Rig, load_sequence, make_sequence, simulate
from .events import EventFormatError
from .field import SceneField
from .fileio import ConfigError, DataError, read_kv, read_ply, read_tum, write_ply
from .metrics import compute_ate, compute_depth_l1, compute_mesh_metrics, extract_mesh
from .slam import RunConfig, run_sequence
from .world import AnalyticScene, Trajectory, default_scene, default_trajectory

log = logging.getLogger("eventfield")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
GEN_REQUIRED = ("n_frames", "fps", "modes")
GEN_DEFAULTS = {"n_frames": "60", "fps": "30", "modes": "normal blur dark", "speed": "1.0", "gamma": "0.05",
                "ambient": "1.0", "scene": "default"}


def _gen_settings(path) -> dict:
    if path is None:
        return dict(GEN_DEFAULTS)
    kv = read_kv(path)
    for key in GEN_REQUIRED:
        if key not in kv:
            raise ConfigError(f"{path}: missing configuration key {key!r}")
    unknown = set(kv) - set(GEN_DEFAULTS)
    if unknown:
        raise ConfigError(f"{path}: unknown configuration key {sorted(unknown)[0]!r}")
    return {**GEN_DEFAULTS, **kv}


def cmd_gen(args) -> int:
    cfg = _gen_settings(args.config)
    try:
        n, fps = int(cfg["n_frames"]), float(cfg["fps"])
        speed, gamma, ambient = float(cfg["speed"]), float(cfg["gamma"]), float(cfg["ambient"])
    except ValueError as exc:
        raise ConfigError(f"bad numeric value in generator configuration: {exc}") from exc
    modes = [args.mode] if args.mode else cfg["modes"].replace(",", " ").split()
    if cfg["scene"] == "default":
        scene = default_scene(ambient)
    else:
        scene = AnalyticScene.from_dict(json.loads(Path(cfg["scene"]).read_text()))
    traj = default_trajectory(n, fps, speed)
    out = Path(args.out or "dataset")
    written = make_sequence(scene, traj, modes, out, Rig(), gamma)
    for m, p in written.items():
        print(f"{m}\t{p}")
    return EXIT_OK


def _resolve_dataset(path, mode) -> Path:
    p = Path(path)
    if mode and (p / mode / "calib.txt").exists():
        return p / mode
    return p


def cmd_run(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = int(args.seed)
    ds = _resolve_dataset(args.dataset, args.mode)
    out = Path(args.out or "run")
    slam = run_sequence(ds, cfg, out)
    print(f"wrote {len(slam.trajectory_)} poses to {out / 'traj_est.txt'}")
    if slam.flagged_frames_:
        print(f"flagged frames: {slam.flagged_frames_}")
    return EXIT_OK


def cmd_ate(args) -> int:
    ts_e, est = read_tum(args.estimate)
    ts_g, gt = read_tum(args.groundtruth)
    rep = compute_ate(ts_e, est, ts_g, gt, args.align)
    print(json.dumps(rep.as_dict(), sort_keys=True))
    return EXIT_OK


def cmd_depth_l1(args) -> int:
    field = SceneField.load(args.checkpoint)
    seq = load_sequence(_resolve_dataset(args.dataset, args.mode))
    far = float(np.linalg.norm(np.subtract(field.cfg.bounds[1], field.cfg.bounds[0])))
    val = compute_depth_l1(field, seq.gt_poses, seq.depth, seq.rig.K, args.n_poses, args.n_pixels,
                           args.seed or 0, args.tr, far=far)
    print(json.dumps({"depth_l1_cm": val}))
    return EXIT_OK


def cmd_mesh(args) -> int:
    field = SceneField.load(args.checkpoint)
    verts, faces = extract_mesh(field, args.resolution)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_ply(out / "mesh.ply", verts, faces)
    print(f"{len(verts)} vertices, {len(faces)} faces -> {out / 'mesh.ply'}")
    return EXIT_OK


def _load_scene(path) -> AnalyticScene:
    p = Path(path)
    if p.is_dir():
        p = p / "scene.json"
    try:
        return AnalyticScene.from_dict(json.loads(p.read_text()))
    except (KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{p}: not a scene description") from exc


def cmd_mesh_metrics(args) -> int:
    verts, faces = read_ply(args.mesh)
    rep = compute_mesh_metrics(verts, faces, _load_scene(args.scene), args.n_samples, args.seed or 0)
    print(json.dumps({"accuracy_cm": rep.accuracy, "completion_cm": rep.completion,
                      "completion_ratio": rep.completion_ratio, "accuracy_defined": rep.accuracy_defined}))
    return EXIT_OK


def cmd_events_simulate(args) -> int:
    ds = _resolve_dataset(args.dataset, args.mode)
    scene = _load_scene(ds)
    rig = Rig.from_kv(read_kv(ds / "calib.txt"))
    ts, poses = read_tum(ds / "traj_gt.txt")
    fps = float(read_kv(ds / "calib.txt").get("fps", 30.0))
    _, _, stream, _ = simulate(scene, Trajectory(ts, poses, fps), rig)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    ev.write_stream(stream, out / "events.evs")
    print(f"{len(stream)} events -> {out / 'events.evs'}")
    return EXIT_OK


def cmd_events_dump(args) -> int:
    stream = ev.read_stream(args.file)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("u", "v", "t", "p"))
    rec = stream.records if args.limit is None else stream.records[:args.limit]
    for r in rec:
        w.writerow((int(r["u"]), int(r["v"]), int(r["t"]), int(r["p"])))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory")
    common.add_argument("--mode", choices=("normal", "blur", "dark"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="eventfield", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], help="render a synthetic dataset")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("run", parents=[common], help="track and map a dataset")
    s.add_argument("dataset")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("ate", parents=[common], help="absolute trajectory error")
    s.add_argument("estimate")
    s.add_argument("groundtruth")
    s.add_argument("--align", choices=("se3", "sim3"), default="se3")
    s.set_defaults(func=cmd_ate)

    s = sub.add_parser("depth-l1", parents=[common], help="rendered depth error of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--n-poses", type=int, default=50)
    s.add_argument("--n-pixels", type=int, default=500)
    s.add_argument("--tr", type=float, default=0.05)
    s.set_defaults(func=cmd_depth_l1)

    s = sub.add_parser("mesh", parents=[common], help="marching-cubes mesh of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--resolution", type=int, default=128)
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("mesh-metrics", parents=[common], help="accuracy / completion against the scene")
    s.add_argument("mesh")
    s.add_argument("scene", help="scene.json or a dataset directory")
    s.add_argument("--n-samples", type=int, default=20000)
    s.set_defaults(func=cmd_mesh_metrics)

    s = sub.add_parser("events", help="event stream tools")
    esub = s.add_subparsers(dest="events_command", required=True)
    e = esub.add_parser("simulate", parents=[common], help="re-simulate events for a dataset")
    e.add_argument("dataset")
    e.set_defaults(func=cmd_events_simulate)
    e = esub.add_parser("dump", parents=[common], help="print events as CSV")
    e.add_argument("file")
    e.add_argument("--limit", type=int, default=None)
    e.set_defaults(func=cmd_events_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EventFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
