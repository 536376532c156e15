"""Command-line interface.

Subcommands: synth, rs-remove, align-scale, stabilize, render, metrics.
Global flags: --seed, --threads, --config FILE (key=value lines override any
flag; keys use the flag name with dashes or underscores).

Exit codes: 0 success, 1 input error (missing/malformed files, bad
arguments), 2 numerical failure (divergence, degenerate geometry).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import fileio
from .bundle import load_bundle, save_bundle
from .fileio import FormatError
from .metrics import (
    MetricReport,
    TrackSet,
    cropping_ratio,
    distortion,
    gc_dense,
    gc_sparse,
    stability,
)
from .optimize import OptimConfig
from .pipeline import stabilize
from .rolling_shutter import GyroLog, OisLog, rs_remove_frame
from .scale_align import align_frames
from .splat import load_scene, render, save_scene
from .synth import default_spec, generate, spec_from_json
from .trajectory import Trajectory

__all__ = ["main"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatstab", description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--config", type=str, default=None, help="key=value file overriding any flag")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic ground-truth bundle")
    p.add_argument("--spec", type=str, default=None, help="scene spec JSON (defaults to the built-in scene)")
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("rs-remove", help="remove rolling-shutter and OIS distortion")
    p.add_argument("--frames", type=str, required=True)
    p.add_argument("--gyro", type=str, required=True)
    p.add_argument("--ois", type=str, required=True)
    p.add_argument("--intrinsics", type=str, required=True)
    p.add_argument("--block", type=int, default=32)
    p.add_argument("--readout-ms", type=float, required=True)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("align-scale", help="RANSAC depth-scale alignment")
    p.add_argument("--depths", type=str, required=True)
    p.add_argument("--points", type=str, required=True)
    p.add_argument("--poses", type=str, required=True)
    p.add_argument("--intrinsics", type=str, required=True)

    p = sub.add_parser("stabilize", help="full stabilization pipeline")
    p.add_argument("--frames", type=str, required=True)
    p.add_argument("--depths", type=str, required=True)
    p.add_argument("--flows", type=str, required=True)
    p.add_argument("--poses", type=str, required=True)
    p.add_argument("--intrinsics", type=str, required=True)
    p.add_argument("--masks", type=str, default=None)
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--window", type=str, default="auto", help="odd smoothing window or 'auto'")
    p.add_argument("--pad", type=int, default=96)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("render", help="render a scene dump at a pose")
    p.add_argument("--scene", type=str, required=True)
    p.add_argument("--pose", type=str, required=True)
    p.add_argument("--frame", type=int, default=None, help="frame index when --pose is a trajectory")
    p.add_argument("--intrinsics", type=str, required=True)
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("metrics", help="evaluation metrics")
    p.add_argument("--mode", choices=["cr", "d", "s", "gcs", "gcd"], required=True)
    p.add_argument("--masks", type=str, default=None, help="validity masks (cr) or dynamic masks (gcd)")
    p.add_argument("--corr", type=str, default=None, help="per-frame correspondences JSON (d)")
    p.add_argument("--tracks", type=str, default=None, help="track file JSON (s)")
    p.add_argument("--points", type=str, default=None, help="points + observations JSON (gcs)")
    p.add_argument("--frames", type=str, default=None)
    p.add_argument("--scenes", type=str, default=None, help="directory of scene dumps (gcd)")
    p.add_argument("--poses", type=str, default=None)
    p.add_argument("--intrinsics", type=str, default=None)
    p.add_argument("--interval", type=int, default=8)
    p.add_argument("--out", type=str, default=None)
    return parser


def apply_config_overrides(args: argparse.Namespace, path: str) -> None:
    """key=value lines override parsed flags (config wins)."""
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if not hasattr(args, key):
                raise FormatError(f"{path}:{lineno}: unknown option {key!r}")
            current = getattr(args, key)
            if isinstance(current, bool):
                value = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
            setattr(args, key, value)


# ---------------------------------------------------------------------------
# subcommand implementations


def cmd_synth(args) -> int:
    spec = spec_from_json(args.spec) if args.spec else default_spec()
    if args.seed:
        spec.seed = args.seed
        spec.jitter.seed = args.seed
    bundle = generate(spec)
    save_bundle(bundle, args.out)
    print(f"wrote bundle with {bundle.frame_count} frames to {args.out}")
    return 0


def cmd_rs_remove(args) -> int:
    intrinsics = fileio.read_intrinsics(args.intrinsics)
    gyro = GyroLog.from_samples(fileio.read_gyro_log(args.gyro))
    samples = fileio.read_ois_log(args.ois)
    ois = OisLog(np.array([s[0] for s in samples]), np.array([[s[1], s[2]] for s in samples]))
    frame_ids = fileio.list_frames(args.frames)
    if not frame_ids:
        raise FormatError(f"no frames found in {args.frames}")
    os.makedirs(args.out, exist_ok=True)
    masks_dir = os.path.join(args.out, "masks")
    os.makedirs(masks_dir, exist_ok=True)
    for k in frame_ids:
        frame = fileio.read_image(fileio.frame_path(args.frames, k))
        out, valid, _ = rs_remove_frame(
            frame, gyro, ois, intrinsics,
            block_size=args.block, readout_s=args.readout_ms / 1000.0, t_frame=k / args.fps,
        )
        fileio.write_image(fileio.frame_path(args.out, k), out)
        fileio.write_mask(fileio.mask_path(masks_dir, k), valid)
    print(f"corrected {len(frame_ids)} frames into {args.out}")
    return 0


def cmd_align_scale(args) -> int:
    intrinsics = fileio.read_intrinsics(args.intrinsics)
    poses = Trajectory(fileio.read_poses(args.poses))
    points, visibility = fileio.read_sparse_points(args.points)
    from .bundle import read_depth
    from .geometry import DepthMap

    depths = []
    for k in range(len(poses)):
        path = fileio.depth_path(args.depths, k)
        if not os.path.exists(path):
            raise FormatError(f"{args.poses} has pose {k} but {path} is missing")
        depths.append(DepthMap(read_depth(path)))
    est = align_frames(depths, points, visibility, poses, intrinsics, seed=args.seed)
    print(json.dumps({"per_frame": est.per_frame_scales, "alpha_star": est.scale,
                      "inliers": est.inlier_count, "seed": args.seed}))
    return 0


def cmd_stabilize(args) -> int:
    bundle = load_bundle(
        os.path.dirname(os.path.abspath(args.frames)),
        frames_dir=args.frames,
        depths_dir=args.depths,
        flows_dir=args.flows,
        poses_file=args.poses,
        intrinsics_file=args.intrinsics,
        masks_dir=args.masks,
    )
    window = None if args.window == "auto" else int(args.window)
    cfg = OptimConfig(epochs=args.epochs, steps_per_epoch=args.steps, seed=args.seed,
                      dilation_schedule=tuple(range(0, 2 * args.epochs, 2)))
    result = stabilize(bundle, sigma=args.sigma, window=window, pad=args.pad, cfg=cfg, threads=args.threads)
    os.makedirs(args.out, exist_ok=True)
    frames_dir = os.path.join(args.out, "frames")
    masks_dir = os.path.join(args.out, "masks")
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)
    for k in range(bundle.frame_count):
        fileio.write_image(fileio.frame_path(frames_dir, k), result.frames[k])
        fileio.write_mask(fileio.mask_path(masks_dir, k), result.validity[k])
    fileio.write_poses(os.path.join(args.out, "poses_smooth.json"), result.trajectory_smooth.poses)
    with open(os.path.join(args.out, "losses.jsonl"), "w") as f:
        for h in result.history:
            f.write(h.to_json() + "\n")
    scenes_dir = os.path.join(args.out, "scenes")
    os.makedirs(scenes_dir, exist_ok=True)
    for k, scene in enumerate(result.scenes):
        save_scene(os.path.join(scenes_dir, "%06d.gavs" % k), scene)
    print(f"stabilized {bundle.frame_count} frames into {args.out}")
    return 0


def cmd_render(args) -> int:
    scene = load_scene(args.scene)
    pose = fileio.read_single_pose(args.pose, args.frame)
    intrinsics = fileio.read_intrinsics(args.intrinsics)
    out = render(scene, intrinsics, pose)
    fileio.write_image(args.out, out.color)
    return 0


def _read_tracks(path) -> TrackSet:
    with open(path) as f:
        records = json.load(f)
    tracks = []
    for rec in records:
        pts = [[np.nan, np.nan] if p is None else p for p in rec["points"]]
        tracks.append(np.asarray(pts, dtype=np.float64))
    return TrackSet(tracks)


def cmd_metrics(args) -> int:
    report = MetricReport()
    if args.mode == "cr":
        if not args.masks:
            raise FormatError("--mode cr requires --masks")
        ids = sorted(int(n[:-4]) for n in os.listdir(args.masks) if n.endswith(".png"))
        masks = np.stack([fileio.read_mask(fileio.mask_path(args.masks, k)) for k in ids])
        report.cropping_ratio = cropping_ratio(masks)
    elif args.mode == "d":
        if not args.corr:
            raise FormatError("--mode d requires --corr")
        with open(args.corr) as f:
            frames = json.load(f)
        src = [np.asarray(fr["src"], dtype=np.float64) for fr in frames]
        dst = [np.asarray(fr["dst"], dtype=np.float64) for fr in frames]
        report.distortion, _ = distortion(src, dst)
    elif args.mode == "s":
        if not args.tracks:
            raise FormatError("--mode s requires --tracks")
        report.stability = stability(_read_tracks(args.tracks))
    elif args.mode == "gcs":
        if not (args.points and args.poses and args.intrinsics):
            raise FormatError("--mode gcs requires --points, --poses, --intrinsics")
        with open(args.points) as f:
            data = json.load(f)
        points = np.asarray(data["points"], dtype=np.float64)
        observations = {
            int(k): [(int(i), np.asarray(uv, dtype=np.float64)) for i, uv in v]
            for k, v in data["observations"].items()
        }
        poses = Trajectory(fileio.read_poses(args.poses))
        intrinsics = fileio.read_intrinsics(args.intrinsics)
        report.gc_sparse = gc_sparse(points, observations, poses, intrinsics)
    elif args.mode == "gcd":
        if not (args.frames and args.scenes and args.poses and args.intrinsics):
            raise FormatError("--mode gcd requires --frames, --scenes, --poses, --intrinsics")
        ids = fileio.list_frames(args.frames)
        frames = np.stack([fileio.read_image(fileio.frame_path(args.frames, k)) for k in ids])
        scenes = [load_scene(os.path.join(args.scenes, "%06d.gavs" % k)) for k in ids]
        poses = Trajectory(fileio.read_poses(args.poses))
        intrinsics = fileio.read_intrinsics(args.intrinsics)
        masks = None
        if args.masks:
            masks = np.stack([fileio.read_mask(fileio.mask_path(args.masks, k)) for k in ids])
        report.gc_dense = gc_dense(frames, scenes, poses, intrinsics, masks, interval=args.interval)
    payload = report.to_json()
    print(payload)
    if args.out:
        with open(args.out, "w") as f:
            f.write(payload + "\n")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "rs-remove": cmd_rs_remove,
    "align-scale": cmd_align_scale,
    "stabilize": cmd_stabilize,
    "render": cmd_render,
    "metrics": cmd_metrics,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            apply_config_overrides(args, args.config)
        return COMMANDS[args.command](args)
    except (FormatError, FileNotFoundError, NotADirectoryError, json.JSONDecodeError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"input error: {e}", file=sys.stderr)
        return 1
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
