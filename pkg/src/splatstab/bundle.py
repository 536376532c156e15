"""The pipeline's working set: aligned frames, depths, flows, poses, masks.

On disk a bundle is a directory:

    intrinsics.json
    frames/%06d.png
    depths/%06d.pfm          (invalid depth stored as 0)
    flows/%06d_%06d.flo      (flow from the first index to the second)
    masks/%06d.png           (optional; 255 = dynamic object)
    poses.json               (unstable trajectory, camera-to-world)
    poses_smooth.json        (optional ground-truth smooth trajectory)
    gyro.jsonl, ois.jsonl    (optional sensor logs)
    points.json              (optional sparse points + visibility)
    meta.json                (fps, pad)

Loading is all-or-nothing: every cross-file inconsistency raises before any
bundle state is handed out.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .fileio import FormatError
from .flow import FlowField
from .geometry import CameraIntrinsics, DepthMap
from .rolling_shutter import GyroLog, OisLog
from .trajectory import Trajectory

__all__ = ["VideoBundle", "save_bundle", "load_bundle"]


@dataclass
class VideoBundle:
    intrinsics: CameraIntrinsics
    frames: np.ndarray  # (T, H, W, 3) float in [0, 1]
    depths: list[DepthMap]
    trajectory: Trajectory
    flows: dict[tuple[int, int], FlowField] = field(default_factory=dict)
    masks: np.ndarray | None = None  # (T, H, W) bool, True = dynamic object
    trajectory_smooth: Trajectory | None = None
    cam_flows: dict[tuple[int, int], FlowField] = field(default_factory=dict)
    gyro: GyroLog | None = None
    ois: OisLog | None = None
    points: np.ndarray | None = None
    visibility: dict[int, list[int]] | None = None
    fps: float = 30.0
    pad: int = 0  # border added by extrapolation
    fill_masks: np.ndarray | None = None  # (T, H, W) uint8: 2 = original, 1 = propagated, 0 = replicated

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.validate()

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:3]

    def time_of(self, k: int) -> float:
        return k / self.fps

    def validate(self):
        t, h, w = self.frames.shape[:3]
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise FormatError("frames must be (T, H, W, 3)")
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise FormatError(
                f"frames are {w}x{h} but intrinsics.json says "
                f"{self.intrinsics.width}x{self.intrinsics.height}"
            )
        if len(self.depths) != t:
            raise FormatError(f"{t} frames but {len(self.depths)} depth maps")
        for k, d in enumerate(self.depths):
            if d.shape != (h, w):
                raise FormatError(f"depth {k} is {d.shape}, frames are {(h, w)}")
        if len(self.trajectory) != t:
            raise FormatError(f"{t} frames but {len(self.trajectory)} poses in poses.json")
        if self.trajectory_smooth is not None and len(self.trajectory_smooth) != t:
            raise FormatError("poses_smooth.json length differs from frame count")
        flow_shape = (h - 2 * self.pad, w - 2 * self.pad)  # flows stay on the original grid
        for (i, j), f in self.flows.items():
            if not (0 <= i < t and 0 <= j < t):
                raise FormatError(f"flow {i}->{j} references a missing frame")
            if f.shape != flow_shape:
                raise FormatError(f"flow {i}->{j} is {f.shape}, expected {flow_shape}")
        if self.masks is not None and self.masks.shape != (t, h, w):
            raise FormatError("mask stack shape differs from frames")

    def flow(self, i: int, j: int) -> FlowField | None:
        return self.flows.get((i, j))

    def original_window(self):
        """Slice selecting the original frame inside a padded bundle."""
        if self.pad == 0:
            return slice(None), slice(None)
        return slice(self.pad, -self.pad), slice(self.pad, -self.pad)


def save_bundle(bundle: VideoBundle, out_dir: str | os.PathLike) -> None:
    os.makedirs(out_dir, exist_ok=True)
    fileio.write_intrinsics(os.path.join(out_dir, "intrinsics.json"), bundle.intrinsics)
    frames_dir = os.path.join(out_dir, "frames")
    depths_dir = os.path.join(out_dir, "depths")
    flows_dir = os.path.join(out_dir, "flows")
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(depths_dir, exist_ok=True)
    os.makedirs(flows_dir, exist_ok=True)
    for k in range(bundle.frame_count):
        fileio.write_image(fileio.frame_path(frames_dir, k), bundle.frames[k])
        d = bundle.depths[k]
        fileio.write_pfm(fileio.depth_path(depths_dir, k), np.where(d.validity, d.values, 0.0))
    for (i, j), f in sorted(bundle.flows.items()):
        fileio.write_flo(fileio.flow_path(flows_dir, i, j), f.vectors)
    fileio.write_poses(os.path.join(out_dir, "poses.json"), bundle.trajectory.poses)
    if bundle.trajectory_smooth is not None:
        fileio.write_poses(os.path.join(out_dir, "poses_smooth.json"), bundle.trajectory_smooth.poses)
    if bundle.masks is not None:
        masks_dir = os.path.join(out_dir, "masks")
        os.makedirs(masks_dir, exist_ok=True)
        for k in range(bundle.frame_count):
            fileio.write_mask(fileio.mask_path(masks_dir, k), bundle.masks[k])
    if bundle.gyro is not None:
        fileio.write_gyro_log(os.path.join(out_dir, "gyro.jsonl"), bundle.gyro.to_samples())
    if bundle.ois is not None:
        fileio.write_ois_log(
            os.path.join(out_dir, "ois.jsonl"),
            [(t, o[0], o[1]) for t, o in zip(bundle.ois.times, bundle.ois.offsets)],
        )
    if bundle.points is not None:
        fileio.write_sparse_points(os.path.join(out_dir, "points.json"), bundle.points, bundle.visibility or {})
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump({"fps": bundle.fps, "pad": bundle.pad}, f)


def load_bundle(
    bundle_dir: str | os.PathLike,
    frames_dir: str | None = None,
    depths_dir: str | None = None,
    flows_dir: str | None = None,
    poses_file: str | None = None,
    intrinsics_file: str | None = None,
    masks_dir: str | None = None,
) -> VideoBundle:
    """Load and validate a bundle directory (individual paths can override
    the default layout). Raises FormatError naming the offending files."""
    bundle_dir = os.fspath(bundle_dir)
    frames_dir = frames_dir or os.path.join(bundle_dir, "frames")
    depths_dir = depths_dir or os.path.join(bundle_dir, "depths")
    flows_dir = flows_dir or os.path.join(bundle_dir, "flows")
    poses_file = poses_file or os.path.join(bundle_dir, "poses.json")
    intrinsics_file = intrinsics_file or os.path.join(bundle_dir, "intrinsics.json")

    intrinsics = fileio.read_intrinsics(intrinsics_file)
    frame_ids = fileio.list_frames(frames_dir)
    if not frame_ids:
        raise FormatError(f"no frames found in {frames_dir}")
    if frame_ids != list(range(len(frame_ids))):
        raise FormatError(f"{frames_dir}: frame indices must be contiguous from 0")

    frames = np.stack([fileio.read_image(fileio.frame_path(frames_dir, k)) for k in frame_ids])
    if frames.ndim == 3:  # grayscale input
        frames = np.repeat(frames[..., None], 3, axis=3)

    depths = []
    for k in frame_ids:
        path = fileio.depth_path(depths_dir, k)
        if not os.path.exists(path):
            raise FormatError(f"{frames_dir} has frame {k} but {path} is missing")
        depths.append(DepthMap(read_depth(path)))

    flows: dict[tuple[int, int], FlowField] = {}
    if os.path.isdir(flows_dir):
        for name in sorted(os.listdir(flows_dir)):
            if not name.endswith(".flo"):
                continue
            stem = name[:-4]
            try:
                i, j = (int(part) for part in stem.split("_"))
            except ValueError:
                raise FormatError(f"{flows_dir}/{name}: flow files must be named src_dst.flo") from None
            flows[(i, j)] = FlowField(fileio.read_flo(os.path.join(flows_dir, name)).astype(np.float64))

    poses = fileio.read_poses(poses_file)
    if len(poses) != len(frame_ids):
        raise FormatError(f"{poses_file} has {len(poses)} poses but {frames_dir} has {len(frame_ids)} frames")

    masks = None
    masks_dir = masks_dir or os.path.join(bundle_dir, "masks")
    if os.path.isdir(masks_dir):
        masks = np.stack([fileio.read_mask(fileio.mask_path(masks_dir, k)) for k in frame_ids])

    smooth = None
    smooth_path = os.path.join(bundle_dir, "poses_smooth.json")
    if os.path.exists(smooth_path):
        smooth = Trajectory(fileio.read_poses(smooth_path))

    gyro = None
    gyro_path = os.path.join(bundle_dir, "gyro.jsonl")
    if os.path.exists(gyro_path):
        gyro = GyroLog.from_samples(fileio.read_gyro_log(gyro_path))
    ois = None
    ois_path = os.path.join(bundle_dir, "ois.jsonl")
    if os.path.exists(ois_path):
        samples = fileio.read_ois_log(ois_path)
        ois = OisLog(np.array([s[0] for s in samples]), np.array([[s[1], s[2]] for s in samples]))

    points = None
    visibility = None
    points_path = os.path.join(bundle_dir, "points.json")
    if os.path.exists(points_path):
        points, visibility = fileio.read_sparse_points(points_path)

    fps = 30.0
    pad = 0
    meta_path = os.path.join(bundle_dir, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
        fps = float(meta.get("fps", fps))
        pad = int(meta.get("pad", pad))

    return VideoBundle(
        intrinsics=intrinsics,
        frames=frames,
        depths=depths,
        trajectory=Trajectory(poses),
        flows=flows,
        masks=masks,
        trajectory_smooth=smooth,
        gyro=gyro,
        ois=ois,
        points=points,
        visibility=visibility,
        fps=fps,
        pad=pad,
    )


def read_depth(path) -> np.ndarray:
    """PFM depth with nonpositive entries treated as invalid (left to DepthMap)."""
    return fileio.read_pfm(path).astype(np.float64)
