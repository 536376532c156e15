"""File-format codecs used by the pipeline.

Formats:

* Depth: PFM, grayscale "Pf", little-endian float32, bottom-up scanlines,
  scale-field sign encodes endianness.
* Flow: Middlebury .flo, magic "PIEH", int32 width/height, interleaved
  float32 (u, v) row-major.
* Frames: 8-bit PNG, converted to linear float in [0, 1] (no gamma
  handling; consistent in both directions).
* Masks: grayscale PNG, 255 = valid.
* Poses: JSON array of {"frame": k, "q": [w,x,y,z], "t": [x,y,z]},
  camera-to-world, frames contiguous from 0.
* Intrinsics: JSON object {fx, fy, cx, cy, width, height}.
* Gyro log: JSON lines {"t": seconds, "q": [w,x,y,z]}.
* OIS log: JSON lines {"t": seconds, "dx": px, "dy": px}.
* Sparse points: JSON {"points": [[x,y,z], ...], "visibility": {frame: [idx, ...]}}.
"""

from __future__ import annotations

import json
import os
import re
import struct

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Pose

FLO_MAGIC = b"PIEH"


class FormatError(ValueError):
    """Raised for malformed or inconsistent input files."""


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path: str | os.PathLike, values: np.ndarray) -> None:
    """Write a single-channel float32 PFM (bottom-up scanline order)."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise FormatError("PFM writer expects an H x W array")
    data = np.flipud(values).astype("<f4")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{values.shape[1]} {values.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale = little endian
        f.write(data.tobytes())


def read_pfm(path: str | os.PathLike) -> np.ndarray:
    """Read a single-channel PFM into a float32 H x W array."""
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header != b"Pf":
            raise FormatError(f"{path}: bad PFM header {header!r} at byte 0")
        dims = f.readline()
        m = re.match(rb"^(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise FormatError(f"{path}: bad PFM dimensions line at byte 3")
        width, height = int(m.group(1)), int(m.group(2))
        scale_line = f.readline()
        try:
            scale = float(scale_line)
        except ValueError:
            raise FormatError(f"{path}: bad PFM scale line") from None
        if scale == 0.0:
            raise FormatError(f"{path}: zero PFM scale")
        endian = "<" if scale < 0 else ">"
        payload = f.read(width * height * 4)
        if len(payload) != width * height * 4:
            raise FormatError(f"{path}: truncated PFM payload at byte {f.tell()}")
    data = np.frombuffer(payload, dtype=endian + "f4").reshape(height, width)
    if np.isnan(data).any():
        offset = int(np.flatnonzero(np.isnan(data.ravel()))[0]) * 4
        raise FormatError(f"{path}: NaN in PFM payload at byte offset {offset}")
    data = np.flipud(data).astype(np.float32)
    if abs(scale) != 1.0:
        data = data * abs(scale)
    return data


# ---------------------------------------------------------------------------
# Middlebury .flo


def write_flo(path: str | os.PathLike, flow: np.ndarray) -> None:
    """Write an H x W x 2 flow field as Middlebury .flo."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FormatError(".flo writer expects H x W x 2")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", w, h))
        f.write(flow.astype("<f4").tobytes())


def read_flo(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FLO_MAGIC:
            raise FormatError(f"{path}: bad .flo magic {magic!r}")
        w, h = struct.unpack("<ii", f.read(8))
        if w <= 0 or h <= 0:
            raise FormatError(f"{path}: bad .flo dimensions {w}x{h}")
        payload = f.read(w * h * 2 * 4)
        if len(payload) != w * h * 2 * 4:
            raise FormatError(f"{path}: truncated .flo payload")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).astype(np.float32)


# ---------------------------------------------------------------------------
# PNG frames and masks


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a float image in [0, 1] (H x W or H x W x 3) as 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG into linear float64 in [0, 1]. RGB images come back H x W x 3."""
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


def read_mask(path: str | os.PathLike) -> np.ndarray:
    img = Image.open(path).convert("L")
    return np.asarray(img) >= 128


# ---------------------------------------------------------------------------
# JSON formats


def write_intrinsics(path: str | os.PathLike, k: CameraIntrinsics) -> None:
    with open(path, "w") as f:
        json.dump(
            {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height},
            f,
            indent=2,
        )


def read_intrinsics(path: str | os.PathLike) -> CameraIntrinsics:
    with open(path) as f:
        d = json.load(f)
    try:
        return CameraIntrinsics(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
        )
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path}: bad intrinsics file ({e})") from None


def write_poses(path: str | os.PathLike, poses: list[Pose]) -> None:
    records = [
        {"frame": k, "q": pose.q.tolist(), "t": pose.t.tolist()} for k, pose in enumerate(poses)
    ]
    with open(path, "w") as f:
        json.dump(records, f, indent=2)


def read_poses(path: str | os.PathLike) -> list[Pose]:
    with open(path) as f:
        records = json.load(f)
    if not isinstance(records, list) or not records:
        raise FormatError(f"{path}: pose file must be a non-empty JSON array")
    records = sorted(records, key=lambda r: r["frame"])
    frames = [r["frame"] for r in records]
    if frames != list(range(len(records))):
        raise FormatError(f"{path}: non-contiguous frames {frames[:5]}...")
    return [Pose(np.array(r["q"], dtype=np.float64), np.array(r["t"], dtype=np.float64)) for r in records]


def read_single_pose(path: str | os.PathLike, frame: int | None = None) -> Pose:
    """Read one pose from either a single {q, t} object or a trajectory file."""
    with open(path) as f:
        d = json.load(f)
    if isinstance(d, dict):
        return Pose(np.array(d["q"], dtype=np.float64), np.array(d["t"], dtype=np.float64))
    poses = read_poses(path)
    if frame is None:
        raise FormatError(f"{path}: trajectory file requires an explicit frame index")
    return poses[frame]


def write_gyro_log(path: str | os.PathLike, samples: list[tuple[float, np.ndarray]]) -> None:
    with open(path, "w") as f:
        for t, q in samples:
            f.write(json.dumps({"t": float(t), "q": np.asarray(q).tolist()}) + "\n")


def read_gyro_log(path: str | os.PathLike) -> list[tuple[float, np.ndarray]]:
    samples = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            samples.append((float(d["t"]), np.asarray(d["q"], dtype=np.float64)))
    return samples


def write_ois_log(path: str | os.PathLike, samples: list[tuple[float, float, float]]) -> None:
    with open(path, "w") as f:
        for t, dx, dy in samples:
            f.write(json.dumps({"t": float(t), "dx": float(dx), "dy": float(dy)}) + "\n")


def read_ois_log(path: str | os.PathLike) -> list[tuple[float, float, float]]:
    samples = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            samples.append((float(d["t"]), float(d["dx"]), float(d["dy"])))
    return samples


def write_sparse_points(path: str | os.PathLike, points: np.ndarray, visibility: dict[int, list[int]]) -> None:
    with open(path, "w") as f:
        json.dump(
            {"points": np.asarray(points).tolist(), "visibility": {str(k): list(map(int, v)) for k, v in visibility.items()}},
            f,
        )


def read_sparse_points(path: str | os.PathLike):
    with open(path) as f:
        d = json.load(f)
    points = np.asarray(d["points"], dtype=np.float64)
    visibility = {int(k): list(map(int, v)) for k, v in d["visibility"].items()}
    n = len(points)
    for frame, idx in visibility.items():
        if idx and (min(idx) < 0 or max(idx) >= n):
            raise FormatError(f"{path}: visibility index out of range for frame {frame}")
    return points, visibility


# ---------------------------------------------------------------------------
# directory layout helpers

FRAME_PATTERN = "%06d.png"
DEPTH_PATTERN = "%06d.pfm"
FLOW_PATTERN = "%06d_%06d.flo"
MASK_PATTERN = "%06d.png"


def frame_path(directory, k):
    return os.path.join(directory, FRAME_PATTERN % k)


def depth_path(directory, k):
    return os.path.join(directory, DEPTH_PATTERN % k)


def flow_path(directory, src, dst):
    return os.path.join(directory, FLOW_PATTERN % (src, dst))


def mask_path(directory, k):
    return os.path.join(directory, MASK_PATTERN % k)


def list_frames(directory) -> list[int]:
    """Frame indices present in a frames/ directory, sorted."""
    out = []
    for name in os.listdir(directory):
        m = re.match(r"^(\d{6})\.png$", name)
        if m:
            out.append(int(m.group(1)))
    return sorted(out)
