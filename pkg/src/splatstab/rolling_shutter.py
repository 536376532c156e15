"""Rolling-shutter and OIS removal from gyro/OIS logs.

Each frame is divided into row blocks. The destination camera is a virtual
global-shutter camera at the mean rotation over the frame's readout with the
OIS offset zeroed. For every row of a regular vertex grid, a rotation-only
homography maps destination (output) pixels back into the raw frame; the
grid is densified by piecewise-linear interpolation over triangulated cells
and the output is bilinearly sampled from the raw frame.

Row timestamp model: linear readout, ``t(row) = t_frame + row * readout / height``.
OIS lens shift is modeled as a principal-point offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CameraIntrinsics,
    apply_homography,
    quat_normalize,
    quat_slerp,
    rotation_homography,
)

__all__ = [
    "GyroLog",
    "OisLog",
    "WarpGrid",
    "interpolate_rotation",
    "interpolate_ois",
    "mean_rotation",
    "dense_warp_from_grid",
    "grid_sample",
    "rs_remove_frame",
]


@dataclass
class GyroLog:
    """Time-ordered camera orientations (camera-to-world, unit quaternions)."""

    times: np.ndarray
    quats: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.quats = quat_normalize(np.asarray(self.quats, dtype=np.float64).reshape(-1, 4))
        if len(self.times) != len(self.quats) or len(self.times) == 0:
            raise ValueError("gyro log must contain matched, non-empty samples")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("gyro timestamps must be strictly increasing")

    @staticmethod
    def from_samples(samples):
        times = [t for t, _ in samples]
        quats = [q for _, q in samples]
        return GyroLog(np.array(times), np.array(quats))

    def to_samples(self):
        return [(float(t), q.copy()) for t, q in zip(self.times, self.quats)]


@dataclass
class OisLog:
    """Time-ordered lens-shift offsets in pixels."""

    times: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 2)
        if len(self.times) != len(self.offsets) or len(self.times) == 0:
            raise ValueError("ois log must contain matched, non-empty samples")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("ois timestamps must be strictly increasing")

    @staticmethod
    def zero(t0: float = 0.0, t1: float = 1.0):
        return OisLog(np.array([t0, t1]), np.zeros((2, 2)))


@dataclass
class WarpGrid:
    """Sparse warp: regular vertices over the output frame plus the raw-frame
    positions each vertex samples from."""

    src_grid: np.ndarray  # (R+1, C+1, 2) regular mesh in output coordinates
    dst_grid: np.ndarray  # (R+1, C+1, 2) sample positions in the raw frame
    block_rows: int

    def __post_init__(self):
        if self.src_grid.shape != self.dst_grid.shape:
            raise ValueError("grids must have the same shape")


def interpolate_rotation(log: GyroLog, t: float):
    """Slerp the log at time t. Returns (quaternion, clamped) where clamped
    flags queries outside the recorded range (value clamps to the endpoint)."""
    times = log.times
    if t <= times[0]:
        return log.quats[0].copy(), t < times[0]
    if t >= times[-1]:
        return log.quats[-1].copy(), t > times[-1]
    hi = int(np.searchsorted(times, t, side="right"))
    lo = hi - 1
    span = times[hi] - times[lo]
    alpha = (t - times[lo]) / span
    return quat_slerp(log.quats[lo], log.quats[hi], alpha), False


def interpolate_ois(log: OisLog, t: float):
    times = log.times
    if t <= times[0]:
        return log.offsets[0].copy(), t < times[0]
    if t >= times[-1]:
        return log.offsets[-1].copy(), t > times[-1]
    hi = int(np.searchsorted(times, t, side="right"))
    lo = hi - 1
    alpha = (t - times[lo]) / (times[hi] - times[lo])
    return (1 - alpha) * log.offsets[lo] + alpha * log.offsets[hi], False


def mean_rotation(log: GyroLog, t0: float, t1: float) -> np.ndarray:
    """Sign-aligned normalized average of the log over [t0, t1].

    The window endpoints are interpolated and included, so the mean is well
    defined even when no raw sample falls inside the window.
    """
    if t1 < t0:
        raise ValueError("empty window")
    q0, _ = interpolate_rotation(log, t0)
    q1, _ = interpolate_rotation(log, t1)
    inside = log.quats[(log.times > t0) & (log.times < t1)]
    quats = np.concatenate([[q0], inside, [q1]], axis=0)
    flip = quats @ quats[0] < 0
    quats[flip] *= -1.0
    return quat_normalize(quats.mean(axis=0))


# ---------------------------------------------------------------------------
# dense warping


def _grid_axes(size: int, step: int) -> np.ndarray:
    """Vertex coordinates 0, step, 2*step, ..., size-1 (last cell may be short)."""
    axes = list(range(0, size - 1, step))
    axes.append(size - 1)
    return np.array(axes, dtype=np.float64)


def regular_grid(width: int, height: int, block_size: int) -> np.ndarray:
    ys = _grid_axes(height, block_size)
    xs = _grid_axes(width, block_size)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def dense_warp_from_grid(grid: WarpGrid, out_size: tuple[int, int]) -> np.ndarray:
    """Densify per-vertex displacements into an (H, W, 2) field.

    Each rectangular cell of the regular mesh is split along its main
    diagonal into two triangles; displacements are interpolated
    barycentrically, so the field is piecewise linear and exact at vertices.
    """
    h, w = out_size
    disp = grid.dst_grid - grid.src_grid
    xs = grid.src_grid[0, :, 0]
    ys = grid.src_grid[:, 0, 1]

    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    ci = np.clip(np.searchsorted(xs, u, side="right") - 1, 0, len(xs) - 2)
    ri = np.clip(np.searchsorted(ys, v, side="right") - 1, 0, len(ys) - 2)
    fx = (u - xs[ci]) / (xs[ci + 1] - xs[ci])
    fy = (v - ys[ri]) / (ys[ri + 1] - ys[ri])

    a = disp[ri, ci]  # cell corner (0, 0)
    b = disp[ri, ci + 1]  # (1, 0)
    c = disp[ri + 1, ci]  # (0, 1)
    d = disp[ri + 1, ci + 1]  # (1, 1)

    upper = fx >= fy  # triangle (a, b, d), else (a, d, c)
    wa = np.where(upper, 1.0 - fx, 1.0 - fy)[..., None]
    wb = np.where(upper, fx - fy, 0.0)[..., None]
    wd = np.where(upper, fy, fx)[..., None]
    wc = np.where(upper, 0.0, fy - fx)[..., None]
    return wa * a + wb * b + wd * d + wc * c


def grid_sample(image: np.ndarray, field: np.ndarray):
    """Bilinearly sample `image` at (pixel + displacement).

    Returns (output, valid) where valid is False for samples outside the
    image. A zero field reproduces the input bit-exactly.
    """
    from .flow import bilinear_sample

    h, w = image.shape[:2]
    if field.shape[:2] != (h, w):
        raise ValueError("shape mismatch")
    if not np.any(field):
        return image.copy(), np.ones((h, w), dtype=bool)
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    coords = np.stack([u + field[..., 0], v + field[..., 1]], axis=-1)
    out, valid = bilinear_sample(image, coords)
    return out, valid


# ---------------------------------------------------------------------------
# per-frame correction


def rs_remove_frame(
    frame: np.ndarray,
    gyro: GyroLog,
    ois: OisLog,
    intrinsics: CameraIntrinsics,
    block_size: int = 32,
    readout_s: float = 0.03,
    t_frame: float = 0.0,
):
    """Undo rolling-shutter and OIS distortion for one frame.

    Returns (corrected image, validity mask, WarpGrid). The mask flags
    output pixels whose content had to come from outside the raw frame.
    """
    if gyro is None or ois is None:
        raise ValueError("rolling-shutter removal requires gyro and ois logs")
    h, w = frame.shape[:2]
    if (w, h) != (intrinsics.width, intrinsics.height):
        raise ValueError("shape mismatch between frame and intrinsics")

    r_mean = mean_rotation(gyro, t_frame, t_frame + readout_s)
    src_grid = regular_grid(w, h, block_size)
    dst_grid = np.empty_like(src_grid)
    row_time = readout_s / h

    for r in range(src_grid.shape[0]):
        y = src_grid[r, 0, 1]
        t = t_frame + y * row_time
        q_row, _ = interpolate_rotation(gyro, t)
        ois_row, _ = interpolate_ois(ois, t)
        k_row = intrinsics.shifted(ois_row[0], ois_row[1])
        # maps output (mean-rotation, zero-OIS) pixels into the raw frame
        hom = rotation_homography(k_row, q_row, r_mean, intrinsics)
        if abs(np.linalg.det(hom)) < 1e-12:
            raise ValueError(f"degenerate homography for grid row {r}")
        dst_grid[r] = apply_homography(hom, src_grid[r])

    grid = WarpGrid(src_grid, dst_grid, block_rows=src_grid.shape[0] - 1)
    field = dense_warp_from_grid(grid, (h, w))
    out, valid = grid_sample(frame, field)
    return out, valid, grid
