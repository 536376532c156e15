"""Pinhole camera model, SE(3) poses, and rotation-only homographies.

Conventions used throughout the package:

* Camera frame: x right, y down, z forward (standard computer vision).
* Pixel (u, v) refers to the center of the pixel at column u, row v, so
  continuous pixel coordinates run from 0 to width-1 / height-1.
* Poses are camera-to-world: ``X_world = R(q) @ X_cam + t``. Pose files and
  all public APIs use this convention; convert world-to-camera data at
  ingestion.
* Rotations are unit quaternions stored as (w, x, y, z). Compositions
  renormalize so long chains do not drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "DepthMap",
    "quat_normalize",
    "quat_multiply",
    "quat_conjugate",
    "quat_to_matrix",
    "quat_from_axis_angle",
    "quat_slerp",
    "quat_rotate",
    "project",
    "unproject",
    "relative_pose",
    "rotation_homography",
    "pixel_grid",
]

MIN_DEPTH = 1e-6


# ---------------------------------------------------------------------------
# quaternions


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm. Works on (..., 4) arrays."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("zero-norm quaternion")
    return q / norm


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b for (w,x,y,z) quaternions, broadcasting."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion; (..., 4) -> (..., 3, 3)."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        raise ValueError("zero rotation axis")
    axis = axis / norm
    half = 0.5 * angle_rad
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_slerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:
    """Spherical linear interpolation from q0 (t=0) to q1 (t=1)."""
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:  # take the short arc
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-12:
        return quat_normalize(q0 + t * (q1 - q0))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    return quat_normalize((np.sin((1.0 - t) * theta) / s) * q0 + (np.sin(t * theta) / s) * q1)


def quat_rotate(q: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Rotate points (..., 3) by quaternion q."""
    return points @ quat_to_matrix(q).T


# ---------------------------------------------------------------------------
# domain types


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics. Focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def matrix_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def shifted(self, dx: float, dy: float) -> "CameraIntrinsics":
        """Intrinsics with the principal point moved by (dx, dy) pixels."""
        return CameraIntrinsics(self.fx, self.fy, self.cx + dx, self.cy + dy, self.width, self.height)

    def padded(self, pad: int) -> "CameraIntrinsics":
        """Intrinsics of the same camera with `pad` extra pixels on each side."""
        return CameraIntrinsics(
            self.fx, self.fy, self.cx + pad, self.cy + pad, self.width + 2 * pad, self.height + 2 * pad
        )


@dataclass
class Pose:
    """Camera-to-world rigid transform: rotation quaternion (w,x,y,z) + translation."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = quat_normalize(np.asarray(self.q, dtype=np.float64).reshape(4))
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other` first, then `self`."""
        return Pose(quat_multiply(self.q, other.q), quat_rotate(self.q, other.t) + self.t)

    def inverse(self) -> "Pose":
        qinv = quat_conjugate(self.q)
        return Pose(qinv, -quat_rotate(qinv, self.t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points (..., 3) from camera frame to world frame."""
        return points @ self.rotation_matrix.T + self.t

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        """Transform points (..., 3) from world frame to camera frame."""
        return (points - self.t) @ self.rotation_matrix

    def almost_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        dq = min(np.linalg.norm(self.q - other.q), np.linalg.norm(self.q + other.q))
        return dq <= tol and np.linalg.norm(self.t - other.t) <= tol


@dataclass
class DepthMap:
    """Metric depth (camera z, meters) with an explicit validity mask."""

    values: np.ndarray
    validity: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("depth must be H x W")
        if self.validity is None:
            self.validity = np.isfinite(self.values) & (self.values > 0)
        else:
            self.validity = np.asarray(self.validity, dtype=bool)
            if self.validity.shape != self.values.shape:
                raise ValueError("shape mismatch")
            self.validity = self.validity & np.isfinite(self.values) & (self.values > 0)

    @property
    def shape(self):
        return self.values.shape


# ---------------------------------------------------------------------------
# projection


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(H, W, 2) array of pixel-center coordinates (u, v)."""
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return np.stack([u, v], axis=-1)


def project(points: np.ndarray, intrinsics: CameraIntrinsics, pose: Pose):
    """Project world points into the image of a camera at `pose`.

    Parameters
    ----------
    points : (..., 3) world-frame points.

    Returns
    -------
    pixels : (..., 2) continuous pixel coordinates.
    depth : (...,) camera-frame z.
    valid : (...,) bool, False where the point is at or behind the camera.
    """
    points = np.asarray(points, dtype=np.float64)
    cam = pose.apply_inverse(points)
    z = cam[..., 2]
    valid = z > MIN_DEPTH
    safe_z = np.where(valid, z, 1.0)
    u = intrinsics.fx * cam[..., 0] / safe_z + intrinsics.cx
    v = intrinsics.fy * cam[..., 1] / safe_z + intrinsics.cy
    return np.stack([u, v], axis=-1), z, valid


def unproject(depth: DepthMap, intrinsics: CameraIntrinsics, pose: Pose):
    """Lift a depth map to world-frame points.

    Returns (points (H, W, 3), valid (H, W)). Invalid depth pixels produce
    invalid points (their coordinates are defined but meaningless).
    """
    h, w = depth.shape
    if (w, h) != (intrinsics.width, intrinsics.height):
        raise ValueError("shape mismatch between depth map and intrinsics")
    grid = pixel_grid(w, h)
    x = (grid[..., 0] - intrinsics.cx) / intrinsics.fx
    y = (grid[..., 1] - intrinsics.cy) / intrinsics.fy
    d = np.where(depth.validity, depth.values, 1.0)
    cam = np.stack([x * d, y * d, d], axis=-1)
    return pose.apply(cam), depth.validity.copy()


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Transform taking camera `a` to camera `b`: returns b ∘ inverse(a)."""
    return b.compose(a.inverse())


def rotation_homography(
    k_dst: CameraIntrinsics | np.ndarray,
    r_dst: np.ndarray,
    r_src: np.ndarray,
    k_src: CameraIntrinsics | np.ndarray,
) -> np.ndarray:
    """Homography mapping source pixels to destination pixels for a
    pure-rotation camera motion.

    Rotations are camera-to-world quaternions (or 3x3 matrices). A source
    pixel is lifted to a world ray through K_src^-1 and R_src, then imaged
    by the destination camera: H = K_dst @ R_dst^T @ R_src @ K_src^-1.
    """
    k_dst_m = k_dst.matrix if isinstance(k_dst, CameraIntrinsics) else np.asarray(k_dst, dtype=np.float64)
    k_src_m = k_src.matrix_inv if isinstance(k_src, CameraIntrinsics) else np.linalg.inv(np.asarray(k_src, dtype=np.float64))
    rd = quat_to_matrix(r_dst) if np.asarray(r_dst).shape == (4,) else np.asarray(r_dst, dtype=np.float64)
    rs = quat_to_matrix(r_src) if np.asarray(r_src).shape == (4,) else np.asarray(r_src, dtype=np.float64)
    return k_dst_m @ rd.T @ rs @ k_src_m


def apply_homography(h: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Apply a 3x3 homography to (..., 2) pixel coordinates."""
    pixels = np.asarray(pixels, dtype=np.float64)
    ones = np.ones(pixels.shape[:-1] + (1,))
    homog = np.concatenate([pixels, ones], axis=-1) @ h.T
    return homog[..., :2] / homog[..., 2:3]
