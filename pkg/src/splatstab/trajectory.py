"""Camera-path smoothing: Gaussian filtering of an SE(3) trajectory.

Translations are weighted arithmetic means. Rotations are blended as unit
quaternions after sign-aligning every sample to the window's center rotation
(flip if the dot product is negative), then renormalized; for the small
inter-frame rotations of video this is the standard stable approximation.
Windows are clamped at sequence boundaries and the weights renormalized, so
the output always has the input length and no fabricated poses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, quat_normalize, relative_pose

__all__ = [
    "Trajectory",
    "SmoothingConfig",
    "gaussian_weights",
    "smooth_trajectory",
    "stabilizing_transforms",
    "second_difference_energy",
    "default_window",
]


@dataclass
class Trajectory:
    poses: list[Pose]

    def __post_init__(self):
        if len(self.poses) < 1:
            raise ValueError("trajectory must contain at least one pose")

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, k) -> Pose:
        return self.poses[k]

    def translations(self) -> np.ndarray:
        return np.stack([p.t for p in self.poses])

    def quaternions(self) -> np.ndarray:
        return np.stack([p.q for p in self.poses])


def default_window(sigma: float) -> int:
    """Window capturing ~99.7% of the Gaussian mass: 2*ceil(3*sigma) + 1."""
    return 2 * int(np.ceil(3.0 * sigma)) + 1


@dataclass
class SmoothingConfig:
    sigma: float = 4.0
    window: int | None = None  # None = derive from sigma

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.window is None:
            self.window = default_window(self.sigma)
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be odd")


def gaussian_weights(k: int, window: int, sigma: float, length: int):
    """Normalized Gaussian weights around frame k, clamped to [0, length-1].

    Returns (indices, weights); weights sum to 1.
    """
    if window % 2 == 0 or window < 1:
        raise ValueError("window must be odd")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    half = window // 2
    idx = np.arange(max(0, k - half), min(length - 1, k + half) + 1)
    w = np.exp(-0.5 * ((np.abs(idx - k)) / sigma) ** 2)
    return idx, w / w.sum()


def smooth_trajectory(traj: Trajectory, cfg: SmoothingConfig) -> Trajectory:
    """Gaussian-filter translations and rotations; output length = input length."""
    n = len(traj)
    ts = traj.translations()
    qs = traj.quaternions()
    out = []
    for k in range(n):
        idx, w = gaussian_weights(k, cfg.window, cfg.sigma, n)
        t = w @ ts[idx]
        window_q = qs[idx].copy()
        flip = (window_q @ qs[k]) < 0.0
        window_q[flip] *= -1.0
        q = quat_normalize(w @ window_q)
        out.append(Pose(q, t))
    return Trajectory(out)


def stabilizing_transforms(src: Trajectory, dst: Trajectory) -> list[Pose]:
    """Per-frame transform taking each source camera to its smoothed camera."""
    if len(src) != len(dst):
        raise ValueError("trajectory length mismatch")
    return [relative_pose(a, b) for a, b in zip(src.poses, dst.poses)]


def second_difference_energy(traj: Trajectory) -> float:
    """Sum of squared second differences of the translation sequence.

    The smoothing diagnostics use this as the jerkiness measure; Gaussian
    filtering should never increase it.
    """
    ts = traj.translations()
    if len(ts) < 3:
        return 0.0
    dd = ts[2:] - 2.0 * ts[1:-1] + ts[:-2]
    return float(np.sum(dd * dd))
