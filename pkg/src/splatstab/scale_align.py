"""Robust scale alignment between SfM-style sparse geometry and metric depth.

Per frame, visible sparse points are projected into a sparse depth map and a
scale is estimated by RANSAC in log-depth space (near and far errors weigh
equally there): each iteration fits ``scale = exp(mean(log sparse - log
dense))`` on a small sample and counts inliers within `tau` in log space;
the best model is refit on its inliers. The global scale is the median of
the per-frame sequence, and is applied by rescaling pose translations and
the sparse points, leaving metric depth untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, DepthMap, Pose, project
from .trajectory import Trajectory

__all__ = [
    "ScaleEstimate",
    "sparse_depth",
    "ransac_log_scale",
    "global_scale",
    "align_frames",
    "apply_global_scale",
]

DEFAULT_TAU = 0.1  # natural-log inlier threshold, ~10% depth ratio
DEFAULT_ITERS = 256
DEFAULT_SAMPLE_SIZE = 8


@dataclass
class ScaleEstimate:
    scale: float
    inlier_count: int
    per_frame_scales: list = field(default_factory=list)

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")


def sparse_depth(points: np.ndarray, visibility: list[int], pose: Pose, intrinsics: CameraIntrinsics) -> DepthMap:
    """Project visible points into a sparse depth map (nearest-pixel rounding,
    nearest depth wins when points collide)."""
    h, w = intrinsics.height, intrinsics.width
    values = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=bool)
    if len(visibility):
        pix, z, ok = project(points[visibility], intrinsics, pose)
        u = np.floor(pix[:, 0] + 0.5).astype(np.int64)
        v = np.floor(pix[:, 1] + 0.5).astype(np.int64)
        ok &= (u >= 0) & (u < w) & (v >= 0) & (v < h)
        order = np.argsort(z[ok])[::-1]  # write far to near so the nearest wins
        uu, vv, zz = u[ok][order], v[ok][order], z[ok][order]
        values[vv, uu] = zz
        mask[vv, uu] = True
    return DepthMap(values, mask)


def ransac_log_scale(
    dense: DepthMap,
    sparse: DepthMap,
    iters: int = DEFAULT_ITERS,
    tau: float = DEFAULT_TAU,
    sample_size: int = DEFAULT_SAMPLE_SIZE,
    seed: int = 0,
) -> ScaleEstimate:
    """RANSAC scale between a dense metric depth map and a sparse one."""
    overlap = dense.validity & sparse.validity
    n = int(overlap.sum())
    if n < sample_size:
        raise ValueError(f"too few correspondences ({n} < {sample_size})")
    diffs = np.log(sparse.values[overlap]) - np.log(dense.values[overlap])

    rng = np.random.default_rng(seed)
    samples = np.stack([rng.choice(n, size=sample_size, replace=False) for _ in range(iters)])
    log_scales = diffs[samples].mean(axis=1)
    inliers = np.abs(diffs[None, :] - log_scales[:, None]) < tau
    counts = inliers.sum(axis=1)
    best = int(np.argmax(counts))  # ties resolve to the lower iteration index
    best_inliers = inliers[best]
    refined = float(np.exp(diffs[best_inliers].mean()))
    return ScaleEstimate(scale=refined, inlier_count=int(counts[best]))


def global_scale(per_frame: list[float]) -> float:
    """Median of the per-frame scales (lower median for even counts)."""
    if not per_frame:
        raise ValueError("empty scale sequence")
    ordered = sorted(per_frame)
    return float(ordered[(len(ordered) - 1) // 2])


def align_frames(
    depths: list[DepthMap],
    points: np.ndarray,
    visibility: dict[int, list[int]],
    trajectory: Trajectory,
    intrinsics: CameraIntrinsics,
    iters: int = DEFAULT_ITERS,
    tau: float = DEFAULT_TAU,
    sample_size: int = DEFAULT_SAMPLE_SIZE,
    seed: int = 0,
) -> ScaleEstimate:
    """Per-frame RANSAC scales plus their median as the global estimate.

    Frames with too few projected points are skipped."""
    per_frame = []
    total_inliers = 0
    for k, depth in enumerate(depths):
        vis = visibility.get(k, [])
        sp = sparse_depth(points, vis, trajectory[k], intrinsics)
        try:
            est = ransac_log_scale(depth, sp, iters=iters, tau=tau, sample_size=sample_size, seed=seed + k)
        except ValueError:
            continue
        per_frame.append(est.scale)
        total_inliers += est.inlier_count
    if not per_frame:
        raise ValueError("no frame had enough correspondences")
    return ScaleEstimate(scale=global_scale(per_frame), inlier_count=total_inliers, per_frame_scales=per_frame)


def apply_global_scale(trajectory: Trajectory, points: np.ndarray | None, factor: float):
    """Rescale pose translations (and sparse points) by `factor`.

    Metric depth stays untouched. The estimated scale is sparse/dense, so
    moving an SfM reconstruction onto the metric-depth scale means passing
    ``factor = 1 / alpha_star``."""
    scaled = Trajectory([Pose(p.q, p.t * factor) for p in trajectory.poses])
    return scaled, None if points is None else points * factor
