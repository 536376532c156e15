"""End-to-end stabilization: extrapolate, reconstruct, refine, smooth, render.

``stabilize`` runs the whole pipeline on a loaded bundle and returns the
stabilized frames (same count and resolution as the input), per-frame
validity from the rendered alpha, the smoothed trajectory, the refined
scenes, and the per-step loss history.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bundle import VideoBundle
from .extrapolate import extrapolate_frames
from .optimize import LossBreakdown, OptimConfig, optimize_bundle
from .splat import GaussianScene, render
from .trajectory import SmoothingConfig, Trajectory, smooth_trajectory

__all__ = ["StabilizeResult", "stabilize"]

ALPHA_VALID = 0.5


@dataclass
class StabilizeResult:
    frames: np.ndarray  # (T, H, W, 3) stabilized frames at the input resolution
    validity: np.ndarray  # (T, H, W) rendered-alpha coverage masks
    trajectory_smooth: Trajectory
    scenes: list[GaussianScene]
    history: list[LossBreakdown]


def stabilize(
    bundle: VideoBundle,
    sigma: float = 4.0,
    window: int | None = None,
    pad: int = 96,
    cfg: OptimConfig | None = None,
    threads: int = 1,
) -> StabilizeResult:
    """Stabilize a bundle.

    Steps: extrapolate frames by `pad` pixels, build per-frame scenes,
    refine them by test-time optimization, Gaussian-smooth the trajectory
    (std `sigma` frames), render each refined scene at its smoothed pose
    with the original intrinsics, and report alpha coverage.
    """
    if bundle.pad != 0:
        raise ValueError("bundle is already padded")
    cfg = cfg or OptimConfig()
    padded = extrapolate_frames(bundle, pad)
    scenes, history = optimize_bundle(padded, cfg)
    smooth = smooth_trajectory(bundle.trajectory, SmoothingConfig(sigma=sigma, window=window))

    def render_frame(k: int):
        # the padded scene composited through the original intrinsics is
        # exactly the padded render cropped back to the input resolution
        out = render(scenes[k], bundle.intrinsics, smooth[k], cfg.raster)
        return out.color, out.alpha > ALPHA_VALID

    t = bundle.frame_count
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(render_frame, range(t)))
    else:
        results = [render_frame(k) for k in range(t)]

    frames = np.stack([r[0] for r in results])
    validity = np.stack([r[1] for r in results])
    return StabilizeResult(frames, validity, smooth, scenes, history)
