"""Scene extrapolation: pad every frame and fill the borders from neighbors.

Padded content is propagated by forward-splatting each neighbor frame (and
its depth, converted to the target camera) through the camera flow computed
from the neighbor's own depth; the nearest-in-time neighbor that reaches a
hole wins. Pixels no neighbor can see are filled by nearest-valid-pixel
replication. A fill mask (2 = original, 1 = propagated, 0 = replicated)
rides along so later stages can tell real pixels from fabricated ones.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import distance_transform_edt

from .bundle import VideoBundle
from .geometry import DepthMap, project, unproject

__all__ = ["extrapolate_frames"]


def _splat_neighbor(frame, depth, pose_src, pose_dst, k_src, pad, hp, wp):
    """Forward-splat one neighbor frame into a padded destination canvas.

    Returns (rgb accumulator, depth accumulator, weight accumulator)."""
    points, valid = unproject(depth, k_src, pose_src)
    pix, z, in_front = project(points, k_src, pose_dst)
    ok = valid & in_front
    dst = pix[ok] + pad
    rgb = frame[ok]
    zval = z[ok]
    acc_rgb = np.zeros((hp * wp, 3))
    acc_d = np.zeros(hp * wp)
    acc_w = np.zeros(hp * wp)
    x0 = np.floor(dst[:, 0]).astype(np.int64)
    y0 = np.floor(dst[:, 1]).astype(np.int64)
    fx = dst[:, 0] - x0
    fy = dst[:, 1] - y0
    for dx, dy, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xs = x0 + dx
        ys = y0 + dy
        sel = (xs >= 0) & (xs < wp) & (ys >= 0) & (ys < hp) & (wgt > 0)
        idx = ys[sel] * wp + xs[sel]
        sw = wgt[sel]
        acc_w += np.bincount(idx, weights=sw, minlength=hp * wp)
        for c in range(3):
            acc_rgb[:, c] += np.bincount(idx, weights=sw * rgb[sel, c], minlength=hp * wp)
        acc_d += np.bincount(idx, weights=sw * zval[sel], minlength=hp * wp)
    return acc_rgb.reshape(hp, wp, 3), acc_d.reshape(hp, wp), acc_w.reshape(hp, wp)


def _fill_nearest(values: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Replicate the nearest known pixel into unknown ones."""
    if known.all():
        return values
    _, (iy, ix) = distance_transform_edt(~known, return_indices=True)
    if values.ndim == 3:
        return values[iy, ix, :]
    return values[iy, ix]


def extrapolate_frames(bundle: VideoBundle, pad: int = 96, weight_floor: float = 0.25) -> VideoBundle:
    """Return a bundle padded by `pad` pixels on every side.

    ``pad=0`` returns the input unchanged. Flow fields stay anchored on the
    original pixel grid (the padded bundle records its pad so consumers can
    locate the original window).
    """
    if pad == 0:
        return bundle
    t = bundle.frame_count
    h, w = bundle.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    k_pad = bundle.intrinsics.padded(pad)

    frames = np.zeros((t, hp, wp, 3))
    depths = []
    fill_masks = np.zeros((t, hp, wp), dtype=np.uint8)
    masks = None if bundle.masks is None else np.zeros((t, hp, wp), dtype=bool)

    order_cache = {k: sorted(range(t), key=lambda i: (abs(i - k), i)) for k in range(t)}
    for k in range(t):
        canvas = np.zeros((hp, wp, 3))
        canvas_depth = np.zeros((hp, wp))
        known = np.zeros((hp, wp), dtype=bool)
        canvas[pad : pad + h, pad : pad + w] = bundle.frames[k]
        canvas_depth[pad : pad + h, pad : pad + w] = np.where(
            bundle.depths[k].validity, bundle.depths[k].values, 0.0
        )
        known[pad : pad + h, pad : pad + w] = bundle.depths[k].validity
        fill_masks[k, pad : pad + h, pad : pad + w] = 2
        if masks is not None:
            masks[k, pad : pad + h, pad : pad + w] = bundle.masks[k]

        for i in order_cache[k]:
            if i == k:
                continue
            if known.all():
                break
            acc_rgb, acc_d, acc_w = _splat_neighbor(
                bundle.frames[i], bundle.depths[i],
                bundle.trajectory[i], bundle.trajectory[k],
                bundle.intrinsics, pad, hp, wp,
            )
            reached = (acc_w >= weight_floor) & ~known
            if not reached.any():
                continue
            wsafe = np.maximum(acc_w, 1e-12)
            canvas[reached] = (acc_rgb / wsafe[..., None])[reached]
            canvas_depth[reached] = (acc_d / wsafe)[reached]
            fill_masks[k][reached] = 1
            known |= reached

        canvas = _fill_nearest(canvas, known)
        canvas_depth = _fill_nearest(canvas_depth, known)
        frames[k] = canvas
        depths.append(DepthMap(canvas_depth, np.full((hp, wp), True)))

    return VideoBundle(
        intrinsics=k_pad,
        frames=frames,
        depths=depths,
        trajectory=bundle.trajectory,
        flows=bundle.flows,
        masks=masks,
        trajectory_smooth=bundle.trajectory_smooth,
        cam_flows=bundle.cam_flows,
        gyro=bundle.gyro,
        ois=bundle.ois,
        points=bundle.points,
        visibility=bundle.visibility,
        fps=bundle.fps,
        pad=pad,
        fill_masks=fill_masks,
    )
