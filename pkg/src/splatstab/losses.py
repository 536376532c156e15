"""Loss terms for test-time scene refinement.

All losses return a scalar plus analytic gradients; every gradient is
validated against central finite differences in the test suite.

* SSIM: 11x11 Gaussian window, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2 on unit
  range, per-channel averaged, reflect-padded convolutions, averaged over the
  supervision mask. Enters the photometric loss as ``lambda_ssim * (1 - SSIM)``
  so that identical images give zero loss.
* Pair regularization: L2 between one scene's per-pixel parameter maps and a
  neighbor's maps warped along dense correspondences. Offsets are compared
  after normalizing by anchor depth (raw means differ across frames by
  genuine parallax); quaternions are sign-aligned before differencing. A raw
  position mode is available for fidelity studies.
* Scale regularizer: masked mean of world scale entries above
  ``tau_large = 70 * image_width / depth``.
* Offset regularizer: masked mean of rendered-vs-prior depth deviations above
  ``tau_depth = 0.2 * depth``, optionally restricted to foreground pixels.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .flow import FlowField
from .geometry import CameraIntrinsics, DepthMap, Pose, pixel_grid
from .splat import GaussianScene, RasterConfig, render_backward, render_with_cache
from .splat.backward import SceneGrads

__all__ = [
    "ssim",
    "photometric_loss",
    "pair_regularizer",
    "dilation_for_epoch",
    "pair_frames",
    "cumulative_reach",
    "loss_scale",
    "loss_offset",
    "TAU_LARGE_FACTOR",
    "TAU_DEPTH_FACTOR",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

TAU_LARGE_FACTOR = 70.0
TAU_DEPTH_FACTOR = 0.2


def _ssim_kernel():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


_KERNEL = _ssim_kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    out = correlate1d(img, _KERNEL, axis=0, mode="reflect")
    return correlate1d(out, _KERNEL, axis=1, mode="reflect")


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None):
    """Mean SSIM between images a and b plus the gradient w.r.t. a.

    Images are (H, W) or (H, W, C) in [0, 1]; the mean runs over `mask`
    (default: all pixels) and channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
        squeeze = True
    else:
        squeeze = False
    h, w, channels = a.shape
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    count = float(mask.sum()) * channels
    if count == 0:
        raise ValueError("empty mask")

    upstream = mask.astype(np.float64) / count
    value = 0.0
    grad = np.zeros_like(a)
    for c in range(channels):
        x = a[..., c]
        y = b[..., c]
        mu_x = _blur(x)
        mu_y = _blur(y)
        sxx = _blur(x * x) - mu_x**2
        syy = _blur(y * y) - mu_y**2
        sxy = _blur(x * y) - mu_x * mu_y
        a1 = 2 * mu_x * mu_y + SSIM_C1
        a2 = 2 * sxy + SSIM_C2
        b1 = mu_x**2 + mu_y**2 + SSIM_C1
        b2 = sxx + syy + SSIM_C2
        s_map = (a1 * a2) / (b1 * b2)
        value += float((s_map * upstream).sum())

        ds_da1 = a2 / (b1 * b2)
        ds_da2 = a1 / (b1 * b2)
        ds_db1 = -s_map / b1
        ds_db2 = -s_map / b2
        p_mu = upstream * (ds_da1 * 2 * mu_y + ds_db1 * 2 * mu_x)
        p_sxx = upstream * ds_db2
        p_sxy = upstream * ds_da2 * 2
        grad[..., c] = (
            _blur(p_mu)
            + 2 * x * _blur(p_sxx)
            - 2 * _blur(p_sxx * mu_x)
            + y * _blur(p_sxy)
            - _blur(p_sxy * mu_y)
        )
    if squeeze:
        grad = grad[..., 0]
    return value, grad


def photometric_loss(rendered: np.ndarray, target: np.ndarray, mask: np.ndarray, lambda_ssim: float):
    """Masked ``L1 + lambda_ssim * (1 - SSIM)`` with gradient w.r.t. the render."""
    if rendered.shape != target.shape:
        raise ValueError("shape mismatch")
    count = float(mask.sum()) * rendered.shape[2]
    if count == 0:
        raise ValueError("empty supervision mask")
    diff = rendered - target
    l1 = float(np.abs(diff[mask]).sum()) / count
    grad = np.where(mask[..., None], np.sign(diff), 0.0) / count
    if lambda_ssim != 0.0:
        s_val, s_grad = ssim(rendered, target, mask)
        l1 += lambda_ssim * (1.0 - s_val)
        grad -= lambda_ssim * s_grad
    return l1, grad


# ---------------------------------------------------------------------------
# cross-frame pair regularization


REG_CHANNELS = ("log_scale", "rot", "alpha_logit", "color", "offset")


def pair_regularizer(
    scene_i: GaussianScene,
    scene_j: GaussianScene,
    corr: FlowField,
    mask: np.ndarray,
    raw_position: bool = False,
):
    """L2 consistency between matched per-pixel primitives of two scenes.

    `corr` is the correspondence field on scene_i's pixel grid: pixel p of
    scene i matches position ``p + corr(p)`` in scene j's grid. Parameter
    maps of scene j are bilinearly warped there and compared on `mask`.

    Returns (value, grads_i, grads_j) with gradients on both scenes.
    """
    if scene_i.grid_shape is None or scene_j.grid_shape is None:
        raise ValueError("pair regularization requires per-pixel scenes")
    if scene_i.grid_shape != scene_j.grid_shape:
        raise ValueError("shape mismatch")
    h, w = scene_i.grid_shape
    if corr.shape != (h, w) or mask.shape != (h, w):
        raise ValueError("shape mismatch")

    grids_i = scene_i.param_grids()
    grids_j = scene_j.param_grids()
    depth_i = np.zeros(h * w)
    depth_j = np.zeros(h * w)
    depth_i[scene_i.pixel_index] = scene_i.anchor_depth if scene_i.anchor_depth is not None else 1.0
    depth_j[scene_j.pixel_index] = scene_j.anchor_depth if scene_j.anchor_depth is not None else 1.0
    present_i = np.zeros(h * w, dtype=bool)
    present_i[scene_i.pixel_index] = True
    present_j = np.zeros(h * w, dtype=bool)
    present_j[scene_j.pixel_index] = True

    if not raw_position:
        grids_i["offset"] = grids_i["offset"] / np.maximum(depth_i.reshape(h, w, 1), 1e-9)
        grids_j["offset"] = grids_j["offset"] / np.maximum(depth_j.reshape(h, w, 1), 1e-9)
    else:
        anchor_i = np.zeros((h * w, 3))
        anchor_i[scene_i.pixel_index] = scene_i.anchor
        anchor_j = np.zeros((h * w, 3))
        anchor_j[scene_j.pixel_index] = scene_j.anchor
        grids_i["offset"] = grids_i["offset"] + anchor_i.reshape(h, w, 3)
        grids_j["offset"] = grids_j["offset"] + anchor_j.reshape(h, w, 3)

    # bilinear gather setup at p + corr(p)
    grid = pixel_grid(w, h)
    uv = grid + corr.vectors
    u = uv[..., 0]
    v = uv[..., 1]
    inb = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1) & corr.validity
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    x0 = np.clip(np.floor(uc).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(vc).astype(np.int64), 0, max(h - 2, 0))
    fx = uc - x0
    fy = vc - y0
    corners = [
        (y0 * w + x0, (1 - fx) * (1 - fy)),
        (y0 * w + np.minimum(x0 + 1, w - 1), fx * (1 - fy)),
        (np.minimum(y0 + 1, h - 1) * w + x0, (1 - fx) * fy),
        (np.minimum(y0 + 1, h - 1) * w + np.minimum(x0 + 1, w - 1), fx * fy),
    ]
    sampled_present = np.ones((h, w), dtype=bool)
    for cidx, cw in corners:
        sampled_present &= present_j.reshape(h, w)[np.unravel_index(cidx, (h, w))] | (cw <= 1e-12)
    valid = mask & inb & present_i.reshape(h, w) & sampled_present
    n_valid = float(valid.sum())

    grads_i = SceneGrads.zeros(len(scene_i))
    grads_j = SceneGrads.zeros(len(scene_j))
    if n_valid == 0:
        return 0.0, grads_i, grads_j

    q_ref = grids_i["rot"]
    value = 0.0
    for name in REG_CHANNELS:
        gi = grids_i[name]
        gj_flat = grids_j[name].reshape(h * w, -1)
        c = gi.shape[2]
        # sign-align each gathered quaternion corner to the reference pixel
        signs = []
        warped = np.zeros((h, w, c))
        for cidx, cw in corners:
            corner_vals = gj_flat[cidx]
            if name == "rot":
                dot = np.einsum("hwc,hwc->hw", corner_vals, q_ref)
                sgn = np.where(dot < 0, -1.0, 1.0)
                corner_vals = corner_vals * sgn[..., None]
                signs.append(sgn)
            warped += corner_vals * cw[..., None]
        diff = np.where(valid[..., None], gi - warped, 0.0)
        value += float((diff**2).sum()) / n_valid

        up = 2.0 * diff / n_valid
        # gradient on scene i: direct
        gi_grad = up
        # gradient on scene j: scatter through the bilinear corners
        gj_grad = np.zeros((h * w, c))
        for corner_n, (cidx, cw) in enumerate(corners):
            contrib = -up * cw[..., None]
            if name == "rot":
                contrib = contrib * signs[corner_n][..., None]
            flat_idx = cidx.ravel()
            flat_contrib = contrib.reshape(-1, c)
            for ch in range(c):
                gj_grad[:, ch] += np.bincount(flat_idx, weights=flat_contrib[:, ch], minlength=h * w)
        _grid_to_scene_grad(grads_i, scene_i, name, gi_grad.reshape(h * w, c), depth_i, raw_position)
        _grid_to_scene_grad(grads_j, scene_j, name, gj_grad, depth_j, raw_position)
    return value, grads_i, grads_j


def _grid_to_scene_grad(grads: SceneGrads, scene: GaussianScene, name: str,
                        grid_grad: np.ndarray, depth_flat: np.ndarray, raw_position: bool):
    layers = 1 if scene.layer is None else int(scene.layer.max()) + 1
    base_c = grid_grad.shape[1] // layers
    lay = np.zeros(len(scene), dtype=np.int64) if scene.layer is None else scene.layer
    per_prim = grid_grad.reshape(-1, layers, base_c)[scene.pixel_index, lay]
    if name == "offset" and not raw_position:
        per_prim = per_prim / np.maximum(depth_flat[scene.pixel_index, None], 1e-9)
    target = getattr(grads, name)
    if target.ndim == 1:
        target += per_prim[:, 0]
    else:
        target += per_prim


# ---------------------------------------------------------------------------
# dilation schedule


def dilation_for_epoch(epoch: int, dilation_schedule) -> int:
    if not 0 <= epoch < len(dilation_schedule):
        raise ValueError(f"epoch {epoch} outside schedule of length {len(dilation_schedule)}")
    return int(dilation_schedule[epoch])


def pair_offsets(reg_window: int, dilation: int) -> list[int]:
    """Window offsets j*(d+1) for j in [-floor(s/2), floor(s/2)]."""
    half = reg_window // 2
    return [j * (dilation + 1) for j in range(-half, half + 1)]


def pair_frames(frame: int, reg_window: int, dilation: int, total: int) -> list[int]:
    """Regularization partners of `frame`, clipped to the sequence."""
    return [frame + o for o in pair_offsets(reg_window, dilation) if 0 <= frame + o < total]


def cumulative_reach(reg_window: int, epochs: int) -> int:
    """Frames influenced after `epochs` epochs, counted multiplicatively
    (each window node contributes its full prior reach; overlaps are not
    deduplicated). For s=3 this gives the 3/9/27 progression."""
    return reg_window**epochs


# ---------------------------------------------------------------------------
# scale and offset regularizers


def loss_scale(scene: GaussianScene, image_width: int):
    """Masked mean of world scale entries exceeding tau_large = 70*w/depth."""
    if scene.anchor_depth is None:
        raise ValueError("scene lacks anchor depths")
    scales = np.exp(scene.log_scale)
    tau = TAU_LARGE_FACTOR * image_width / scene.anchor_depth
    exceed = scales > tau[:, None]
    grads = SceneGrads.zeros(len(scene))
    count = int(exceed.sum())
    if count == 0:
        return 0.0, grads
    value = float(scales[exceed].sum()) / count
    grads.log_scale = np.where(exceed, scales, 0.0) / count
    return value, grads


def loss_offset(
    scene: GaussianScene,
    intrinsics: CameraIntrinsics,
    pose: Pose,
    prior_depth: DepthMap,
    foreground: np.ndarray | None = None,
    raster_config: RasterConfig | None = None,
    alpha_floor: float = 0.5,
):
    """Penalize rendered depth drifting beyond tau_depth = 0.2*depth from the
    prior, optionally on foreground pixels only. Gradients flow through the
    depth channel of the renderer."""
    out, cache = render_with_cache(scene, intrinsics, pose, raster_config)
    delta = out.depth - prior_depth.values
    covered = (out.alpha > alpha_floor) & prior_depth.validity
    if foreground is not None:
        covered &= foreground
    exceed = covered & (np.abs(delta) > TAU_DEPTH_FACTOR * prior_depth.values)
    count = int(exceed.sum())
    if count == 0:
        return 0.0, SceneGrads.zeros(len(scene))
    value = float(np.abs(delta[exceed]).sum()) / count
    grad_depth = np.where(exceed, np.sign(delta), 0.0) / count
    grads = render_backward(scene, cache, np.zeros_like(out.color), grad_depth=grad_depth)
    return value, grads
