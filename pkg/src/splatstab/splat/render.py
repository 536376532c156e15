"""Software rasterizer for per-pixel Gaussian scenes.

EWA-style splatting: each primitive's world covariance is pushed through the
world-to-camera rotation and the projection Jacobian at its mean to a 2D
covariance (regularized by ``eps2d`` on the diagonal), primitives are
depth-sorted front to back (ties broken by primitive index), and every pixel
alpha-composites the Gaussians that cover it, stopping once transmittance
drops below ``t_stop``. Color, expected depth, and accumulated alpha come out
of one pass.

The implementation is a flat pair list (primitive, pixel) built from
per-primitive bounding boxes of ``radius_sigma`` standard deviations
(``None`` = exact full-frame support), sorted pixel-major so per-pixel
compositing becomes segmented scans. The forward pass caches everything the
analytic backward pass needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import CameraIntrinsics, Pose, quat_to_matrix
from .scene import GaussianScene

__all__ = ["RasterConfig", "RenderOutput", "RenderCache", "render", "render_with_cache"]


@dataclass
class RasterConfig:
    radius_sigma: float | None = 3.0  # bounding-box radius in stddevs; None = full frame
    eps2d: float = 0.3  # px^2 added to the 2D covariance diagonal
    t_stop: float = 1e-4  # stop compositing below this transmittance
    alpha_clamp: float = 0.9999  # per-sample opacity ceiling
    znear: float = 1e-6


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) expected depth (0 where alpha ~ 0)
    alpha: np.ndarray  # (H, W) accumulated opacity


@dataclass
class RenderCache:
    """Forward-pass state reused by the analytic backward pass."""

    config: RasterConfig
    intrinsics: CameraIntrinsics
    rot_c2w: np.ndarray  # (3, 3) camera-to-world rotation of the view
    visible: np.ndarray  # (N,) bool
    cam: np.ndarray  # (N, 3) camera-frame means
    jproj: np.ndarray  # (N, 2, 3) projection Jacobians
    m_mat: np.ndarray  # (N, 2, 3) J @ R_wc
    sigma3: np.ndarray  # (N, 3, 3) world covariances
    v_mat: np.ndarray  # (N, 3, 3) R(q) diag(exp(scale))
    rot_mat: np.ndarray  # (N, 3, 3) R(q)
    q_unit: np.ndarray  # (N, 4) normalized quaternions
    q_norm: np.ndarray  # (N,)
    scales: np.ndarray  # (N, 3) exp(log_scale)
    alpha: np.ndarray  # (N,) sigmoid opacity
    inv_cov: np.ndarray  # (N, 3) inverse 2D covariance (a, b, d)
    mean2d: np.ndarray  # (N, 2)
    pair_prim: np.ndarray  # (P,) primitive index per pair
    pair_pix: np.ndarray  # (P,) linear pixel index per pair
    pair_dx: np.ndarray
    pair_dy: np.ndarray
    pair_g: np.ndarray
    pair_a: np.ndarray
    pair_clamped: np.ndarray
    pair_t: np.ndarray  # transmittance before each pair
    pair_w: np.ndarray  # composite weight (0 for stopped pairs)
    pair_live: np.ndarray
    seg_start: np.ndarray  # (P,) bool, True at the first pair of each pixel
    out: RenderOutput


def _project_primitives(scene: GaussianScene, intrinsics: CameraIntrinsics, view: Pose, cfg: RasterConfig):
    rot_c2w = view.rotation_matrix
    cam = (scene.mu - view.t) @ rot_c2w  # world -> camera
    z = cam[:, 2]
    visible = z > cfg.znear
    zs = np.where(visible, z, 1.0)

    fx, fy = intrinsics.fx, intrinsics.fy
    mean2d = np.stack([fx * cam[:, 0] / zs + intrinsics.cx, fy * cam[:, 1] / zs + intrinsics.cy], axis=1)

    n = len(scene)
    jproj = np.zeros((n, 2, 3))
    jproj[:, 0, 0] = fx / zs
    jproj[:, 0, 2] = -fx * cam[:, 0] / zs**2
    jproj[:, 1, 1] = fy / zs
    jproj[:, 1, 2] = -fy * cam[:, 1] / zs**2

    q_norm = np.linalg.norm(scene.rot, axis=1)
    q_unit = scene.rot / q_norm[:, None]
    rot_mat = quat_to_matrix(q_unit)
    scales = np.exp(scene.log_scale)
    v_mat = rot_mat * scales[:, None, :]
    sigma3 = np.einsum("nij,nkj->nik", v_mat, v_mat)

    m_mat = np.einsum("nij,kj->nik", jproj, rot_c2w)  # J @ R_wc, R_wc = R_c2w^T
    cov2 = np.einsum("nij,njk,nlk->nil", m_mat, sigma3, m_mat)
    a = cov2[:, 0, 0] + cfg.eps2d
    b = cov2[:, 0, 1]
    d = cov2[:, 1, 1] + cfg.eps2d
    det = a * d - b * b
    det = np.maximum(det, 1e-12)
    inv_cov = np.stack([d / det, -b / det, a / det], axis=1)  # (ia, ib, id)

    lam_max = 0.5 * (a + d) + np.sqrt(np.maximum(0.25 * (a - d) ** 2 + b * b, 0.0))
    return rot_c2w, cam, z, visible, mean2d, jproj, m_mat, sigma3, v_mat, rot_mat, q_unit, q_norm, scales, inv_cov, lam_max


def _build_pairs(visible, mean2d, lam_max, width, height, radius_sigma):
    """Flat (primitive, pixel) pair list from per-primitive bounding boxes."""
    idx = np.flatnonzero(visible)
    if len(idx) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy()
    if radius_sigma is None:
        x0 = np.zeros(len(idx), dtype=np.int64)
        x1 = np.full(len(idx), width - 1, dtype=np.int64)
        y0 = np.zeros(len(idx), dtype=np.int64)
        y1 = np.full(len(idx), height - 1, dtype=np.int64)
    else:
        r = radius_sigma * np.sqrt(lam_max[idx])
        x0 = np.ceil(mean2d[idx, 0] - r).astype(np.int64)
        x1 = np.floor(mean2d[idx, 0] + r).astype(np.int64)
        y0 = np.ceil(mean2d[idx, 1] - r).astype(np.int64)
        y1 = np.floor(mean2d[idx, 1] + r).astype(np.int64)
        on_frame = (x1 >= 0) & (x0 <= width - 1) & (y1 >= 0) & (y0 <= height - 1) & (x0 <= x1) & (y0 <= y1)
        idx, x0, x1, y0, y1 = idx[on_frame], x0[on_frame], x1[on_frame], y0[on_frame], y1[on_frame]
        np.clip(x0, 0, width - 1, out=x0)
        np.clip(x1, 0, width - 1, out=x1)
        np.clip(y0, 0, height - 1, out=y0)
        np.clip(y1, 0, height - 1, out=y1)
    bw = x1 - x0 + 1
    bh = y1 - y0 + 1
    area = bw * bh
    total = int(area.sum())
    if total == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy()
    starts = np.concatenate([[0], np.cumsum(area)[:-1]])
    flat = np.arange(total, dtype=np.int64)
    owner = np.repeat(np.arange(len(idx)), area)
    local = flat - starts[owner]
    px = x0[owner] + local % bw[owner]
    py = y0[owner] + local // bw[owner]
    return idx[owner], py * width + px


def _segmented_exclusive_cumsum(values: np.ndarray, seg_start: np.ndarray) -> np.ndarray:
    csum = np.cumsum(values)
    excl = csum - values
    start_idx = np.flatnonzero(seg_start)
    seg_id = np.cumsum(seg_start) - 1
    return excl - excl[start_idx][seg_id]


def render_with_cache(
    scene: GaussianScene,
    intrinsics: CameraIntrinsics,
    view: Pose,
    config: RasterConfig | None = None,
) -> tuple[RenderOutput, RenderCache]:
    if len(scene) == 0:
        raise ValueError("scene is empty")
    cfg = config or RasterConfig()
    w, h = intrinsics.width, intrinsics.height
    (rot_c2w, cam, z, visible, mean2d, jproj, m_mat, sigma3, v_mat, rot_mat,
     q_unit, q_norm, scales, inv_cov, lam_max) = _project_primitives(scene, intrinsics, view, cfg)

    pair_prim, pair_pix = _build_pairs(visible, mean2d, lam_max, w, h, cfg.radius_sigma)

    # front-to-back order: sort pairs by (pixel, depth rank); stable argsort of
    # z keeps primitive-index tie-breaks deterministic
    order = np.argsort(z, kind="stable")
    rank = np.empty(len(scene), dtype=np.int64)
    rank[order] = np.arange(len(scene))
    key = pair_pix * (len(scene) + 1) + rank[pair_prim]
    perm = np.argsort(key, kind="stable")
    pair_prim = pair_prim[perm]
    pair_pix = pair_pix[perm]

    px = (pair_pix % w).astype(np.float64)
    py = (pair_pix // w).astype(np.float64)
    dx = px - mean2d[pair_prim, 0]
    dy = py - mean2d[pair_prim, 1]
    ia = inv_cov[pair_prim, 0]
    ib = inv_cov[pair_prim, 1]
    idd = inv_cov[pair_prim, 2]
    expo = -0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + idd * dy * dy)
    g = np.exp(np.minimum(expo, 0.0))

    alpha = scene.alpha
    raw_a = alpha[pair_prim] * g
    clamped = raw_a > cfg.alpha_clamp
    a = np.where(clamped, cfg.alpha_clamp, raw_a)

    seg_start = np.zeros(len(pair_pix), dtype=bool)
    if len(pair_pix):
        seg_start[0] = True
        seg_start[1:] = pair_pix[1:] != pair_pix[:-1]
    log_t = _segmented_exclusive_cumsum(np.log1p(-a), seg_start) if len(a) else a
    t = np.exp(log_t)
    live = t > cfg.t_stop
    wgt = np.where(live, t * a, 0.0)

    npix = h * w
    color = np.zeros((npix, 3))
    for c in range(3):
        color[:, c] = np.bincount(pair_pix, weights=wgt * scene.color[pair_prim, c], minlength=npix)
    alpha_out = np.bincount(pair_pix, weights=wgt, minlength=npix)
    depth_num = np.bincount(pair_pix, weights=wgt * z[pair_prim], minlength=npix)
    safe = np.maximum(alpha_out, 1e-12)
    depth_out = np.where(alpha_out > 1e-12, depth_num / safe, 0.0)

    out = RenderOutput(
        color=color.reshape(h, w, 3),
        depth=depth_out.reshape(h, w),
        alpha=np.clip(alpha_out, 0.0, 1.0).reshape(h, w),
    )
    cache = RenderCache(
        config=cfg, intrinsics=intrinsics, rot_c2w=rot_c2w, visible=visible, cam=cam,
        jproj=jproj, m_mat=m_mat, sigma3=sigma3, v_mat=v_mat, rot_mat=rot_mat,
        q_unit=q_unit, q_norm=q_norm, scales=scales, alpha=alpha, inv_cov=inv_cov,
        mean2d=mean2d, pair_prim=pair_prim, pair_pix=pair_pix, pair_dx=dx, pair_dy=dy,
        pair_g=g, pair_a=a, pair_clamped=clamped, pair_t=t, pair_w=wgt, pair_live=live,
        seg_start=seg_start, out=out,
    )
    return out, cache


def render(
    scene: GaussianScene,
    intrinsics: CameraIntrinsics,
    view: Pose,
    config: RasterConfig | None = None,
) -> RenderOutput:
    out, _ = render_with_cache(scene, intrinsics, view, config)
    return out
