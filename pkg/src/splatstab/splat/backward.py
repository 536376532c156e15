"""Analytic gradients for the software rasterizer.

Given upstream gradients on the rendered color (and optionally expected
depth and accumulated alpha), produces gradients for every primitive
parameter: offset (= position), log-scales, rotation quaternion, opacity
logit, and color.

Front-to-back compositing with weights ``w_j = T_j a_j`` has the classic
structure: the gradient of any output ``O = sum_j w_j f_j`` w.r.t. a sample
opacity is ``dO/da_j = T_j f_j - (sum_{m>j} w_m f_m) / (1 - a_j)``, which the
implementation evaluates with segmented suffix sums over the pixel-sorted
pair list. The spatial chain runs through the Gaussian weight, the 2D
covariance, the projection Jacobian, and the world covariance factorization
R(q) diag(exp(s)); quaternion gradients include the normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .render import RenderCache, _segmented_exclusive_cumsum
from .scene import GaussianScene

__all__ = ["SceneGrads", "render_backward"]


@dataclass
class SceneGrads:
    offset: np.ndarray  # (N, 3) == gradient of the world mean
    log_scale: np.ndarray  # (N, 3)
    rot: np.ndarray  # (N, 4)
    alpha_logit: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)

    @property
    def mu(self) -> np.ndarray:
        return self.offset

    def scaled(self, f: float) -> "SceneGrads":
        return SceneGrads(self.offset * f, self.log_scale * f, self.rot * f, self.alpha_logit * f, self.color * f)

    def add_(self, other: "SceneGrads") -> "SceneGrads":
        self.offset += other.offset
        self.log_scale += other.log_scale
        self.rot += other.rot
        self.alpha_logit += other.alpha_logit
        self.color += other.color
        return self

    @staticmethod
    def zeros(n: int) -> "SceneGrads":
        return SceneGrads(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3)))


def _rotation_matrix_quat_grad(dl_dr: np.ndarray, q_unit: np.ndarray) -> np.ndarray:
    """Chain dL/dR(q) -> dL/dq for normalized quaternions (w, x, y, z)."""
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    zeros = np.zeros_like(w)

    def mat(rows):
        return 2.0 * np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dr_dw = mat([[zeros, -z, y], [z, zeros, -x], [-y, x, zeros]])
    dr_dx = mat([[zeros, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dr_dy = mat([[-2 * y, x, w], [x, zeros, z], [-w, z, -2 * y]])
    dr_dz = mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zeros]])
    return np.stack(
        [np.einsum("nij,nij->n", dl_dr, d) for d in (dr_dw, dr_dx, dr_dy, dr_dz)],
        axis=1,
    )


def render_backward(
    scene: GaussianScene,
    cache: RenderCache,
    grad_color: np.ndarray,
    grad_depth: np.ndarray | None = None,
    grad_alpha: np.ndarray | None = None,
) -> SceneGrads:
    n = len(scene)
    k = cache.intrinsics
    npix = k.width * k.height
    pix = cache.pair_pix
    prim = cache.pair_prim

    gc = np.asarray(grad_color, dtype=np.float64).reshape(npix, 3)
    alpha_acc = np.bincount(pix, weights=cache.pair_w, minlength=npix)
    has_alpha = alpha_acc > 1e-12
    safe_acc = np.maximum(alpha_acc, 1e-12)
    depth_out = cache.out.depth.reshape(npix)

    if grad_depth is not None:
        gd = np.asarray(grad_depth, dtype=np.float64).reshape(npix)
        g_num = np.where(has_alpha, gd / safe_acc, 0.0)
        g_acc_from_depth = np.where(has_alpha, -gd * depth_out / safe_acc, 0.0)
    else:
        g_num = np.zeros(npix)
        g_acc_from_depth = np.zeros(npix)
    g_acc = g_acc_from_depth
    if grad_alpha is not None:
        g_acc = g_acc + np.asarray(grad_alpha, dtype=np.float64).reshape(npix)

    z = cache.cam[:, 2]
    # dL/dw per pair; stopped pairs carry no weight and no gradient
    u = (
        np.einsum("pc,pc->p", gc[pix], scene.color[prim])
        + g_acc[pix]
        + g_num[pix] * z[prim]
    )
    u = np.where(cache.pair_live, u, 0.0)

    s = cache.pair_w * u
    prefix = _segmented_exclusive_cumsum(s, cache.seg_start) if len(s) else s
    totals = np.bincount(pix, weights=s, minlength=npix)
    suffix = totals[pix] - prefix - s

    one_minus_a = np.maximum(1.0 - cache.pair_a, 1e-9)
    dl_da = np.where(cache.pair_live, cache.pair_t * u - suffix / one_minus_a, 0.0)
    pass_clamp = ~cache.pair_clamped
    dl_dg = dl_da * cache.alpha[prim] * pass_clamp
    dl_dalpha = np.bincount(prim, weights=dl_da * cache.pair_g * pass_clamp, minlength=n)

    grads = SceneGrads.zeros(n)
    for c in range(3):
        grads.color[:, c] = np.bincount(prim, weights=cache.pair_w * gc[pix, c], minlength=n)
    a_sig = cache.alpha
    grads.alpha_logit = dl_dalpha * a_sig * (1.0 - a_sig)

    # spatial chain: Gaussian weight -> 2D mean and covariance
    ia = cache.inv_cov[prim, 0]
    ib = cache.inv_cov[prim, 1]
    idd = cache.inv_cov[prim, 2]
    vx = ia * cache.pair_dx + ib * cache.pair_dy
    vy = ib * cache.pair_dx + idd * cache.pair_dy
    gg = dl_dg * cache.pair_g
    dmean = np.stack(
        [np.bincount(prim, weights=gg * vx, minlength=n), np.bincount(prim, weights=gg * vy, minlength=n)],
        axis=1,
    )
    half = 0.5 * gg
    gcov = np.empty((n, 2, 2))
    gcov[:, 0, 0] = np.bincount(prim, weights=half * vx * vx, minlength=n)
    gcov[:, 0, 1] = np.bincount(prim, weights=half * vx * vy, minlength=n)
    gcov[:, 1, 0] = gcov[:, 0, 1]
    gcov[:, 1, 1] = np.bincount(prim, weights=half * vy * vy, minlength=n)

    dl_dz = np.bincount(prim, weights=cache.pair_w * g_num[pix], minlength=n)

    # covariance chain: cov2 = M sigma3 M^T (+ eps), M = J R_wc
    m = cache.m_mat
    dl_dm = 2.0 * np.einsum("nij,njk,nkl->nil", gcov, m, cache.sigma3)
    dl_dsigma3 = np.einsum("nji,njk,nkl->nil", m, gcov, m)
    dl_dj = np.einsum("nij,kj->nik", dl_dm, cache.rot_c2w.T)  # dM/dJ = R_wc

    # camera-point chain
    fx, fy = k.fx, k.fy
    cam = cache.cam
    zs = np.where(cache.visible, z, 1.0)
    x_c, y_c = cam[:, 0], cam[:, 1]
    dt = np.einsum("nij,ni->nj", cache.jproj, dmean)  # J^T dmean
    dt[:, 2] += dl_dz
    inv_z2 = 1.0 / zs**2
    inv_z3 = inv_z2 / zs
    dt[:, 0] += dl_dj[:, 0, 2] * (-fx * inv_z2)
    dt[:, 1] += dl_dj[:, 1, 2] * (-fy * inv_z2)
    dt[:, 2] += (
        dl_dj[:, 0, 0] * (-fx * inv_z2)
        + dl_dj[:, 0, 2] * (2.0 * fx * x_c * inv_z3)
        + dl_dj[:, 1, 1] * (-fy * inv_z2)
        + dl_dj[:, 1, 2] * (2.0 * fy * y_c * inv_z3)
    )
    dt[~cache.visible] = 0.0
    grads.offset = dt @ cache.rot_c2w.T

    # world covariance factorization: sigma3 = V V^T, V = R(q) diag(exp(s))
    dl_dv = np.einsum("nij,njk->nik", dl_dsigma3 + dl_dsigma3.transpose(0, 2, 1), cache.v_mat)
    grads.log_scale = cache.scales * np.einsum("nij,nij->nj", dl_dv, cache.rot_mat)
    dl_drot = dl_dv * cache.scales[:, None, :]
    dl_dq_unit = _rotation_matrix_quat_grad(dl_drot, cache.q_unit)
    # through normalization q_unit = q / |q|
    proj = dl_dq_unit - cache.q_unit * np.einsum("ni,ni->n", cache.q_unit, dl_dq_unit)[:, None]
    grads.rot = proj / cache.q_norm[:, None]
    return grads
