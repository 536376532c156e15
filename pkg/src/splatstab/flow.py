"""Flow decomposition and dynamics compensation.

Total 2D motion between frames splits into a camera-induced part (computed
from depth and relative pose) and an object-induced residual. Because depth
exists only at the source frame k, the camera flow anchored at a neighbor i
is produced by forward-splatting the inverse field. Supervision targets for
the multi-view loss are built by backward-warping the neighbor so dynamic
content appears frozen at the source frame's timestamp.

Flow convention: ``F_{a->b}(p)`` is the displacement such that content at
pixel p of frame a appears at ``p + F_{a->b}(p)`` in frame b. Flow files
named ``a_b.flo`` hold ``F_{a->b}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, DepthMap, Pose, pixel_grid, project, unproject

__all__ = [
    "FlowField",
    "CompensatedView",
    "bilinear_sample",
    "sample_validity",
    "camera_flow",
    "forward_splat_flow",
    "object_flow",
    "bidirectional_mask",
    "compensate_neighbor",
    "compensation_field",
]

SPLAT_WEIGHT_FLOOR = 0.25
ABS_TOL_PX = 1.0
REL_TOL = 0.05


@dataclass
class FlowField:
    """Dense displacement field (du, dv) with validity and splat weights."""

    vectors: np.ndarray
    validity: np.ndarray | None = None
    weight: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 3 or self.vectors.shape[2] != 2:
            raise ValueError("flow must be H x W x 2")
        if self.validity is None:
            self.validity = np.isfinite(self.vectors).all(axis=2)
        else:
            self.validity = np.asarray(self.validity, dtype=bool)
            if self.validity.shape != self.vectors.shape[:2]:
                raise ValueError("shape mismatch")

    @property
    def shape(self):
        return self.vectors.shape[:2]

    @property
    def u(self) -> np.ndarray:
        return self.vectors[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.vectors[..., 1]


@dataclass
class CompensatedView:
    """A neighbor frame warped to the source timestamp plus its supervision mask."""

    image: np.ndarray
    mask: np.ndarray


# ---------------------------------------------------------------------------
# sampling helpers


def bilinear_sample(values: np.ndarray, uv: np.ndarray):
    """Bilinearly sample `values` (H, W[, C]) at continuous (u, v) positions.

    Returns (samples, in_bounds). Out-of-bounds queries return 0 with
    in_bounds False; queries exactly on the boundary are valid.
    """
    values = np.asarray(values, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    h, w = values.shape[:2]
    u = uv[..., 0]
    v = uv[..., 1]
    inb = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    x0 = np.clip(np.floor(uc).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(uc, dtype=np.int64)
    y0 = np.clip(np.floor(vc).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(vc, dtype=np.int64)
    fx = uc - x0
    fy = vc - y0
    if values.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v00 = values[y0, x0]
    v01 = values[y0, np.minimum(x0 + 1, w - 1)]
    v10 = values[np.minimum(y0 + 1, h - 1), x0]
    v11 = values[np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)]
    out = (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )
    if values.ndim == 3:
        out = np.where(inb[..., None], out, 0.0)
    else:
        out = np.where(inb, out, 0.0)
    return out, inb


def sample_validity(validity: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """True where a bilinear query touches only valid pixels and is in bounds."""
    frac, inb = bilinear_sample(validity.astype(np.float64), uv)
    return inb & (frac > 1.0 - 1e-9)


# ---------------------------------------------------------------------------
# flow decomposition


def camera_flow(depth_k: DepthMap, pose_k: Pose, pose_i: Pose, intrinsics: CameraIntrinsics) -> FlowField:
    """Rigid flow k->i: unproject the source depth, reproject into camera i,
    and subtract the pixel coordinates. Invalid where depth is invalid or the
    point falls behind camera i."""
    pts, valid = unproject(depth_k, intrinsics, pose_k)
    pix, _, in_front = project(pts, intrinsics, pose_i)
    grid = pixel_grid(intrinsics.width, intrinsics.height)
    vectors = pix - grid
    validity = valid & in_front
    vectors = np.where(validity[..., None], vectors, 0.0)
    return FlowField(vectors, validity)


def reprojected_depth(depth_k: DepthMap, pose_k: Pose, pose_i: Pose, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Depth of frame k's points measured in camera i (same anchor as depth_k)."""
    pts, _ = unproject(depth_k, intrinsics, pose_k)
    _, z, _ = project(pts, intrinsics, pose_i)
    return z


def forward_splat_flow(flow: FlowField, weight_floor: float = SPLAT_WEIGHT_FLOOR) -> FlowField:
    """Invert a flow field by forward splatting.

    Every valid source pixel p deposits the displacement -F(p) at p + F(p)
    with bilinear weights; accumulated values are weight-normalized. Pixels
    whose accumulated weight stays below `weight_floor` are un-splatted and
    marked invalid.
    """
    h, w = flow.shape
    grid = pixel_grid(w, h)
    src = grid[flow.validity]
    vec = flow.vectors[flow.validity]
    dst = src + vec

    wsum = np.zeros(h * w)
    acc = np.zeros((h * w, 2))
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
        ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h) & (wgt > 0)
        idx = ys[ok] * w + xs[ok]
        wsum += np.bincount(idx, weights=wgt[ok], minlength=h * w)
        acc[:, 0] += np.bincount(idx, weights=(wgt[ok] * -vec[ok, 0]), minlength=h * w)
        acc[:, 1] += np.bincount(idx, weights=(wgt[ok] * -vec[ok, 1]), minlength=h * w)

    wsum = wsum.reshape(h, w)
    acc = acc.reshape(h, w, 2)
    valid = wsum >= weight_floor
    vectors = np.where(valid[..., None], acc / np.maximum(wsum, 1e-12)[..., None], 0.0)
    return FlowField(vectors, valid, weight=wsum)


def object_flow(total: FlowField, cam: FlowField) -> FlowField:
    """Pointwise residual motion: total minus camera-induced flow."""
    if total.shape != cam.shape:
        raise ValueError("shape mismatch")
    validity = total.validity & cam.validity
    vectors = np.where(validity[..., None], total.vectors - cam.vectors, 0.0)
    return FlowField(vectors, validity)


def bidirectional_mask(
    f_ab: FlowField,
    f_ba: FlowField,
    abs_tol: float = ABS_TOL_PX,
    rel_tol: float = REL_TOL,
) -> np.ndarray:
    """Cycle-consistency mask anchored at frame a.

    A pixel passes when following f_ab and sampling f_ba at the landing point
    returns close to the inverse displacement, and both fields are valid at
    the queried locations.
    """
    if f_ab.shape != f_ba.shape:
        raise ValueError("shape mismatch")
    h, w = f_ab.shape
    grid = pixel_grid(w, h)
    landing = grid + f_ab.vectors
    back, _ = bilinear_sample(f_ba.vectors, landing)
    ok_there = sample_validity(f_ba.validity, landing)
    residual = np.linalg.norm(f_ab.vectors + back, axis=2)
    budget = abs_tol + rel_tol * np.linalg.norm(f_ab.vectors, axis=2)
    return f_ab.validity & ok_there & (residual <= budget)


def compensate_neighbor(image: np.ndarray, field: FlowField, mask: np.ndarray | None = None) -> CompensatedView:
    """Backward-warp a neighbor frame by sampling at p + field(p).

    The output mask is the input mask AND the warp staying in bounds AND the
    field being valid.
    """
    h, w = image.shape[:2]
    if field.shape != (h, w):
        raise ValueError("shape mismatch")
    grid = pixel_grid(w, h)
    warped, inb = bilinear_sample(image, grid + field.vectors)
    out_mask = inb & field.validity
    if mask is not None:
        if mask.shape != (h, w):
            raise ValueError("shape mismatch")
        out_mask = out_mask & mask
    return CompensatedView(warped, out_mask)


def compensation_field(
    depth_k: DepthMap,
    pose_k: Pose,
    pose_i: Pose,
    intrinsics: CameraIntrinsics,
    flow_k_to_i: FlowField,
    flow_i_to_k: FlowField | None = None,
    abs_tol: float = ABS_TOL_PX,
    rel_tol: float = REL_TOL,
):
    """Warp field and mask that freeze frame i's dynamic content at frame k's
    timestamp, for use as a multi-view supervision target.

    The field is anchored at frame i (the render viewpoint): each pixel p is
    first carried to its counterpart q in frame k by the splatted inverse
    camera flow, then offset by the object flow at q. Static content gets an
    exactly-zero field when the inputs are exact, so static targets are never
    resampled.

    Returns (field: FlowField anchored at i, mask: supervision validity).
    """
    cam_k_to_i = camera_flow(depth_k, pose_k, pose_i, intrinsics)
    obj_k_to_i = object_flow(flow_k_to_i, cam_k_to_i)
    cam_i_to_k = forward_splat_flow(cam_k_to_i)

    h, w = cam_i_to_k.shape
    grid = pixel_grid(w, h)
    q = grid + cam_i_to_k.vectors
    obj_at_q, _ = bilinear_sample(obj_k_to_i.vectors, q)
    obj_ok = sample_validity(obj_k_to_i.validity, q)

    # the camera term of the round trip i -> k -> i cancels out exactly, so
    # the sampling displacement is the object flow at the corresponding pixel
    vectors = obj_at_q
    validity = cam_i_to_k.validity & obj_ok
    field = FlowField(np.where(validity[..., None], vectors, 0.0), validity)

    mask = validity
    if flow_i_to_k is not None:
        cycle_k = bidirectional_mask(flow_k_to_i, flow_i_to_k, abs_tol, rel_tol)
        cycle_at_q = sample_validity(cycle_k, q)
        mask = mask & cycle_at_q
    return field, mask
