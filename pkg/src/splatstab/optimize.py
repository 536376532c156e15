"""Test-time optimization of per-frame Gaussian scenes.

Each scene is refined over a fixed number of epochs against (1) a multi-view
dynamics-aware photometric loss on its own frame and sampled neighbors,
(2) a cross-frame primitive regularizer over a dilated temporal window whose
dilation grows per epoch, (3) a scale ceiling regularizer, and (4) a depth
drift regularizer. Neighbor scenes are read from snapshots frozen at epoch
boundaries (Jacobi updates), so frame order does not affect the result.

On padded (extrapolated) bundles, supervision renders use the original
intrinsics and original frames; the padded borders are constrained only by
the regularizers, matching the "extrapolate first, supervise on originals"
recipe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .bundle import VideoBundle
from .flow import FlowField, bidirectional_mask, compensate_neighbor, compensation_field
from .geometry import CameraIntrinsics, DepthMap
from .losses import (
    dilation_for_epoch,
    loss_scale,
    pair_frames,
    pair_regularizer,
    photometric_loss,
)
from .losses import TAU_DEPTH_FACTOR
from .splat import GaussianScene, RasterConfig, SceneInit, build_scene, render_backward, render_with_cache
from .splat.backward import SceneGrads
from .splat.scene import PARAM_NAMES

__all__ = ["OptimConfig", "LossBreakdown", "loss_rgb", "optimize_scene", "optimize_bundle", "build_scenes"]


@dataclass
class OptimConfig:
    epochs: int = 3
    steps_per_epoch: int = 30
    views_per_step: int = 4  # S: the source frame plus S-1 sampled neighbors
    window: int = 10  # W: neighbor sampling range [k-W, k+W]
    reg_window: int = 5  # s: dilated regularization window (odd)
    dilation_schedule: tuple = (0, 2, 4)
    lambda_ssim: float = 0.2
    lambda_consistent: float = 0.1
    lambda_scale: float = 0.01
    lambda_offset: float = 0.1
    lr_offset: float = 1e-4  # meters per unit anchor depth
    lr_scale: float = 1e-3
    lr_rot: float = 1e-3
    lr_alpha: float = 5e-2
    lr_color: float = 5e-3
    optimizer: str = "adam"  # "adam" | "gd"
    seed: int = 0
    offset_foreground_only: bool = True
    raw_position_reg: bool = False
    scene_init: SceneInit = field(default_factory=SceneInit)
    raster: RasterConfig = field(default_factory=RasterConfig)

    def __post_init__(self):
        if self.epochs != len(self.dilation_schedule):
            raise ValueError("epochs must equal the dilation schedule length")
        if self.reg_window < 1 or self.reg_window % 2 == 0:
            raise ValueError("reg_window must be odd")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_of(self, name: str) -> float:
        return {
            "offset": self.lr_offset,
            "log_scale": self.lr_scale,
            "rot": self.lr_rot,
            "alpha_logit": self.lr_alpha,
            "color": self.lr_color,
        }[name]


@dataclass
class LossBreakdown:
    rgb: float
    consistent: float
    scale: float
    offset: float
    total: float
    frame: int = 0
    epoch: int = 0
    step: int = 0

    @staticmethod
    def assemble(rgb, consistent, scale, offset, cfg: OptimConfig, **meta) -> "LossBreakdown":
        total = (
            rgb
            + cfg.lambda_consistent * consistent
            + cfg.lambda_scale * scale
            + cfg.lambda_offset * offset
        )
        return LossBreakdown(rgb, consistent, scale, offset, total, **meta)

    def to_json(self) -> str:
        return json.dumps(asdict(self))


# ---------------------------------------------------------------------------
# supervision targets


class _SupervisionCache:
    """Per-bundle cache of compensated targets and pair masks.

    Targets live on the original (unpadded) pixel grid; `original_*` views of
    a padded bundle strip the border.
    """

    def __init__(self, bundle: VideoBundle):
        self.bundle = bundle
        pad = bundle.pad
        h, w = bundle.shape
        self.k_opt = (
            bundle.intrinsics
            if pad == 0
            else CameraIntrinsics(
                bundle.intrinsics.fx, bundle.intrinsics.fy,
                bundle.intrinsics.cx - pad, bundle.intrinsics.cy - pad,
                w - 2 * pad, h - 2 * pad,
            )
        )
        self._targets: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self._pair_masks: dict[tuple[int, int], np.ndarray] = {}

    def original_frame(self, k: int) -> np.ndarray:
        sl = self.bundle.original_window()
        return self.bundle.frames[k][sl[0], sl[1]]

    def original_depth(self, k: int) -> DepthMap:
        sl = self.bundle.original_window()
        return DepthMap(
            self.bundle.depths[k].values[sl[0], sl[1]],
            self.bundle.depths[k].validity[sl[0], sl[1]],
        )

    def original_mask(self, k: int) -> np.ndarray | None:
        if self.bundle.masks is None:
            return None
        sl = self.bundle.original_window()
        return self.bundle.masks[k][sl[0], sl[1]]

    def candidates(self, k: int, window: int) -> list[int]:
        t = self.bundle.frame_count
        out = []
        for i in range(max(0, k - window), min(t - 1, k + window) + 1):
            if i != k and (k, i) in self.bundle.flows and (i, k) in self.bundle.flows:
                out.append(i)
        return out

    def target(self, k: int, i: int):
        """Supervision target for scene k rendered at view i (original grid)."""
        if i == k:
            img = self.original_frame(k)
            return img, np.ones(img.shape[:2], dtype=bool)
        key = (k, i)
        if key not in self._targets:
            field_i, mask = compensation_field(
                self.original_depth(k),
                self.bundle.trajectory[k],
                self.bundle.trajectory[i],
                self.k_opt,
                self.bundle.flows[(k, i)],
                self.bundle.flows[(i, k)],
            )
            view = compensate_neighbor(self.original_frame(i), field_i, mask)
            self._targets[key] = (view.image, view.mask)
        return self._targets[key]

    def pair_mask(self, k: int, j: int) -> np.ndarray:
        key = (k, j)
        if key not in self._pair_masks:
            self._pair_masks[key] = bidirectional_mask(self.bundle.flows[(k, j)], self.bundle.flows[(j, k)])
        return self._pair_masks[key]

    def pair_corr(self, k: int, j: int) -> FlowField:
        return self.bundle.flows[(k, j)]

    def padded_pair_inputs(self, k: int, j: int):
        """Correspondence + mask lifted onto the padded grid (original window only)."""
        corr = self.pair_corr(k, j)
        mask = self.pair_mask(k, j)
        pad = self.bundle.pad
        if pad == 0:
            return corr, mask
        h, w = self.bundle.shape
        vec = np.zeros((h, w, 2))
        val = np.zeros((h, w), dtype=bool)
        big_mask = np.zeros((h, w), dtype=bool)
        sl = self.bundle.original_window()
        vec[sl[0], sl[1]] = corr.vectors
        val[sl[0], sl[1]] = corr.validity
        big_mask[sl[0], sl[1]] = mask
        return FlowField(vec, val), big_mask


# ---------------------------------------------------------------------------
# parameter updates


class _Optimizer:
    def __init__(self, cfg: OptimConfig, scene: GaussianScene):
        self.cfg = cfg
        self.t = 0
        self.state = {name: (np.zeros_like(getattr(scene, name)), np.zeros_like(getattr(scene, name)))
                      for name in PARAM_NAMES}
        depth = scene.anchor_depth if scene.anchor_depth is not None else np.ones(len(scene))
        self.depth_scale = depth

    def step(self, scene: GaussianScene, grads: SceneGrads):
        self.t += 1
        for name in PARAM_NAMES:
            g = getattr(grads, name)
            lr = self.cfg.lr_of(name)
            param = getattr(scene, name)
            if self.cfg.optimizer == "gd":
                delta = lr * g
            else:
                m, v = self.state[name]
                beta1, beta2, eps = 0.9, 0.999, 1e-8
                m *= beta1
                m += (1 - beta1) * g
                v *= beta2
                v += (1 - beta2) * g * g
                mhat = m / (1 - beta1**self.t)
                vhat = v / (1 - beta2**self.t)
                delta = lr * mhat / (np.sqrt(vhat) + eps)
            if name == "offset":
                delta = delta * self.depth_scale[:, None]
            param -= delta


# ---------------------------------------------------------------------------
# losses over a scene


def loss_rgb(
    scene: GaussianScene,
    sup: _SupervisionCache,
    views: list[int],
    cfg: OptimConfig,
):
    """Multi-view photometric loss. Returns (value, per-view image grads,
    render caches) so the caller can chain gradients through the renderer."""
    total = 0.0
    grads = []
    caches = []
    used = 0
    for i in views:
        target, mask = sup.target(scene.source_frame, i)
        if not mask.any():
            grads.append(None)
            caches.append(None)
            continue
        out, cache = render_with_cache(scene, sup.k_opt, sup.bundle.trajectory[i], cfg.raster)
        val, gimg = photometric_loss(out.color, target, mask, cfg.lambda_ssim)
        total += val
        grads.append(gimg)
        caches.append((out, cache))
        used += 1
    if used == 0:
        raise ValueError("empty supervision in every sampled view")
    return total / used, [None if g is None else g / used for g in grads], caches


def _offset_loss_from_render(out, prior: DepthMap, foreground: np.ndarray | None, alpha_floor=0.5):
    delta = out.depth - prior.values
    covered = (out.alpha > alpha_floor) & prior.validity
    if foreground is not None:
        covered &= foreground
    exceed = covered & (np.abs(delta) > TAU_DEPTH_FACTOR * prior.values)
    count = int(exceed.sum())
    if count == 0:
        return 0.0, None
    value = float(np.abs(delta[exceed]).sum()) / count
    return value, np.where(exceed, np.sign(delta), 0.0) / count


def _scene_step(
    scene: GaussianScene,
    sup: _SupervisionCache,
    snapshots: dict[int, GaussianScene],
    cfg: OptimConfig,
    epoch: int,
    rng: np.random.Generator,
) -> tuple[LossBreakdown, SceneGrads]:
    k = scene.source_frame
    candidates = sup.candidates(k, cfg.window)
    n_extra = min(cfg.views_per_step - 1, len(candidates))
    extra = sorted(rng.choice(len(candidates), size=n_extra, replace=False)) if n_extra else []
    views = [k] + [candidates[i] for i in extra]

    rgb_val, img_grads, caches = loss_rgb(scene, sup, views, cfg)
    total_grads = SceneGrads.zeros(len(scene))
    offset_val = 0.0
    for i, gimg, oc in zip(views, img_grads, caches):
        if gimg is None:
            continue
        out, cache = oc
        grad_depth = None
        if i == k and cfg.lambda_offset > 0:
            fg = sup.original_mask(k) if cfg.offset_foreground_only else None
            offset_val, gdep = _offset_loss_from_render(out, sup.original_depth(k), fg)
            if gdep is not None:
                grad_depth = cfg.lambda_offset * gdep
        total_grads.add_(render_backward(scene, cache, gimg, grad_depth=grad_depth))

    consistent_val = 0.0
    if cfg.lambda_consistent > 0:
        d = dilation_for_epoch(epoch, cfg.dilation_schedule)
        partners = pair_frames(k, cfg.reg_window, d, sup.bundle.frame_count)
        vals = []
        for j in partners:
            if j == k:
                vals.append(0.0)
                continue
            if (k, j) not in sup.bundle.flows or (j, k) not in sup.bundle.flows:
                continue
            corr, mask = sup.padded_pair_inputs(k, j)
            val, gi, _ = pair_regularizer(scene, snapshots[j], corr, mask, cfg.raw_position_reg)
            vals.append(val)
            total_grads.add_(gi.scaled(cfg.lambda_consistent / len(partners)))
        consistent_val = sum(vals) / len(partners) if partners else 0.0

    scale_val = 0.0
    if cfg.lambda_scale > 0:
        scale_val, gs = loss_scale(scene, sup.k_opt.width)
        total_grads.add_(gs.scaled(cfg.lambda_scale))

    breakdown = LossBreakdown.assemble(rgb_val, consistent_val, scale_val, offset_val, cfg, frame=k, epoch=epoch)
    if not np.isfinite(breakdown.total):
        raise RuntimeError(
            f"optimization diverged: non-finite loss at frame {k}, epoch {epoch} ({breakdown})"
        )
    return breakdown, total_grads


# ---------------------------------------------------------------------------
# drivers


def build_scenes(bundle: VideoBundle, cfg: OptimConfig) -> list[GaussianScene]:
    return [
        build_scene(bundle.frames[k], bundle.depths[k], bundle.intrinsics, bundle.trajectory[k],
                    cfg.scene_init, source_frame=k)
        for k in range(bundle.frame_count)
    ]


def optimize_scene(
    k: int,
    bundle: VideoBundle,
    cfg: OptimConfig | None = None,
    scenes: list[GaussianScene] | None = None,
) -> tuple[GaussianScene, list[LossBreakdown]]:
    """Refine frame k's scene. Neighbor scenes stay at their initial state
    (single-scene calls see the same Jacobi semantics as the bundle driver)."""
    cfg = cfg or OptimConfig()
    sup = _SupervisionCache(bundle)
    scenes = scenes if scenes is not None else build_scenes(bundle, cfg)
    scene = scenes[k]
    snapshots = {j: s for j, s in enumerate(scenes)}
    opt = _Optimizer(cfg, scene)
    rng = np.random.default_rng(cfg.seed * 100003 + k)
    history = []
    for epoch in range(cfg.epochs):
        for step in range(cfg.steps_per_epoch):
            breakdown, grads = _scene_step(scene, sup, snapshots, cfg, epoch, rng)
            breakdown.step = step
            opt.step(scene, grads)
            history.append(breakdown)
    return scene, history


def optimize_bundle(
    bundle: VideoBundle,
    cfg: OptimConfig | None = None,
) -> tuple[list[GaussianScene], list[LossBreakdown]]:
    """Refine every frame's scene with epoch-synchronized Jacobi sweeps:
    within an epoch, pair regularizers read neighbors from the previous
    epoch's snapshot, so per-frame results are order-independent."""
    cfg = cfg or OptimConfig()
    sup = _SupervisionCache(bundle)
    scenes = build_scenes(bundle, cfg)
    optimizers = [_Optimizer(cfg, s) for s in scenes]
    rngs = [np.random.default_rng(cfg.seed * 100003 + k) for k in range(len(scenes))]
    history = []
    for epoch in range(cfg.epochs):
        snapshots = {j: s.copy() for j, s in enumerate(scenes)}
        for k, scene in enumerate(scenes):
            for step in range(cfg.steps_per_epoch):
                breakdown, grads = _scene_step(scene, sup, snapshots, cfg, epoch, rngs[k])
                breakdown.step = step
                optimizers[k].step(scene, grads)
                history.append(breakdown)
    return scenes, history
