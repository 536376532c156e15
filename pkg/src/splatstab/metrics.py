"""Evaluation metrics: cropping ratio, distortion, stability, and the sparse
and dense geometry-consistency scores.

* Cropping ratio: per frame, the area of the largest axis-aligned fully-valid
  rectangle over the frame area, averaged over frames.
* Distortion: per frame, fit a homography from source to stabilized feature
  positions (normalized DLT) and take the ratio of singular values of its
  upper-left 2x2 affine block; the reported score is the worst frame.
* Stability: for each track and axis, detrend and take the spectral energy in
  discrete-frequency bins 2..6 over the energy in bins 2..N/2; tracks
  shorter than 32 frames are excluded. Perfectly smooth signals score 1.
* GC-sparse: mean reprojection error of triangulated points against observed
  track positions.
* GC-dense: hold out every 8th frame, predict it by rendering the refined
  scenes of the two nearest kept frames at the held-out pose, and report
  PSNR on static pixels (dynamic masks excluded), capped at 99 dB.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .geometry import CameraIntrinsics, project
from .splat import GaussianScene, RasterConfig, render
from .trajectory import Trajectory

__all__ = [
    "MetricReport",
    "TrackSet",
    "psnr",
    "cropping_ratio",
    "distortion",
    "stability",
    "gc_sparse",
    "gc_dense",
    "tracks_from_projections",
]

MIN_TRACK_FRAMES = 32
STABILITY_LOW_BINS = (2, 6)


@dataclass
class MetricReport:
    cropping_ratio: float | None = None
    distortion: float | None = None
    stability: float | None = None
    gc_sparse: float | None = None
    gc_dense: float | None = None

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None})


@dataclass
class TrackSet:
    """Per-track 2D positions: list of (T, 2) arrays with NaN at invisible frames."""

    tracks: list

    def __post_init__(self):
        self.tracks = [np.asarray(t, dtype=np.float64) for t in self.tracks]
        for t in self.tracks:
            if t.ndim != 2 or t.shape[1] != 2:
                raise ValueError("each track must be (T, 2)")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0, mask: np.ndarray | None = None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mask is not None:
        diff2 = (a - b) ** 2
        if diff2.ndim == 3:
            diff2 = diff2.mean(axis=2)
        if not mask.any():
            return 99.0
        mse = float(diff2[mask].mean())
    else:
        mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return 99.0
    return float(min(10.0 * np.log10(peak**2 / mse), 99.0))


# ---------------------------------------------------------------------------
# cropping ratio


def _largest_rectangle_area(mask: np.ndarray) -> int:
    """Largest axis-aligned all-True rectangle (histogram-of-heights scan)."""
    h, w = mask.shape
    heights = np.zeros(w, dtype=np.int64)
    best = 0
    for row in mask:
        heights = np.where(row, heights + 1, 0)
        stack: list[int] = []
        for i in range(w + 1):
            cur = heights[i] if i < w else 0
            while stack and heights[stack[-1]] >= cur:
                top = stack.pop()
                width = i if not stack else i - stack[-1] - 1
                best = max(best, int(heights[top]) * width)
            stack.append(i)
    return best


def cropping_ratio(validity_masks: np.ndarray) -> float:
    """Mean over frames of (largest fully-valid rectangle) / (frame area)."""
    masks = np.asarray(validity_masks, dtype=bool)
    if masks.ndim == 2:
        masks = masks[None]
    t, h, w = masks.shape
    ratios = [_largest_rectangle_area(masks[k]) / float(h * w) for k in range(t)]
    return float(np.mean(ratios))


# ---------------------------------------------------------------------------
# distortion


def _fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized DLT + least squares; src/dst are (N, 2), N >= 4."""
    if len(src) < 4:
        raise ValueError("need at least 4 correspondences")

    def normalize(pts):
        mean = pts.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - mean, axis=1)), 1e-12)
        t = np.array([[scale, 0, -scale * mean[0]], [0, scale, -scale * mean[1]], [0, 0, 1]])
        homog = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ t.T
        return homog[:, :2], t

    s_n, t_s = normalize(src)
    d_n, t_d = normalize(dst)
    rows = []
    for (x, y), (u, v) in zip(s_n, d_n):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    h_n = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_d) @ h_n @ t_s
    return h / h[2, 2]


def distortion(src_features, dst_features):
    """Worst-frame anisotropy of per-frame homographies.

    `src_features`/`dst_features` are per-frame (N, 2) arrays of matched
    positions. Returns (D, per-frame list); degenerate frames are skipped
    and reported as None.
    """
    per_frame: list[float | None] = []
    for src, dst in zip(src_features, dst_features):
        src = np.asarray(src, dtype=np.float64)
        dst = np.asarray(dst, dtype=np.float64)
        try:
            h = _fit_homography(src, dst)
            sv = np.linalg.svd(h[:2, :2], compute_uv=False)
            if sv[0] < 1e-12:
                raise np.linalg.LinAlgError
            per_frame.append(float(sv[1] / sv[0]))
        except (np.linalg.LinAlgError, ValueError):
            per_frame.append(None)
    valid = [d for d in per_frame if d is not None]
    if not valid:
        raise ValueError("no frame produced a usable homography")
    return float(min(valid)), per_frame


# ---------------------------------------------------------------------------
# stability


def _component_stability(signal: np.ndarray) -> float | None:
    n = len(signal)
    if n < MIN_TRACK_FRAMES:
        return None
    x = np.arange(n)
    coeffs = np.polyfit(x, signal, 1)
    resid = signal - np.polyval(coeffs, x)
    spectrum = np.abs(np.fft.rfft(resid)) ** 2
    lo, hi = STABILITY_LOW_BINS
    top = n // 2
    denom = spectrum[lo : top + 1].sum()
    if denom < 1e-18:
        return 1.0  # perfectly smooth signal by convention
    return float(spectrum[lo : min(hi, top) + 1].sum() / denom)


def _longest_visible_run(track: np.ndarray) -> np.ndarray | None:
    visible = np.isfinite(track).all(axis=1)
    best_len, best_start = 0, 0
    run_start = None
    for i, v in enumerate(np.concatenate([visible, [False]])):
        if v and run_start is None:
            run_start = i
        elif not v and run_start is not None:
            if i - run_start > best_len:
                best_len, best_start = i - run_start, run_start
            run_start = None
    if best_len == 0:
        return None
    return track[best_start : best_start + best_len]


def stability(tracks: TrackSet | Trajectory) -> float:
    """Low-frequency energy ratio of feature tracks (or of a trajectory's
    translation and rotation components)."""
    signals = []
    if isinstance(tracks, Trajectory):
        ts = tracks.translations()
        qs = tracks.quaternions()
        flip = np.cumprod(np.where(np.sum(qs[1:] * qs[:-1], axis=1) < 0, -1.0, 1.0))
        qs = np.concatenate([qs[:1], qs[1:] * flip[:, None]], axis=0)
        signals.extend(ts.T)
        signals.extend(qs.T)
    else:
        for track in tracks.tracks:
            run = _longest_visible_run(track)
            if run is None or len(run) < MIN_TRACK_FRAMES:
                continue
            signals.extend(run.T)
    values = [s for s in (_component_stability(np.asarray(sig)) for sig in signals) if s is not None]
    if not values:
        raise ValueError("no track spans the minimum frame count")
    return float(np.clip(np.mean(values), 0.0, 1.0))


def tracks_from_projections(points: np.ndarray, trajectory: Trajectory, intrinsics: CameraIntrinsics) -> TrackSet:
    """Synthesize tracks by projecting fixed world points along a trajectory."""
    t = len(trajectory)
    tracks = np.full((len(points), t, 2), np.nan)
    for k in range(t):
        pix, _, ok = project(points, intrinsics, trajectory[k])
        inb = (
            ok
            & (pix[:, 0] >= 0) & (pix[:, 0] <= intrinsics.width - 1)
            & (pix[:, 1] >= 0) & (pix[:, 1] <= intrinsics.height - 1)
        )
        tracks[inb, k] = pix[inb]
    return TrackSet(list(tracks))


# ---------------------------------------------------------------------------
# geometry consistency


def gc_sparse(points: np.ndarray, observations: dict, trajectory: Trajectory, intrinsics: CameraIntrinsics) -> float:
    """Mean reprojection error (px) of world points against observations.

    `observations` maps frame -> list of (point_index, (u, v))."""
    errors = []
    for frame, obs in observations.items():
        if not obs:
            continue
        idx = np.array([o[0] for o in obs], dtype=np.int64)
        seen = np.array([o[1] for o in obs], dtype=np.float64)
        pix, _, ok = project(points[idx], intrinsics, trajectory[frame])
        errors.extend(np.linalg.norm(pix[ok] - seen[ok], axis=1))
    if not errors:
        raise ValueError("no observations")
    return float(np.mean(errors))


def gc_dense(
    frames: np.ndarray,
    scenes: list[GaussianScene],
    trajectory: Trajectory,
    intrinsics: CameraIntrinsics,
    dynamic_masks: np.ndarray | None = None,
    interval: int = 8,
    raster: RasterConfig | None = None,
    alpha_floor: float = 0.5,
) -> float:
    """Held-out view synthesis quality: every `interval`-th frame is predicted
    by averaging renders of the nearest kept scenes at the held-out pose."""
    t = len(frames)
    if t < 2 * interval:
        raise ValueError(f"need at least {2 * interval} frames")
    holdouts = [k for k in range(t) if k % interval == 0]
    scores = []
    for k in holdouts:
        neighbors = [j for j in (k - 1, k + 1) if 0 <= j < t and j % interval != 0]
        if not neighbors:
            continue
        preds = []
        covers = []
        for j in neighbors:
            out = render(scenes[j], intrinsics, trajectory[k], raster)
            preds.append(out.color)
            covers.append(out.alpha > alpha_floor)
        pred = np.mean(preds, axis=0)
        cover = np.logical_and.reduce(covers)
        if dynamic_masks is not None:
            cover &= ~dynamic_masks[k]
        scores.append(psnr(pred, frames[k], mask=cover))
    return float(np.mean(scores))
