"""Synthetic ground-truth generator.

Scenes are textured planes (plus one optionally moving textured quad)
rendered by analytic ray casting: closed-form plane intersections with
procedural textures evaluated exactly at the hit point. Depth, total flow,
camera flow, and dynamic masks are exact by construction, which makes the
generated bundles usable as oracles for every other module.

Camera paths are a smooth analytic base plus seeded jitter; the jittered
path is the "unstable" trajectory and the base is the ground-truth smooth
one. Rotations are defined in continuous time (piecewise slerp between
frame samples), so gyro logs and rolling-shutter row times are consistent
with the rendered frames.

Scene spec JSON (all keys optional, defaults below):

    {
      "width": 128, "height": 128, "focal": 110.0,
      "frame_count": 10, "fps": 30.0,
      "planes": [{"point": [0,0,5], "normal": [0,0,-1],
                  "texture": "noise"|"checker", "texture_scale": 0.6,
                  "texture_seed": 1, "half_extent": null | [hu, hv]}],
      "moving": null | {"center": [0.3,0.1,2.5], "velocity": [-1.5,0,0],
                        "normal": [0,0,-1], "half_extent": [0.35,0.35],
                        "texture": "noise", "texture_scale": 0.25,
                        "texture_seed": 7},
      "path": {"start": [0,0,0], "velocity": [0,0,0],
               "sway_amplitude": [0,0,0], "sway_period": 2.0,
               "yaw_amplitude_deg": 0.0, "yaw_period": 3.0},
      "jitter": {"sigma_t": 0.02, "sigma_r_deg": 0.5,
                 "lowpass_sigma": 1.0, "seed": 0},
      "flow_radius": 3, "gyro_rate": 4, "n_points": 200, "seed": 0
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .bundle import VideoBundle
from .flow import FlowField
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    Pose,
    pixel_grid,
    project,
    quat_from_axis_angle,
    quat_multiply,
    quat_normalize,
    quat_slerp,
    quat_to_matrix,
)
from .rolling_shutter import GyroLog, OisLog
from .trajectory import Trajectory

__all__ = [
    "PlaneSpec",
    "MovingObjectSpec",
    "PathSpec",
    "JitterSpec",
    "SceneSpec",
    "SyntheticScene",
    "generate",
    "rs_warp",
    "spec_from_dict",
    "spec_to_dict",
    "default_spec",
]


# ---------------------------------------------------------------------------
# spec dataclasses


@dataclass
class PlaneSpec:
    point: tuple = (0.0, 0.0, 5.0)
    normal: tuple = (0.0, 0.0, -1.0)
    texture: str = "noise"  # "noise" | "checker"
    texture_scale: float = 0.6
    texture_seed: int = 1
    half_extent: tuple | None = None  # (hu, hv) in meters, None = infinite


@dataclass
class MovingObjectSpec:
    center: tuple = (0.3, 0.1, 2.5)
    velocity: tuple = (-1.5, 0.0, 0.0)  # m/s
    normal: tuple = (0.0, 0.0, -1.0)
    half_extent: tuple = (0.35, 0.35)
    texture: str = "noise"
    texture_scale: float = 0.25
    texture_seed: int = 7


@dataclass
class PathSpec:
    start: tuple = (0.0, 0.0, 0.0)
    velocity: tuple = (0.0, 0.0, 0.0)  # m/s
    sway_amplitude: tuple = (0.0, 0.0, 0.0)  # m
    sway_period: float = 2.0  # s
    yaw_amplitude_deg: float = 0.0
    yaw_period: float = 3.0


@dataclass
class JitterSpec:
    sigma_t: float = 0.02  # m, per-axis translation std
    sigma_r_deg: float = 0.5  # per-axis rotation std
    lowpass_sigma: float = 1.0  # frames; 0 = white jitter
    seed: int = 0


@dataclass
class SceneSpec:
    width: int = 128
    height: int = 128
    focal: float = 110.0
    frame_count: int = 10
    fps: float = 30.0
    planes: list = field(default_factory=lambda: [
        PlaneSpec(),
        PlaneSpec(point=(0.0, 1.4, 0.0), normal=(0.0, -1.0, 0.0), texture_seed=2, texture_scale=0.5),
    ])
    moving: MovingObjectSpec | None = None
    path: PathSpec = field(default_factory=PathSpec)
    jitter: JitterSpec = field(default_factory=JitterSpec)
    flow_radius: int = 3
    gyro_rate: int = 4  # samples per frame interval
    n_points: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.frame_count < 2:
            raise ValueError("frame_count must be >= 2")

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.focal, fy=self.focal,
            cx=(self.width - 1) / 2.0, cy=(self.height - 1) / 2.0,
            width=self.width, height=self.height,
        )


def default_spec() -> SceneSpec:
    return SceneSpec()


def spec_to_dict(spec: SceneSpec) -> dict:
    return asdict(spec)


def spec_from_dict(d: dict) -> SceneSpec:
    d = dict(d)
    if "planes" in d:
        d["planes"] = [PlaneSpec(**p) if isinstance(p, dict) else p for p in d["planes"]]
    if d.get("moving") is not None and isinstance(d["moving"], dict):
        d["moving"] = MovingObjectSpec(**d["moving"])
    if isinstance(d.get("path"), dict):
        d["path"] = PathSpec(**d["path"])
    if isinstance(d.get("jitter"), dict):
        d["jitter"] = JitterSpec(**d["jitter"])
    return SceneSpec(**d)


def spec_from_json(path) -> SceneSpec:
    with open(path) as f:
        return spec_from_dict(json.load(f))


# ---------------------------------------------------------------------------
# procedural textures (continuous functions of in-plane coordinates)


def _noise_texture(seed: int, scale: float):
    rng = np.random.default_rng(seed)
    n_waves = 6
    angles = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
    mags = rng.uniform(0.3, 1.0, size=(3, n_waves)) * (2 * np.pi / scale)
    fu = mags * np.cos(angles)
    fv = mags * np.sin(angles)
    phases = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
    amps = rng.uniform(0.5, 1.0, size=(3, n_waves))
    base = rng.uniform(0.35, 0.65, size=3)

    def tex(pu, pv):
        arg = pu[..., None, None] * fu + pv[..., None, None] * fv + phases
        val = (amps * np.sin(arg)).sum(axis=-1) / amps.sum(axis=-1)
        return base + 0.3 * val

    return tex


def _checker_texture(seed: int, scale: float):
    rng = np.random.default_rng(seed)
    c1 = rng.uniform(0.1, 0.4, size=3)
    c2 = rng.uniform(0.6, 0.9, size=3)

    def tex(pu, pv):
        parity = (np.floor(pu / scale) + np.floor(pv / scale)) % 2
        return np.where(parity[..., None] > 0.5, c2, c1)

    return tex


def _make_texture(kind: str, seed: int, scale: float):
    if kind == "noise":
        return _noise_texture(seed, scale)
    if kind == "checker":
        return _checker_texture(seed, scale)
    raise ValueError(f"unknown texture kind {kind!r}")


def _plane_axes(normal: np.ndarray):
    n = normal / np.linalg.norm(normal)
    helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, n)
    u = u / np.linalg.norm(u)
    v = np.cross(n, u)
    return n, u, v


class _Surface:
    def __init__(self, anchor, normal, texture, texture_seed, texture_scale,
                 half_extent=None, velocity=(0.0, 0.0, 0.0), dynamic=False):
        self.anchor0 = np.asarray(anchor, dtype=np.float64)
        self.normal, self.u_axis, self.v_axis = _plane_axes(np.asarray(normal, dtype=np.float64))
        self.half_extent = None if half_extent is None else tuple(half_extent)
        self.velocity = np.asarray(velocity, dtype=np.float64)
        self.dynamic = dynamic
        self.texture = _make_texture(texture, texture_seed, texture_scale)

    def anchor(self, t: float) -> np.ndarray:
        return self.anchor0 + self.velocity * t


# ---------------------------------------------------------------------------
# the scene


class SyntheticScene:
    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.camera = spec.camera
        self.surfaces = [
            _Surface(p.point, p.normal, p.texture, p.texture_seed, p.texture_scale, p.half_extent)
            for p in spec.planes
        ]
        if spec.moving is not None:
            m = spec.moving
            self.surfaces.append(
                _Surface(m.center, m.normal, m.texture, m.texture_seed, m.texture_scale,
                         m.half_extent, m.velocity, dynamic=True)
            )
        self._build_trajectories()

    # -- camera path --------------------------------------------------------

    def _build_trajectories(self):
        spec = self.spec
        t_frames = np.arange(spec.frame_count) / spec.fps
        path = spec.path
        start = np.asarray(path.start, dtype=np.float64)
        velocity = np.asarray(path.velocity, dtype=np.float64)
        sway = np.asarray(path.sway_amplitude, dtype=np.float64)
        phases = np.array([0.0, 2.0, 4.0])

        def base_t(t):
            return start + velocity * t + sway * np.sin(2 * np.pi * t / path.sway_period + phases)

        def base_q(t):
            if path.yaw_amplitude_deg == 0.0:
                return np.array([1.0, 0.0, 0.0, 0.0])
            yaw = np.deg2rad(path.yaw_amplitude_deg) * np.sin(2 * np.pi * t / path.yaw_period)
            return quat_from_axis_angle([0.0, 1.0, 0.0], yaw)

        rng = np.random.default_rng(spec.jitter.seed)
        jt = rng.normal(scale=spec.jitter.sigma_t, size=(spec.frame_count, 3)) if spec.jitter.sigma_t > 0 else np.zeros((spec.frame_count, 3))
        jr = rng.normal(scale=np.deg2rad(spec.jitter.sigma_r_deg), size=(spec.frame_count, 3)) if spec.jitter.sigma_r_deg > 0 else np.zeros((spec.frame_count, 3))
        if spec.jitter.lowpass_sigma > 0:
            jt = gaussian_filter1d(jt, spec.jitter.lowpass_sigma, axis=0, mode="nearest")
            jr = gaussian_filter1d(jr, spec.jitter.lowpass_sigma, axis=0, mode="nearest")

        smooth, unstable = [], []
        for k, t in enumerate(t_frames):
            qb, tb = base_q(t), base_t(t)
            smooth.append(Pose(qb, tb))
            ang = np.linalg.norm(jr[k])
            qj = np.array([1.0, 0, 0, 0]) if ang < 1e-15 else quat_from_axis_angle(jr[k], ang)
            unstable.append(Pose(quat_multiply(qb, qj), tb + jt[k]))
        self.times = t_frames
        self.trajectory_smooth = Trajectory(smooth)
        self.trajectory = Trajectory(unstable)

    def pose_of(self, k: int) -> Pose:
        return self.trajectory[k]

    def rotation_at(self, t: float) -> np.ndarray:
        """Continuous-time camera rotation: piecewise slerp between frames."""
        times = self.times
        if t <= times[0]:
            return self.trajectory[0].q.copy()
        if t >= times[-1]:
            return self.trajectory[-1].q.copy()
        hi = int(np.searchsorted(times, t, side="right"))
        lo = hi - 1
        alpha = (t - times[lo]) / (times[hi] - times[lo])
        return quat_slerp(self.trajectory[lo].q, self.trajectory[hi].q, alpha)

    # -- ray casting ----------------------------------------------------------

    def raycast(self, origin: np.ndarray, dirs: np.ndarray, t: float):
        """Nearest-hit intersection of rays with all surfaces at scene time t.

        Returns dict with s (ray parameter), point, color, velocity, dynamic,
        valid. If dirs have unit z in the camera frame, s equals camera depth.
        """
        n_rays = dirs.shape[0]
        best_s = np.full(n_rays, np.inf)
        best_idx = np.full(n_rays, -1, dtype=np.int64)
        for si, surf in enumerate(self.surfaces):
            denom = dirs @ surf.normal
            anchor = surf.anchor(t)
            num = (anchor - origin) @ surf.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                s = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
            ok = s > 1e-6
            if surf.half_extent is not None:
                x = origin + s[:, None] * dirs
                rel = x - anchor
                ok &= np.abs(rel @ surf.u_axis) <= surf.half_extent[0]
                ok &= np.abs(rel @ surf.v_axis) <= surf.half_extent[1]
            s = np.where(ok, s, np.inf)
            closer = s < best_s
            best_s = np.where(closer, s, best_s)
            best_idx = np.where(closer, si, best_idx)

        valid = best_idx >= 0
        point = origin + np.where(valid, best_s, 1.0)[:, None] * dirs
        color = np.zeros((n_rays, 3))
        velocity = np.zeros((n_rays, 3))
        dynamic = np.zeros(n_rays, dtype=bool)
        for si, surf in enumerate(self.surfaces):
            sel = best_idx == si
            if not np.any(sel):
                continue
            rel = point[sel] - surf.anchor(t)
            pu = rel @ surf.u_axis
            pv = rel @ surf.v_axis
            color[sel] = np.clip(surf.texture(pu, pv), 0.0, 1.0)
            velocity[sel] = surf.velocity
            dynamic[sel] = surf.dynamic
        return {
            "s": best_s, "point": point, "color": color,
            "velocity": velocity, "dynamic": dynamic, "valid": valid,
        }

    def _pixel_dirs(self, intrinsics: CameraIntrinsics, ois=(0.0, 0.0)) -> np.ndarray:
        grid = pixel_grid(intrinsics.width, intrinsics.height).reshape(-1, 2)
        x = (grid[:, 0] - intrinsics.cx - ois[0]) / intrinsics.fx
        y = (grid[:, 1] - intrinsics.cy - ois[1]) / intrinsics.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def render_view(self, pose: Pose, t: float, intrinsics: CameraIntrinsics | None = None):
        """Global-shutter render. Returns (frame, depth, dynamic mask, hits)."""
        k = intrinsics or self.camera
        h, w = k.height, k.width
        dirs_cam = self._pixel_dirs(k)
        dirs_world = dirs_cam @ quat_to_matrix(pose.q).T
        hits = self.raycast(pose.t, dirs_world, t)
        frame = hits["color"].reshape(h, w, 3)
        depth = DepthMap(hits["s"].reshape(h, w), hits["valid"].reshape(h, w))
        mask = hits["dynamic"].reshape(h, w)
        return frame, depth, mask, hits

    # -- flows ---------------------------------------------------------------

    def flow_pair(self, hits_i, t_i: float, pose_j: Pose, t_j: float,
                  intrinsics: CameraIntrinsics | None = None):
        """Exact total and camera flow from frame-time t_i hits toward pose_j."""
        k = intrinsics or self.camera
        h, w = k.height, k.width
        grid = pixel_grid(w, h).reshape(-1, 2)
        moved = hits_i["point"] + hits_i["velocity"] * (t_j - t_i)
        pix_total, _, ok_total = project(moved, k, pose_j)
        pix_cam, _, ok_cam = project(hits_i["point"], k, pose_j)
        valid = hits_i["valid"]
        total = FlowField(
            (pix_total - grid).reshape(h, w, 2), (valid & ok_total).reshape(h, w)
        )
        cam = FlowField(
            (pix_cam - grid).reshape(h, w, 2), (valid & ok_cam).reshape(h, w)
        )
        return total, cam

    # -- sparse points ---------------------------------------------------------

    def sample_points(self, rng: np.random.Generator):
        spec = self.spec
        pts = []
        attempts = 0
        while len(pts) < spec.n_points and attempts < spec.n_points * 20:
            attempts += 1
            k = int(rng.integers(spec.frame_count))
            u = rng.uniform(0, spec.width - 1)
            v = rng.uniform(0, spec.height - 1)
            pose = self.trajectory[k]
            d_cam = np.array([(u - self.camera.cx) / self.camera.fx,
                              (v - self.camera.cy) / self.camera.fy, 1.0])
            d_world = quat_to_matrix(pose.q) @ d_cam
            hit = self.raycast(pose.t, d_world[None], self.times[k])
            if hit["valid"][0] and not hit["dynamic"][0]:
                pts.append(hit["point"][0])
        points = np.array(pts) if pts else np.zeros((0, 3))
        visibility: dict[int, list[int]] = {}
        for k in range(spec.frame_count):
            pose = self.trajectory[k]
            vis = []
            for idx, p in enumerate(points):
                pix, z, ok = project(p[None], self.camera, pose)
                if not ok[0] or not (
                    0 <= pix[0, 0] <= spec.width - 1 and 0 <= pix[0, 1] <= spec.height - 1
                ):
                    continue
                # occlusion: cast toward the point; parameter 1 = the point itself
                hit = self.raycast(pose.t, (p - pose.t)[None], self.times[k])
                if hit["s"][0] < 1.0 - 1e-9:
                    continue
                vis.append(idx)
            visibility[k] = vis
        return points, visibility

    # -- bundle ----------------------------------------------------------------

    def generate(self) -> VideoBundle:
        spec = self.spec
        frames, depths, masks = [], [], []
        hits_all = []
        for k in range(spec.frame_count):
            frame, depth, mask, hits = self.render_view(self.trajectory[k], self.times[k])
            frames.append(frame)
            depths.append(depth)
            masks.append(mask)
            hits_all.append(hits)

        flows: dict[tuple[int, int], FlowField] = {}
        cam_flows: dict[tuple[int, int], FlowField] = {}
        for i in range(spec.frame_count):
            lo = max(0, i - spec.flow_radius)
            hi = min(spec.frame_count - 1, i + spec.flow_radius)
            for j in range(lo, hi + 1):
                if j == i:
                    continue
                total, cam = self.flow_pair(hits_all[i], self.times[i], self.trajectory[j], self.times[j])
                flows[(i, j)] = total
                cam_flows[(i, j)] = cam

        gyro_times = np.arange(spec.frame_count * spec.gyro_rate + 1) / (spec.fps * spec.gyro_rate)
        gyro_times = gyro_times[gyro_times <= self.times[-1] + 1e-12]
        gyro = GyroLog(gyro_times, np.stack([self.rotation_at(t) for t in gyro_times]))
        ois = OisLog.zero(0.0, float(self.times[-1]) + 1.0 / spec.fps)

        rng = np.random.default_rng(spec.seed + 99)
        points, visibility = self.sample_points(rng)

        return VideoBundle(
            intrinsics=self.camera,
            frames=np.stack(frames),
            depths=depths,
            trajectory=self.trajectory,
            flows=flows,
            masks=np.stack(masks) if spec.moving is not None else None,
            trajectory_smooth=self.trajectory_smooth,
            cam_flows=cam_flows,
            gyro=gyro,
            ois=ois,
            points=points,
            visibility=visibility,
            fps=spec.fps,
        )

    # -- rolling shutter ---------------------------------------------------------

    def render_rolling(self, k: int, readout_s: float, ramp_axis=(0.0, 1.0, 0.0),
                       ramp_total_rad: float = 0.0, ois_fn=None):
        """Re-render frame k row by row at its row-time rotation.

        Row r uses rotation ``rotation_at(t_k + r*readout/H)`` composed with a
        linear in-readout ramp of `ramp_total_rad` about `ramp_axis`, plus an
        optional OIS offset. The scene is frozen at the frame time. Returns
        (frame, gyro samples, ois samples) covering the readout.
        """
        kam = self.camera
        h, w = kam.height, kam.width
        t_k = self.times[k]
        axis = np.asarray(ramp_axis, dtype=np.float64)
        rows = np.arange(h)
        frame = np.zeros((h, w, 3))
        gyro_samples, ois_samples = [], []
        base_dirs = self._pixel_dirs(kam).reshape(h, w, 3)
        for r in rows:
            t_row = t_k + r * readout_s / h
            q_row = self.rotation_at(t_row)
            if ramp_total_rad != 0.0:
                ramp = quat_from_axis_angle(axis, ramp_total_rad * r / max(h - 1, 1))
                q_row = quat_normalize(quat_multiply(q_row, ramp))
            offset = np.zeros(2) if ois_fn is None else np.asarray(ois_fn(t_row), dtype=np.float64)
            if np.any(offset):
                dirs_cam = self._pixel_dirs(kam, ois=offset).reshape(h, w, 3)[r]
            else:
                dirs_cam = base_dirs[r]
            dirs_world = dirs_cam @ quat_to_matrix(q_row).T
            hit = self.raycast(self.trajectory[k].t, dirs_world, t_k)
            frame[r] = hit["color"]
            gyro_samples.append((t_row, q_row))
            ois_samples.append((t_row, offset[0], offset[1]))
        return frame, gyro_samples, ois_samples


def generate(spec: SceneSpec) -> VideoBundle:
    return SyntheticScene(spec).generate()


def rs_warp(scene: SyntheticScene, readout_s: float, ramp_axis=(0.0, 1.0, 0.0),
            ramp_total_rad: float = 0.0, ois_fn=None):
    """Corrupt every frame of a scene with rolling shutter (and optional OIS).

    Returns (frames (T, H, W, 3), GyroLog, OisLog) where the logs sample the
    exact per-row rotations/offsets used for the corruption.
    """
    frames = []
    gyro_all, ois_all = [], []
    for k in range(scene.spec.frame_count):
        frame, gyro_s, ois_s = scene.render_rolling(k, readout_s, ramp_axis, ramp_total_rad, ois_fn)
        frames.append(frame)
        gyro_all.extend(gyro_s)
        ois_all.extend(ois_s)
    times = np.array([t for t, _ in gyro_all])
    order = np.argsort(times, kind="stable")
    uniq = np.concatenate([[True], np.diff(times[order]) > 1e-12])
    keep = order[uniq]
    gyro = GyroLog(times[keep], np.stack([gyro_all[i][1] for i in keep]))
    ois = OisLog(times[keep], np.array([[ois_all[i][1], ois_all[i][2]] for i in keep]))
    return np.stack(frames), gyro, ois
