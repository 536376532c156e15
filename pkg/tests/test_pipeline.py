import numpy as np
import pytest

from splatstab.metrics import cropping_ratio, psnr, stability, tracks_from_projections
from splatstab.optimize import OptimConfig
from splatstab.pipeline import stabilize
from splatstab.synth import JitterSpec, SceneSpec, SyntheticScene


@pytest.fixture(scope="module")
def shaky_bundle():
    spec = SceneSpec(
        width=48, height=48, frame_count=12, flow_radius=2, n_points=60,
        jitter=JitterSpec(sigma_t=0.02, sigma_r_deg=0.6, lowpass_sigma=0.0, seed=11),
    )
    return SyntheticScene(spec).generate()


@pytest.fixture(scope="module")
def long_shaky_bundle():
    # stability tracks need at least 32 frames
    spec = SceneSpec(
        width=48, height=48, frame_count=36, flow_radius=1, n_points=60,
        jitter=JitterSpec(sigma_t=0.02, sigma_r_deg=0.6, lowpass_sigma=0.0, seed=12),
    )
    return SyntheticScene(spec).generate()


def light_cfg(**kw):
    base = dict(steps_per_epoch=2, window=2, views_per_step=2)
    base.update(kw)
    return OptimConfig(**base)


def test_stabilize_near_identity_at_sigma_zero(shaky_bundle):
    # window 1 = no smoothing: output should reproduce the source frames
    result = stabilize(shaky_bundle, sigma=1e-6, window=1, pad=6, cfg=light_cfg())
    assert result.frames.shape == shaky_bundle.frames.shape
    for k in (0, 5, 11):
        assert result.trajectory_smooth[k].almost_equal(shaky_bundle.trajectory[k], tol=1e-9)
        assert psnr(result.frames[k], shaky_bundle.frames[k]) > 35.0


def test_stabilize_smooth_input_fixed_point(shaky_bundle):
    smooth_spec = SceneSpec(
        width=48, height=48, frame_count=12, flow_radius=2, n_points=0,
        jitter=JitterSpec(sigma_t=0.0, sigma_r_deg=0.0),
    )
    b = SyntheticScene(smooth_spec).generate()
    result = stabilize(b, sigma=4.0, pad=6, cfg=light_cfg())
    for k in range(b.frame_count):
        assert np.linalg.norm(result.trajectory_smooth[k].t - b.trajectory[k].t) < 1e-3
        dq = min(
            np.linalg.norm(result.trajectory_smooth[k].q - b.trajectory[k].q),
            np.linalg.norm(result.trajectory_smooth[k].q + b.trajectory[k].q),
        )
        assert dq < np.deg2rad(0.1)


def test_stabilize_improves_stability_and_covers_frame(long_shaky_bundle):
    b = long_shaky_bundle
    cfg = light_cfg(steps_per_epoch=1, window=1)
    result = stabilize(b, sigma=3.0, pad=10, cfg=cfg)
    s_in = stability(tracks_from_projections(b.points, b.trajectory, b.intrinsics))
    s_out = stability(tracks_from_projections(b.points, result.trajectory_smooth, b.intrinsics))
    assert s_out > s_in
    assert cropping_ratio(result.validity) == 1.0
    assert len(result.history) == b.frame_count * 3 * 1


def test_stabilize_rejects_padded_bundle(shaky_bundle):
    from splatstab.extrapolate import extrapolate_frames

    padded = extrapolate_frames(shaky_bundle, pad=4)
    with pytest.raises(ValueError, match="padded"):
        stabilize(padded, cfg=light_cfg())


def test_stabilize_cli_end_to_end(tmp_path):
    from splatstab.bundle import save_bundle
    from splatstab.cli import main

    spec = SceneSpec(width=40, height=40, frame_count=5, flow_radius=2, n_points=0,
                     jitter=JitterSpec(sigma_t=0.01, sigma_r_deg=0.3, seed=3))
    bundle = SyntheticScene(spec).generate()
    bdir = tmp_path / "bundle"
    save_bundle(bundle, bdir)
    out = tmp_path / "out"
    code = main([
        "stabilize",
        "--frames", str(bdir / "frames"),
        "--depths", str(bdir / "depths"),
        "--flows", str(bdir / "flows"),
        "--poses", str(bdir / "poses.json"),
        "--intrinsics", str(bdir / "intrinsics.json"),
        "--sigma", "2.0", "--pad", "4", "--epochs", "2", "--steps", "2",
        "--out", str(out),
    ])
    assert code == 0
    assert (out / "frames" / "000004.png").exists()
    assert (out / "poses_smooth.json").exists()
    assert (out / "scenes" / "000000.gavs").exists()
    lines = (out / "losses.jsonl").read_text().strip().splitlines()
    assert len(lines) == 5 * 2 * 2
    rec = __import__("json").loads(lines[0])
    assert {"rgb", "consistent", "scale", "offset", "total"} <= set(rec)
