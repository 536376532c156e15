import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from splatstab import fileio
from splatstab.bundle import load_bundle, save_bundle
from splatstab.fileio import FormatError
from splatstab.geometry import CameraIntrinsics, Pose


# -- PFM ------------------------------------------------------------------------


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=16),
                  elements=st.floats(-1e6, 1e6, width=32)))
@settings(max_examples=40, deadline=None)
def test_pfm_round_trip_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("pfm") / "x.pfm"
    fileio.write_pfm(path, arr)
    back = fileio.read_pfm(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_pfm_known_fixture(tmp_path):
    # hand-built bytes: 2x2, little endian, bottom-up scanlines
    payload = struct.pack("<4f", 1.0, 2.0, 3.0, 4.0)  # bottom row first
    path = tmp_path / "fix.pfm"
    path.write_bytes(b"Pf\n2 2\n-1.0\n" + payload)
    img = fileio.read_pfm(path)
    assert np.array_equal(img, np.array([[3.0, 4.0], [1.0, 2.0]], dtype=np.float32))


def test_pfm_big_endian_fixture(tmp_path):
    payload = struct.pack(">4f", 1.0, 2.0, 3.0, 4.0)
    path = tmp_path / "be.pfm"
    path.write_bytes(b"Pf\n2 2\n1.0\n" + payload)
    img = fileio.read_pfm(path)
    assert np.array_equal(img, np.array([[3.0, 4.0], [1.0, 2.0]], dtype=np.float32))


def test_pfm_bad_header(tmp_path):
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"PF\n2 2\n-1.0\n" + b"\x00" * 48)
    with pytest.raises(FormatError):
        fileio.read_pfm(path)


def test_pfm_nan_payload_rejected(tmp_path):
    path = tmp_path / "nan.pfm"
    path.write_bytes(b"Pf\n2 1\n-1.0\n" + struct.pack("<2f", 1.0, np.nan))
    with pytest.raises(FormatError, match="NaN"):
        fileio.read_pfm(path)


def test_pfm_truncated(tmp_path):
    path = tmp_path / "trunc.pfm"
    path.write_bytes(b"Pf\n2 2\n-1.0\n" + b"\x00" * 10)
    with pytest.raises(FormatError, match="truncated"):
        fileio.read_pfm(path)


# -- .flo -------------------------------------------------------------------------


@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(2)),
                  elements=st.floats(-1e4, 1e4, width=32)))
@settings(max_examples=40, deadline=None)
def test_flo_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("flo") / "x.flo"
    fileio.write_flo(path, arr)
    back = fileio.read_flo(path)
    assert np.array_equal(back, arr)


def test_flo_zero_fixture(tmp_path):
    path = tmp_path / "z.flo"
    fileio.write_flo(path, np.zeros((3, 4, 2), dtype=np.float32))
    assert not fileio.read_flo(path).any()


def test_flo_bad_magic(tmp_path):
    path = tmp_path / "bad.flo"
    path.write_bytes(b"XXXX" + struct.pack("<ii", 1, 1) + b"\x00" * 8)
    with pytest.raises(FormatError, match="magic"):
        fileio.read_flo(path)


def test_flo_truncated(tmp_path):
    path = tmp_path / "t.flo"
    path.write_bytes(b"PIEH" + struct.pack("<ii", 4, 4) + b"\x00" * 16)
    with pytest.raises(FormatError, match="truncated"):
        fileio.read_flo(path)


# -- images / masks ---------------------------------------------------------------


def test_image_round_trip_8bit(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(8, 9, 3)).astype(np.float64) / 255.0
    path = tmp_path / "i.png"
    fileio.write_image(path, img)
    assert np.allclose(fileio.read_image(path), img)


def test_mask_round_trip(tmp_path):
    mask = np.zeros((6, 6), dtype=bool)
    mask[2:4, 1:5] = True
    path = tmp_path / "m.png"
    fileio.write_mask(path, mask)
    assert np.array_equal(fileio.read_mask(path), mask)


# -- json formats -------------------------------------------------------------------


def test_poses_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    poses = [Pose(rng.normal(size=4), rng.normal(size=3)) for _ in range(5)]
    path = tmp_path / "poses.json"
    fileio.write_poses(path, poses)
    back = fileio.read_poses(path)
    for a, b in zip(poses, back):
        assert a.almost_equal(b, tol=1e-12)


def test_poses_non_contiguous(tmp_path):
    path = tmp_path / "poses.json"
    path.write_text('[{"frame": 0, "q": [1,0,0,0], "t": [0,0,0]}, {"frame": 2, "q": [1,0,0,0], "t": [0,0,0]}]')
    with pytest.raises(FormatError, match="contiguous"):
        fileio.read_poses(path)


def test_intrinsics_round_trip(tmp_path):
    k = CameraIntrinsics(fx=100.0, fy=90.0, cx=32.0, cy=31.5, width=64, height=63)
    path = tmp_path / "k.json"
    fileio.write_intrinsics(path, k)
    assert fileio.read_intrinsics(path) == k


def test_gyro_ois_round_trip(tmp_path):
    g = [(0.0, np.array([1.0, 0, 0, 0])), (0.1, np.array([0.9, 0.1, 0, 0]))]
    gp = tmp_path / "g.jsonl"
    fileio.write_gyro_log(gp, g)
    back = fileio.read_gyro_log(gp)
    assert back[1][0] == 0.1 and np.allclose(back[1][1], [0.9, 0.1, 0, 0])
    op = tmp_path / "o.jsonl"
    fileio.write_ois_log(op, [(0.0, 1.0, -2.0)])
    assert fileio.read_ois_log(op) == [(0.0, 1.0, -2.0)]


def test_sparse_points_round_trip_and_range_check(tmp_path):
    path = tmp_path / "p.json"
    fileio.write_sparse_points(path, np.array([[1.0, 2, 3], [4, 5, 6]]), {0: [0, 1], 1: [1]})
    pts, vis = fileio.read_sparse_points(path)
    assert pts.shape == (2, 3) and vis == {0: [0, 1], 1: [1]}
    path.write_text('{"points": [[1,2,3]], "visibility": {"0": [5]}}')
    with pytest.raises(FormatError, match="out of range"):
        fileio.read_sparse_points(path)


# -- bundle round trip ----------------------------------------------------------------


def test_bundle_save_load_round_trip(tmp_path, dynamic_bundle):
    out = tmp_path / "bundle"
    save_bundle(dynamic_bundle, out)
    back = load_bundle(out)
    assert back.frame_count == dynamic_bundle.frame_count
    assert back.intrinsics == dynamic_bundle.intrinsics
    # 8-bit quantization on frames
    assert np.abs(back.frames - dynamic_bundle.frames).max() <= 0.5 / 255 + 1e-12
    # float32 round trip on depth/flow values
    for a, b in zip(back.depths, dynamic_bundle.depths):
        assert np.allclose(a.values, b.values, rtol=1e-6)
        assert np.array_equal(a.validity, b.validity)
    assert set(back.flows) == set(dynamic_bundle.flows)
    key = next(iter(back.flows))
    assert np.allclose(back.flows[key].vectors, dynamic_bundle.flows[key].vectors, atol=1e-5)
    assert np.array_equal(back.masks, dynamic_bundle.masks)
    assert back.gyro is not None and len(back.gyro.times) == len(dynamic_bundle.gyro.times)
    for a, b in zip(back.trajectory.poses, dynamic_bundle.trajectory.poses):
        assert a.almost_equal(b, tol=1e-12)


def test_bundle_count_mismatch(tmp_path, static_bundle):
    out = tmp_path / "bundle"
    save_bundle(static_bundle, out)
    (out / "depths" / "000005.pfm").unlink()
    with pytest.raises(FormatError, match="missing"):
        load_bundle(out)
