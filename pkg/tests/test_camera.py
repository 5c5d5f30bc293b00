import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mvsds import camera as cam

SQRT3_HALF = 0.8660254037844386  # 0.5 / tan(30 deg)


def test_front_view_is_identity():
    p = cam.look_at((0, 0, 2))
    assert np.allclose(p.rotation, np.eye(3))
    assert np.allclose(p.translation, [0, 0, 2])


def test_eye_on_x_axis_looks_down_minus_x():
    p = cam.look_at((3, 0, 0))
    forward = -p.rotation[:, 2]
    assert np.allclose(forward, [-1, 0, 0])


def test_look_at_degenerate():
    with pytest.raises(ValueError):
        cam.look_at((0, 0, 0))
    with pytest.raises(ValueError):
        cam.look_at((0, 2, 0), up=(0, 1, 0))


@settings(max_examples=50, deadline=None)
@given(az=st.floats(0, 360), el=st.floats(-80, 80), dist=st.floats(0.5, 10), fov=st.floats(15, 60))
def test_pose_orthonormal_and_origin_at_center(az, el, dist, fov):
    p = cam.orbit_pose(az, el, dist, fov)
    r = p.rotation
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-6
    assert abs(np.linalg.det(r) - 1) < 1e-6
    col, row = cam.project(p, [0, 0, 0], 32)[0]
    assert col == pytest.approx(15.5, abs=1e-9) and row == pytest.approx(15.5, abs=1e-9)


def test_rig_azimuths_and_distance_formula():
    rng = np.random.default_rng(0)
    rig = cam.sample_dataset_rig(rng)
    assert list(rig.azimuth_deg[:3]) == [0.0, 11.25, 22.5]
    assert len(rig) == 32
    assert 0.5 * cam.ndc_focal(60.0) == pytest.approx(SQRT3_HALF, rel=1e-12)
    for p in rig.poses:
        assert np.linalg.norm(p.translation) == pytest.approx(rig.distance)
        assert p.fov_deg == rig.fov_deg


def test_rig_deterministic():
    a = cam.sample_dataset_rig(np.random.default_rng(5))
    b = cam.sample_dataset_rig(np.random.default_rng(5))
    assert a.fov_deg == b.fov_deg and a.distance == b.distance
    assert all(np.array_equal(p.rotation, q.rotation) for p, q in zip(a.poses, b.poses))


def test_sample_bounds_10k():
    fov, elev, dist = cam.sample_rig_params(np.random.default_rng(1), 10_000)
    assert fov.min() >= 15 and fov.max() <= 60
    assert elev.min() >= 0 and elev.max() <= 30
    ratio = dist / np.array([cam.ndc_focal(f) for f in fov])
    assert ratio.min() >= 0.45 - 1e-12 and ratio.max() <= 0.55 + 1e-12


def test_orthogonal_examples():
    assert cam.orthogonal_indices(0, 32, 4) == [0, 8, 16, 24]
    assert cam.orthogonal_indices(31, 32, 4) == [31, 7, 15, 23]
    with pytest.raises(ValueError):
        cam.orthogonal_indices(0, 32, 5)
    with pytest.raises(ValueError):
        cam.select_orthogonal_views(np.random.default_rng(0), 32, 3)


def test_orthogonal_gaps_all_starts():
    az = np.arange(32) * 11.25
    for s in range(32):
        idx = cam.orthogonal_indices(s, 32, 4)
        gaps = {round((az[i] - az[j]) % 360, 9) for i in idx for j in idx if i != j}
        assert gaps <= {90.0, 180.0, 270.0}


def test_orthogonal_selection_uniform():
    rng = np.random.default_rng(2)
    sets = [min(cam.select_orthogonal_views(rng, 32, 4)) for _ in range(10_000)]
    counts = np.bincount(sets, minlength=8)
    assert len(counts) == 8
    assert stats.chisquare(counts).pvalue > 0.01


def test_normalize_extrinsic_examples():
    a = cam.normalize_extrinsic(cam.orbit_pose(37.0, 12.0, 2.0, 40.0))
    b = cam.normalize_extrinsic(cam.orbit_pose(37.0, 12.0, 5.0, 40.0))
    assert np.abs(a - b).max() <= 1e-6
    m = cam.normalize_extrinsic(cam.look_at((0, 0, 2))).reshape(4, 4)
    assert np.linalg.norm(m[:3, 3]) == pytest.approx(1.0, abs=1e-6)
    assert np.array_equal(m[3], [0, 0, 0, 1])
    with pytest.raises(FloatingPointError):
        cam.normalize_extrinsic(cam.CameraPose(np.eye(3), np.zeros(3), 40.0))


@settings(max_examples=50, deadline=None)
@given(az=st.floats(0, 360), el=st.floats(0, 30), d1=st.floats(0.3, 20), d2=st.floats(0.3, 20))
def test_distance_invariance(az, el, d1, d2):
    a = cam.normalize_extrinsic(cam.orbit_pose(az, el, d1, 40.0))
    b = cam.normalize_extrinsic(cam.orbit_pose(az, el, d2, 40.0))
    assert np.abs(a - b).max() <= 1e-6
    assert np.array_equal(a.reshape(4, 4)[3], [0, 0, 0, 1])


def test_rays_pass_through_projected_pixels():
    p = cam.orbit_pose(60.0, 20.0, 1.5, 35.0)
    origins, dirs = cam.camera_rays(p, 16)
    assert np.allclose(np.linalg.norm(dirs, axis=-1), 1.0)
    pts = origins + 1.3 * dirs
    proj = cam.project(p, pts.reshape(-1, 3), 16).reshape(16, 16, 2)
    cols, rows = np.meshgrid(np.arange(16), np.arange(16))
    assert np.allclose(proj[..., 0], cols) and np.allclose(proj[..., 1], rows)


def test_azimuth_convention():
    assert np.allclose(cam.spherical_eye(0, 0, 1), [0, 0, 1])
    assert np.allclose(cam.spherical_eye(90, 0, 1), [1, 0, 0])
    assert np.allclose(cam.spherical_eye(0, 90, 1), [0, 1, 0], atol=1e-12)
    assert math.isclose(cam.canonical_rig(4).elevation_deg, 15.0)
