import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mvsds import camera as cam
from mvsds import radiance as rd
from mvsds import tensorio
from mvsds.checks import directional_fd_check, tiny_field


def _constant_field(density: float, rgb_logit=0.0, dtype=torch.float64):
    """Field whose decoder ignores the features: constant density and colour inside the box."""
    f = tiny_field(dtype=dtype, density_shift=0.0)
    with torch.no_grad():
        for p in f.mlp.parameters():
            p.zero_()
        f.mlp[2].bias[0] = math.log(math.expm1(density)) if density > 0 else -200.0
        f.mlp[2].bias[1:] = rgb_logit
    return f


class _Density:
    def __init__(self, fn):
        self.fn = fn

    def density(self, p):
        return self.fn(p)


def test_config_validation():
    with pytest.raises(ValueError):
        rd.FieldConfig(table_size=1000)
    with pytest.raises(ValueError):
        rd.RenderSettings(samples_per_ray=1)
    with pytest.raises(ValueError):
        rd.RenderSettings(background="checker")


def test_level_resolutions_geometric():
    r = np.array(rd.HashGridField().level_resolutions())
    assert r[0] == 16 and abs(r[-1] - 128) < 1e-9 and len(r) == 8
    assert np.allclose(r[1:] / r[:-1], 8 ** (1 / 7), rtol=0, atol=1e-12)


def test_outside_box_density_is_zero():
    f = tiny_field(density_shift=3.0)
    pts = torch.tensor([[0.51, 0, 0], [0, -0.9, 0], [0, 0, 5.0], [0.4, 0.4, 0.4]], dtype=torch.float64)
    d, rgb = rd.query_field(f, pts)
    assert torch.all(d[:3] == 0) and d[3] > 0
    assert rgb.min() >= 0 and rgb.max() <= 1


def test_zero_decoder_gives_documented_constant():
    f = tiny_field(density_shift=-3.0)
    with torch.no_grad():
        for p in f.mlp.parameters():
            p.zero_()
    pts = torch.from_numpy(np.random.default_rng(0).uniform(-0.5, 0.5, (50, 3)))
    d, rgb = f.query(pts)
    assert torch.allclose(d, torch.full_like(d, math.log1p(math.exp(-3.0))), rtol=0, atol=1e-15)
    assert torch.allclose(rgb, torch.full_like(rgb, 0.5))


def test_fused_encoding_matches_reference():
    f = tiny_field()
    pts = torch.from_numpy(np.random.default_rng(1).uniform(-0.6, 0.6, (500, 3)))
    assert (f.encode(pts) - f.encode_reference(pts)).abs().max() < 1e-12
    g = torch.from_numpy(np.random.default_rng(2).standard_normal((500, f.config.levels * 2)))
    (a,) = torch.autograd.grad((f.encode(pts) * g).sum(), f.tables)
    (b,) = torch.autograd.grad((f.encode_reference(pts) * g).sum(), f.tables)
    assert (a - b).abs().max() < 1e-12


def test_fused_encoding_generic_features():
    f = tiny_field(features=3)
    pts = torch.from_numpy(np.random.default_rng(3).uniform(-0.5, 0.5, (200, 3))).requires_grad_(True)
    g = torch.randn(200, f.config.levels * 3, dtype=torch.float64)
    ga = torch.autograd.grad((f.encode(pts) * g).sum(), [f.tables, pts])
    gb = torch.autograd.grad((f.encode_reference(pts) * g).sum(), [f.tables, pts])
    assert all((x - y).abs().max() < 1e-10 for x, y in zip(ga, gb))


def test_density_gradient_wrt_hash_entries():
    f = tiny_field(init_scale=0.3)
    pts = torch.from_numpy(np.random.default_rng(4).uniform(-0.4, 0.4, (64, 3)))
    err = directional_fd_check(lambda: f.density(pts).sum(), [f.tables], np.random.default_rng(5), n=32)
    assert err < 1e-3


def test_render_gradient_4x4():
    f = tiny_field()
    pose = cam.orbit_pose(30.0, 20.0, 1.4, 40.0)
    s = rd.RenderSettings(samples_per_ray=16, resolution=4, stratified=False)
    err = directional_fd_check(lambda: rd.render(f, pose, s)[0].mean(), [f.tables], np.random.default_rng(6), h=1e-4)
    assert err < 1e-3


def test_empty_field_shows_background():
    f = _constant_field(0.0)
    s = rd.RenderSettings(samples_per_ray=8, resolution=8, background_color=(0.1, 0.2, 0.3))
    rgb, alpha, _ = rd.render(f, cam.orbit_pose(0, 10, 1.4, 40), s, np.random.default_rng(0))
    assert alpha.abs().max() < 1e-60
    assert torch.allclose(rgb, torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64).expand_as(rgb))


def _slab_length(o, d, half=0.5):
    # independent slab test in numpy
    with np.errstate(divide="ignore"):
        inv = 1.0 / d
    t0, t1 = (-half - o) * inv, (half - o) * inv
    near = np.maximum(np.nanmax(np.minimum(t0, t1), -1), 0)
    far = np.nanmin(np.maximum(t0, t1), -1)
    return np.clip(far - near, 0, None)


@pytest.mark.parametrize("az, el", [(0.0, 0.0), (37.0, 21.0)])
def test_unit_density_alpha_matches_closed_form(az, el):
    f = _constant_field(1.0)
    pose = cam.orbit_pose(az, el, 1.4, 50.0)
    s = rd.RenderSettings(samples_per_ray=16, resolution=16)
    _, alpha, _ = rd.render(f, pose, s, np.random.default_rng(0))
    o, d = cam.camera_rays(pose, 16)
    expected = 1.0 - np.exp(-_slab_length(o.reshape(-1, 3), d.reshape(-1, 3)))
    assert np.abs(alpha.detach().numpy().ravel() - expected).max() < 1e-9


def test_render_determinism_and_random_background():
    f = tiny_field(density_shift=1.0)
    s = rd.RenderSettings(samples_per_ray=8, resolution=8, background="random_color")
    poses = cam.canonical_rig(2).poses
    a = rd.render_poses(f, poses, s, np.random.default_rng(3))
    b = rd.render_poses(f, poses, s, np.random.default_rng(3))
    assert torch.equal(a["rgb"], b["rgb"]) and np.array_equal(a["background"], b["background"])
    assert not np.array_equal(a["background"][0], a["background"][1])
    with pytest.raises(ValueError):
        rd.render_poses(f, poses, s, None)


@settings(max_examples=20, deadline=None)
@given(shift=st.floats(-4, 6), seed=st.integers(0, 1000))
def test_energy_bounds(shift, seed):
    f = tiny_field(seed=seed, density_shift=shift, init_scale=1.0)
    out = rd.render_poses(f, [cam.orbit_pose(seed, 10, 1.3, 45)], rd.RenderSettings(samples_per_ray=8, resolution=4),
                          np.random.default_rng(seed))
    a = out["alpha"].detach()
    assert a.min() >= 0 and a.max() <= 1
    assert out["rgb_raw"].min() >= 0 and (out["rgb_raw"] <= a[..., None] + 1e-12).all()


def test_sample_refinement():
    f = tiny_field(max_res=8.0, base_res=4.0, init_scale=0.3)
    pose = cam.orbit_pose(0.0, 15.0, 1.4, 40.0)
    a = rd.render(f, pose, rd.RenderSettings(samples_per_ray=128, resolution=16, stratified=False))[0]
    b = rd.render(f, pose, rd.RenderSettings(samples_per_ray=256, resolution=16, stratified=False))[0]
    assert (a - b).abs().mean() < 0.02


def test_normals_of_planar_step():
    step = _Density(lambda p: torch.sigmoid(-20 * p[:, 2]))
    pts = torch.tensor([[0.1, -0.2, 0.0], [0.0, 0.3, 0.05]], dtype=torch.float64)
    for n, valid in (rd.normals(step, pts), rd.fd_normals(step, pts, h=1e-4)):
        assert valid.all()
        assert torch.allclose(n, torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64).expand_as(n), atol=1e-2)


def test_normals_of_bump_point_outward():
    bump = _Density(lambda p: torch.exp(-(p ** 2).sum(-1) / 0.05))
    rng = np.random.default_rng(7)
    v = rng.standard_normal((100, 3))
    pts = torch.from_numpy(0.25 * v / np.linalg.norm(v, axis=1, keepdims=True))
    radial = pts / pts.norm(dim=-1, keepdim=True)
    for n, _ in (rd.normals(bump, pts), rd.fd_normals(bump, pts, h=1e-4)):
        assert ((n * radial).sum(-1) > 0.9).all()


def test_normals_of_constant_region_masked():
    flat = _Density(lambda p: torch.ones(p.shape[0], dtype=p.dtype) + 0 * p.sum(-1))
    n, valid = rd.normals(flat, torch.zeros(3, 3, dtype=torch.float64))
    assert not valid.any() and torch.count_nonzero(n) == 0


def test_orientation_loss_examples():
    d = torch.tensor([[0.0, 0.0, -1.0]], dtype=torch.float64)
    facing = torch.tensor([[[0.0, 0.0, 1.0], [0.6, 0.0, 0.8]]], dtype=torch.float64)
    assert float(rd.orientation_loss(torch.ones(1, 2, dtype=torch.float64), facing, d)) == 0.0
    n = torch.tensor([[[math.sqrt(0.75), 0.0, -0.5]]], dtype=torch.float64)
    assert float(rd.orientation_loss(torch.ones(1, 1, dtype=torch.float64), n, d)) == pytest.approx(0.25)


def test_orientation_loss_stops_weight_gradient():
    w = torch.rand(4, 5, dtype=torch.float64, requires_grad=True)
    n = torch.randn(4, 5, 3, dtype=torch.float64, requires_grad=True)
    d = torch.randn(4, 3, dtype=torch.float64)
    gw, gn = torch.autograd.grad(rd.orientation_loss(w, n, d), [w, n], allow_unused=True)
    assert gw is None and gn.abs().sum() > 0


def test_render_normals_gradient_reaches_field():
    f = tiny_field(density_shift=1.0, init_scale=0.5)
    out = rd.render_poses(f, [cam.orbit_pose(0, 10, 1.3, 40)], rd.RenderSettings(samples_per_ray=8, resolution=4),
                          np.random.default_rng(0), with_normals=True)
    loss = rd.orientation_loss(out["weights"], out["normals"], out["dirs"])
    (g,) = torch.autograd.grad(loss, f.tables)
    assert torch.isfinite(g).all() and g.abs().sum() > 0


def test_box_intersect_misses():
    o = torch.tensor([[0.0, 2.0, 2.0]], dtype=torch.float64)
    d = torch.tensor([[0.0, 0.0, -1.0]], dtype=torch.float64)
    near, far = rd.box_intersect(o, d)
    assert float(near) == 0.0 and float(far) == 0.0


def test_density_grid_and_checkpoints(tmp_path):
    f = tiny_field(blob_density=8.0, blob_radius=0.3, density_shift=-4.0)
    g = rd.density_grid(f, 8)
    assert g.shape == (8, 8, 8)
    assert g[3:5, 3:5, 3:5].min() > g[0, 0, 0]
    rd.export_occupancy(f, 8, tmp_path / "occ")
    tensors, meta = tensorio.load_tensors(tmp_path / "occ")
    assert meta["G"] == 8 and np.array_equal(tensors["density"], g.astype(np.float32))
    rd.save_field(f, tmp_path / "field")
    f2 = rd.load_field(tmp_path / "field")
    assert f2.config == f.config and torch.equal(f2.tables, f.tables)
    with pytest.raises(ValueError):
        rd.load_field(tmp_path / "occ")
