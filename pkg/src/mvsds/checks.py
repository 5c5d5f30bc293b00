"""Named invariant checks over tiny fixtures; backs the ``check`` command.

Each check returns ``(ok, value, detail)``.  ``run_checks`` collects them into a
machine-readable report; a check that raises is recorded as failed.
"""

from __future__ import annotations

import tempfile
import time

import numpy as np
import torch
from scipy import stats

from . import camera as cam
from . import radiance as rd
from . import scenegen as sg
from . import sched as sch
from .distill import sample_cameras, sds_x0_loss, verify_sds_equivalence
from .mvnet import DenoiserConfig, guided_eps, inflated_attention, init_denoiser, null_tokens
from .trainer import DreamBoothConfig, diffusion_loss, draw_mode, dreambooth_finetune
from .vocab import default_vocab

FAULTS = ("alpha",)


def tiny_denoiser_config(**kw) -> DenoiserConfig:
    base = dict(image_res=8, base_channels=8, text_embed_dim=16, time_embed_dim=32)
    base.update(kw)
    return DenoiserConfig(**base)


def tiny_denoiser(seed: int = 0, dtype=torch.float64, **kw):
    """Small denoiser with a randomized output layer so its output depends on the input."""
    model = init_denoiser(tiny_denoiser_config(**kw), seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1)
        torch.nn.init.normal_(model.conv_out.weight, std=0.05)
        torch.nn.init.normal_(model.conv_out.bias, std=0.05)
    return model.to(dtype).eval()


def tiny_field(seed: int = 0, dtype=torch.float64, **kw) -> rd.HashGridField:
    cfg = rd.FieldConfig(**{"levels": 4, "table_size": 2**10, "max_res": 32.0, "hidden": 16,
                            "init_scale": 0.5, "density_shift": 0.0, **kw})
    return rd.init_field(cfg, seed).to(dtype)


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def _mv_inputs(model, rng: np.random.Generator, b: int = 1, f: int = 4):
    res = model.config.image_res
    dtype = model.conv_in.weight.dtype
    x = torch.from_numpy(rng.standard_normal((b, f, 3, res, res))).to(dtype)
    toks = torch.from_numpy(rng.integers(1, model.config.vocab_size, size=(b, 1, model.config.context_len)))
    toks = toks.expand(b, f, -1).contiguous()
    cams = torch.from_numpy(np.stack([np.stack([cam.normalize_extrinsic(
        cam.orbit_pose(a, 15.0, 1.5, 40.0)) for a in rng.uniform(0, 360, size=f)]) for _ in range(b)])).to(dtype)
    return x, toks, cams


# -- schedule -----------------------------------------------------------------

def check_sched_normalization(schedules):
    err = max(float(np.abs(s.alpha ** 2 + s.sigma ** 2 - 1.0).max()) for s in schedules)
    return err < 1e-6, err, "max |alpha^2 + sigma^2 - 1| over both families"


def check_sched_monotone(schedules):
    ok = all(np.all(np.diff(s.alpha) < 0) and np.all(np.diff(s.sigma) > 0) for s in schedules)
    return ok, None, "alpha strictly decreasing, sigma strictly increasing"


def check_sched_roundtrip(schedules):
    rng = np.random.default_rng(0)
    err = 0.0
    for s in schedules:
        for t in rng.integers(0, s.num_steps, size=20):
            x, e = rng.standard_normal((2, 64))
            err = max(err, float(np.abs(sch.estimate_x0(sch.add_noise(x, e, int(t), s), e, int(t), s) - x).max()))
    return err < 1e-5, err, "max |estimate_x0(add_noise(x, eps, t), eps, t) - x|"


def check_sched_ddim_deterministic(schedules):
    rng = np.random.default_rng(1)
    x, e = (torch.from_numpy(a) for a in rng.standard_normal((2, 1, 4, 3, 8, 8)).astype(np.float32))
    s = schedules[0]
    a, b = sch.ddim_step(x, e, 700, 300, s), sch.ddim_step(x.clone(), e.clone(), 700, 300, s)
    return bool(torch.equal(a, b)), None, "repeated DDIM steps are bit-identical"


def check_sched_anneal(schedules):
    win = sch.AnnealWindow()
    T = schedules[0].num_steps
    b = [sch.anneal_bounds(k, win, T) for k in range(0, win.anneal_steps + 200, 50)]
    lo, hi = np.array(b).T
    ok = bool(np.all(np.diff(lo) <= 0) and np.all(np.diff(hi) <= 0) and np.all(lo <= hi))
    return ok, None, "bounds non-increasing and t_min <= t_max"


# -- camera -------------------------------------------------------------------

def check_camera_rotation():
    rng = np.random.default_rng(2)
    err = 0.0
    for _ in range(20):
        rig = cam.sample_dataset_rig(rng)
        for p in rig.poses:
            r = p.rotation
            err = max(err, float(np.abs(r.T @ r - np.eye(3)).max()), abs(float(np.linalg.det(r)) - 1.0))
    return err < 1e-6, err, "R^T R = I and det R = 1 for dataset poses"


def check_camera_distance_invariance():
    rng = np.random.default_rng(3)
    err = 0.0
    for _ in range(50):
        az, el, fov = rng.uniform(0, 360), rng.uniform(0, 30), rng.uniform(15, 60)
        a = cam.normalize_extrinsic(cam.orbit_pose(az, el, 2.0, fov))
        b = cam.normalize_extrinsic(cam.orbit_pose(az, el, 5.0, fov))
        err = max(err, float(np.abs(a - b).max()))
    return err < 1e-6, err, "normalized extrinsic is independent of camera distance"


def check_camera_orthogonal():
    ok = True
    az = np.arange(32) * 11.25
    for s in range(32):
        idx = cam.orthogonal_indices(s, 32, 4)
        for i in idx:
            for j in idx:
                if i != j:
                    ok &= bool(round((az[i] - az[j]) % 360, 6) in (90.0, 180.0, 270.0))
    return ok, None, "pairwise azimuth gaps in {90, 180, 270} for all 32 starts"


def check_camera_uniform_selection():
    rng = np.random.default_rng(4)
    starts = [min(cam.select_orthogonal_views(rng, 32, 4)) for _ in range(10_000)]
    counts = np.bincount(starts, minlength=8)
    p = float(stats.chisquare(counts).pvalue)
    return p > 0.01, p, "chi-square p-value over the 8 orthogonal 4-sets"


def check_camera_bounds():
    rng = np.random.default_rng(5)
    fov, elev, dist = cam.sample_rig_params(rng, 10_000)
    ratio = dist * np.tan(np.radians(fov) / 2)
    ok = bool(fov.min() >= 15 and fov.max() <= 60 and elev.min() >= 0 and elev.max() <= 30
              and ratio.min() >= 0.45 - 1e-9 and ratio.max() <= 0.55 + 1e-9)
    return ok, [float(ratio.min()), float(ratio.max())], "fov, elevation and distance/focal within bounds"


def check_camera_distill_distribution():
    rng_a, rng_b = np.random.default_rng(6), np.random.default_rng(7)
    ra = [cam.sample_dataset_rig(rng_a) for _ in range(1000)]
    rb = [sample_cameras(rng_b)[0] for _ in range(1000)]
    p = {k: float(stats.ks_2samp([getattr(r, k) for r in ra], [getattr(r, k) for r in rb]).pvalue)
         for k in ("fov_deg", "elevation_deg")}
    return min(p.values()) > 0.01, p, "KS p-values, dataset vs distillation fov and elevation"


# -- scenegen -----------------------------------------------------------------

def check_scenegen_in_box():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(50):
        scene = sg.sample_scene(rng)
        occ = sg.occupancy_grid(scene, 24)
        # no occupied voxel on the outermost shell means the surface stays inside
        worst = max(worst, float(occ[[0, -1]].sum() + occ[:, [0, -1]].sum() + occ[:, :, [0, -1]].sum()))
    return worst == 0.0, worst, "no primitive reaches the box boundary"


def check_scenegen_dataset():
    rng = np.random.default_rng(9)
    with tempfile.TemporaryDirectory() as tmp:
        sg.build_dataset(rng, 2, f"{tmp}/ds")
        ds = sg.Dataset(f"{tmp}/ds")
        style = default_vocab().id("3d_asset")
        b = sg.load_batch(ds, np.random.default_rng(0), "multiview", 4)
        s = sg.load_batch(ds, np.random.default_rng(0), "single", 4)
        az = np.array([v["azimuth_deg"] for v in ds.records["multiview"][0]["views"]])
        ok = (style in b.tokens[0] and style not in s.tokens[0] and s.cameras is None
              and b.images.min() >= -1 and b.images.max() <= 1 and len(az) == 32)
    return bool(ok), None, "style token only in multiview batches, 32 views per record"


# -- mvnet --------------------------------------------------------------------

def check_mvnet_f1_equality():
    torch.manual_seed(0)
    from .mvnet import Attention
    attn = Attention(16, head_dim=8).double()
    tok = torch.randn(3, 10, 16, dtype=torch.float64)
    ok = torch.equal(inflated_attention(attn, tok, 1, "inflated_3d"), inflated_attention(attn, tok, 1, "per_view_2d"))
    return bool(ok), None, "F=1 inflated and per-view attention agree bit-exactly"


def check_mvnet_cross_view():
    rng = np.random.default_rng(10)
    out = {}
    for mode in ("inflated_3d", "per_view_2d"):
        model = tiny_denoiser(attention_mode=mode)
        x, toks, cams = _mv_inputs(model, rng)
        with torch.no_grad():
            y0 = model(x, 500, toks, cams)
            x2 = x.clone()
            x2[:, 2] += 1e-3 * torch.from_numpy(rng.standard_normal(x2[:, 2].shape))
            y1 = model(x2, 500, toks, cams)
        out[mode] = float((y1[:, 0] - y0[:, 0]).abs().max())
    ok = out["inflated_3d"] >= 1e-6 and out["per_view_2d"] == 0.0
    return ok, out, "view-2 perturbation reaches view 0 only under inflated attention"


def check_mvnet_permutation():
    rng = np.random.default_rng(11)
    model = tiny_denoiser()
    x, toks, cams = _mv_inputs(model, rng)
    perm = torch.from_numpy(rng.permutation(4))
    with torch.no_grad():
        y = model(x, 300, toks, cams)
        yp = model(x[:, perm], 300, toks[:, perm], cams[:, perm])
    err = float((yp - y[:, perm]).abs().max())
    return err < 1e-5, err, "jointly permuting views and cameras permutes the output"


def directional_fd_check(loss_fn, params: list[torch.Tensor], rng: np.random.Generator, n: int = 32,
                         h: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference derivatives.

    Random scalar entries of ``params`` are perturbed by ``+-h`` in place until
    ``n`` of them have a derivative large enough to resolve: central differences
    carry roundoff of about ``eps * |loss| / h``, so entries whose derivative is
    within 1000x of that cannot be checked to 1e-3 and are redrawn.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    floor = 1e3 * np.finfo(np.float64).eps * max(abs(float(loss.detach())), 1.0) / h
    sizes = np.array([p.numel() for p in params])
    worst = 0.0
    checked = 0
    for _ in range(50 * n):
        if checked == n:
            break
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        i = int(rng.integers(params[k].numel()))
        ad = float(grads[k].reshape(-1)[i])
        if abs(ad) < floor:
            continue
        flat = params[k].data.view(-1)
        orig = float(flat[i])
        with torch.no_grad():
            flat[i] = orig + h
            lp = float(loss_fn())
            flat[i] = orig - h
            lm = float(loss_fn())
            flat[i] = orig
        worst = max(worst, _rel((lp - lm) / (2 * h), ad))
        checked += 1
    if checked < n:
        raise RuntimeError(f"only {checked} of {n} sampled entries had a resolvable derivative")
    return worst


def check_mvnet_gradient(schedules):
    rng = np.random.default_rng(12)
    model = tiny_denoiser()
    x, toks, cams = _mv_inputs(model, rng)
    eps = torch.from_numpy(rng.standard_normal(tuple(x.shape)))
    params = list(model.parameters())
    err = directional_fd_check(lambda: diffusion_loss(model, x, toks, cams, 400, eps, schedules[0]), params, rng)
    return err < 1e-3, err, "training-loss gradient vs central differences on 32 parameters"


def check_mvnet_guidance(schedules):
    rng = np.random.default_rng(13)
    model = tiny_denoiser()
    s = schedules[0]
    x, toks, cams = _mv_inputs(model, rng)
    neg = null_tokens(toks.shape)
    with torch.no_grad():
        eps_pos = model(x, 600, toks, cams)
        same, _ = guided_eps(model, x, toks, toks, cams, 600, 7.5, 0.0, s)
        _, x0_cfg = guided_eps(model, x, toks, neg, cams, 600, 7.5, 0.0, s)
        _, x0_full = guided_eps(model, x, toks, neg, cams, 600, 7.5, 1.0, s)
    x0_pos = sch.estimate_x0(x, eps_pos, 600, s)
    e_same = float((same - eps_pos).abs().max())
    e_std = float((x0_full.flatten(2).std(-1) - x0_pos.flatten(2).std(-1)).abs().max())
    ok = e_same < 1e-5 and e_std < 1e-5 and torch.isfinite(x0_cfg).all()
    return bool(ok), {"neg_equals_pos": e_same, "phi1_std": e_std}, "guidance and rescale endpoint identities"


# -- trainer ------------------------------------------------------------------

def check_trainer_mode_mixing():
    rng = np.random.default_rng(14)
    frac = float(np.mean([draw_mode(float(rng.random()), 0.7) == "multiview" for _ in range(10_000)]))
    return abs(frac - 0.7) <= 0.02, frac, "multiview fraction over 10k draws"


def check_trainer_dreambooth(schedules):
    rng = np.random.default_rng(15)
    model = tiny_denoiser(dtype=torch.float32)
    images = rng.uniform(-1, 1, size=(4, 8, 8, 3)).astype(np.float32)
    recs = dreambooth_finetune(model, DreamBoothConfig(lam=1.0, steps=3, batch_size=2), schedules[0], rng,
                               images, default_vocab().encode(["one", "red", "sphere"]))
    err = max(abs(r["loss"] - (r["loss_image"] + r["lam"] * r["loss_preserve"])) for r in recs)
    finite = all(torch.isfinite(p).all() for p in model.parameters())
    return err < 1e-6 and finite, err, "total loss = image term + lambda * preservation, parameters finite"


# -- radiance -----------------------------------------------------------------

def check_radiance_bounds():
    rng = np.random.default_rng(16)
    f = tiny_field(density_shift=2.0)
    out = rd.render_poses(f, cam.canonical_rig(2).poses, rd.RenderSettings(samples_per_ray=16, resolution=8), rng)
    a, c = out["alpha"].detach(), out["rgb_raw"].detach()
    outside = f.density(torch.tensor([[0.6, 0.0, 0.0], [0.0, -0.7, 0.2]], dtype=torch.float64))
    ok = bool(a.min() >= 0 and a.max() <= 1 and c.min() >= 0 and torch.all(outside == 0))
    return ok, float(a.max()), "alpha in [0, 1], rgb >= 0, zero density outside the box"


def check_radiance_hash_kernel():
    f = tiny_field()
    pts = torch.from_numpy(np.random.default_rng(17).uniform(-0.6, 0.6, size=(2000, 3)))
    with torch.no_grad():
        err = float((f.encode(pts) - f.encode_reference(pts)).abs().max())
    return err < 1e-10, err, "fused hash encoding matches the reference implementation"


def check_radiance_levels():
    f = rd.HashGridField()
    r = np.array(f.level_resolutions())
    ratio = (128 / 16) ** (1 / 7)
    err = float(np.abs(r[1:] / r[:-1] - ratio).max())
    return err < 1e-9, err, "level resolutions are geometric from 16 to 128"


def check_radiance_gradient():
    rng = np.random.default_rng(18)
    f = tiny_field()
    pose = cam.orbit_pose(30.0, 20.0, 1.4, 40.0)
    settings = rd.RenderSettings(samples_per_ray=16, resolution=4, stratified=False)
    err = directional_fd_check(lambda: rd.render(f, pose, settings)[0].mean(), [f.tables], rng, n=32, h=1e-4)
    return err < 1e-3, err, "d(mean pixel)/d(hash entries) vs central differences on a 4x4 render"


def check_radiance_refinement():
    f = tiny_field(max_res=8.0, base_res=4.0, init_scale=0.3)
    pose = cam.orbit_pose(0.0, 15.0, 1.4, 40.0)
    a = rd.render(f, pose, rd.RenderSettings(samples_per_ray=128, resolution=16, stratified=False))[0]
    b = rd.render(f, pose, rd.RenderSettings(samples_per_ray=256, resolution=16, stratified=False))[0]
    mae = float((a - b).abs().mean().detach())
    return mae < 0.02, mae, "doubling samples per ray changes a smooth field's render by < 2%"


# -- distill ------------------------------------------------------------------

def check_distill_equivalence(schedules):
    model = tiny_denoiser()
    f = tiny_field()
    r = verify_sds_equivalence(model, f, schedules[0], n_trials=200, rng=np.random.default_rng(19),
                               samples_per_ray=4, param_checks=2)
    return r["max_rel_dev"] < 1e-5, r["max_rel_dev"], "x0 loss gradient vs (2 sigma/alpha)(eps_theta - eps)"


def check_distill_detachment():
    x = torch.randn(1, 4, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    target = torch.randn(1, 4, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    gx, gt = torch.autograd.grad(sds_x0_loss(x, target), [x, target], allow_unused=True)
    ok = gt is None or float(gt.abs().max()) == 0.0
    return ok, None, "no gradient reaches the denoiser target"


def _invariants(schedules):
    return [
        ("sched.normalization", lambda: check_sched_normalization(schedules)),
        ("sched.monotone", lambda: check_sched_monotone(schedules)),
        ("sched.roundtrip", lambda: check_sched_roundtrip(schedules)),
        ("sched.ddim_deterministic", lambda: check_sched_ddim_deterministic(schedules)),
        ("sched.anneal_monotone", lambda: check_sched_anneal(schedules)),
        ("camera.rotation_orthonormal", check_camera_rotation),
        ("camera.distance_invariance", check_camera_distance_invariance),
        ("camera.orthogonal_gaps", check_camera_orthogonal),
        ("camera.uniform_selection", check_camera_uniform_selection),
        ("camera.dataset_bounds", check_camera_bounds),
        ("camera.distill_distribution", check_camera_distill_distribution),
        ("scenegen.in_box", check_scenegen_in_box),
        ("scenegen.dataset_contract", check_scenegen_dataset),
        ("mvnet.f1_equality", check_mvnet_f1_equality),
        ("mvnet.cross_view_flow", check_mvnet_cross_view),
        ("mvnet.permutation_equivariance", check_mvnet_permutation),
        ("mvnet.gradient", lambda: check_mvnet_gradient(schedules)),
        ("mvnet.guidance_identities", lambda: check_mvnet_guidance(schedules)),
        ("trainer.mode_mixing", check_trainer_mode_mixing),
        ("trainer.dreambooth_decomposition", lambda: check_trainer_dreambooth(schedules)),
        ("radiance.bounds", check_radiance_bounds),
        ("radiance.hash_kernel", check_radiance_hash_kernel),
        ("radiance.geometric_levels", check_radiance_levels),
        ("radiance.render_gradient", check_radiance_gradient),
        ("radiance.sample_refinement", check_radiance_refinement),
        ("distill.sds_equivalence", lambda: check_distill_equivalence(schedules)),
        ("distill.detachment", check_distill_detachment),
    ]


def check_names() -> list[str]:
    return [name for name, _ in _invariants([])]


def run_checks(only=None, inject_fault: str | None = None) -> dict:
    """Run the invariant suite; ``inject_fault='alpha'`` corrupts one alpha entry first."""
    if inject_fault is not None and inject_fault not in FAULTS:
        raise ValueError(f"unknown fault {inject_fault!r}; choose from {FAULTS}")
    schedules = [sch.build_schedule(1000, "linear_beta"), sch.build_schedule(1000, "cosine")]
    if inject_fault == "alpha":
        bad = schedules[0].alpha.copy()
        bad[500] *= 1.01
        schedules[0] = sch.NoiseSchedule(schedules[0].num_steps, bad, schedules[0].sigma,
                                         schedules[0].derivation + "+corrupted")
    invariants = _invariants(schedules)
    unknown = sorted(set(only or ()) - {name for name, _ in invariants})
    if unknown:
        raise ValueError(f"unknown checks {unknown}; choose from {[name for name, _ in invariants]}")
    results = []
    for name, fn in invariants:
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        try:
            ok, value, detail = fn()
        except Exception as e:  # a crash is a failed invariant, reported by name
            ok, value, detail = False, None, f"{type(e).__name__}: {e}"
        results.append({"name": name, "ok": bool(ok), "value": value, "detail": detail,
                        "seconds": round(time.perf_counter() - t0, 3)})
    sds = next((r["value"] for r in results if r["name"] == "distill.sds_equivalence"), None)
    failed = [r["name"] for r in results if not r["ok"]]
    return {"passed": not failed, "failed": failed, "sds_max_rel_dev": sds, "checks": results}
