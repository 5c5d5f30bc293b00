"""Score distillation of a radiance field from the multi-view denoiser.

The loss is an x0-reconstruction objective: renders ``x`` are noised, the
denoiser's guided (and optionally rescaled) clean estimate ``x0_hat`` is
computed without gradient, and ``|x - x0_hat|^2`` is minimized w.r.t. the
field.  With rescale off and unit guidance its gradient equals the classic
SDS gradient weighted by ``2 sigma_t / alpha_t``.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F_
from PIL import Image

from . import camera as cam
from . import radiance as rd
from . import sched as sch
from .mvnet import guided_eps, null_tokens
from .vocab import NEG_LOWQ, STYLE_3D, default_vocab

log = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    total_steps: int = 2000
    n_views: int = 4
    cfg_scale: float = 50.0
    rescale_phi: float = 0.5
    pos_words: tuple = ("one", "red", "sphere")
    neg_words: tuple = (NEG_LOWQ,)
    append_style: bool = True
    use_anneal: bool = True
    use_negative: bool = True
    use_rescale: bool = True
    anneal_fraction: float = 0.8
    t_max_start: float = 0.98
    t_max_end: float = 0.5
    t_min_start: float = 0.98
    t_min_end: float = 0.02
    orient_weight: float = 0.01
    orient_rays: int = 256
    bg_replace_prob: float = 0.5
    bg_replace_mode: str = "random_gray"
    lr: float = 0.01
    samples_per_ray: int = 64
    resolution_schedule: tuple = ((0.0, 32), (0.5, 64))
    snapshot_fractions: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    seed: int = 0
    # center-weighted density bias, zero at half the box half-width; keeps low-density fog out of the box
    field: rd.FieldConfig = field(default_factory=lambda: rd.FieldConfig(blob_density=10.0, blob_radius=0.25))

    def __post_init__(self):
        if not 0.0 <= self.rescale_phi <= 1.0:
            raise ValueError("rescale_phi must lie in [0, 1]")
        if not 0.0 <= self.bg_replace_prob <= 1.0:
            raise ValueError("bg_replace_prob must lie in [0, 1]")
        if self.bg_replace_mode not in ("random_color", "random_gray"):
            raise ValueError("bg_replace_mode must be 'random_color' or 'random_gray'")
        if isinstance(self.field, dict):
            self.field = rd.FieldConfig(**self.field)

    def window(self) -> sch.AnnealWindow:
        return sch.AnnealWindow(self.t_max_start, self.t_max_end, self.t_min_start, self.t_min_end,
                                max(int(round(self.anneal_fraction * self.total_steps)), 1))

    def resolution_at(self, step: int) -> int:
        res = self.resolution_schedule[0][1]
        for frac, r in self.resolution_schedule:
            if step >= frac * self.total_steps:
                res = r
        return int(res)

    def to_json(self) -> dict:
        d = asdict(self)
        d["resolution_schedule"] = [list(x) for x in self.resolution_schedule]
        return d


def sds_x0_loss(x: torch.Tensor, x0_target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """``|x - stopgrad(x0_target)|^2``; gradients reach the field only through ``x``."""
    if x.shape != x0_target.shape:
        raise ValueError(f"render and target shapes differ: {tuple(x.shape)} vs {tuple(x0_target.shape)}")
    sq = (x - x0_target.detach()) ** 2
    return sq.sum() if reduction == "sum" else sq.mean()


def prompt_tokens(words, append_style: bool = True) -> list[int]:
    words = list(words)
    if append_style and STYLE_3D not in words:
        words.append(STYLE_3D)
    return default_vocab().encode(words)


def _view_tokens(ids, n_views: int) -> torch.Tensor:
    return torch.as_tensor(ids, dtype=torch.long).reshape(1, 1, -1).expand(1, n_views, -1)


def sample_cameras(rng: np.random.Generator, n_views: int = 4):
    """Distillation cameras: a dataset-distributed rig and a random orthogonal subset."""
    rig = cam.sample_dataset_rig(rng)
    idx = cam.select_orthogonal_views(rng, rig, n_views)
    poses = [rig.poses[i] for i in idx]
    return rig, poses, np.stack([cam.normalize_extrinsic(p) for p in poses])


def _to_model_input(rgb: torch.Tensor, model_res: int) -> torch.Tensor:
    """``V x r x r x 3`` renders in [0, 1] to ``1 x V x 3 x R x R`` in [-1, 1]."""
    x = rgb.permute(0, 3, 1, 2)
    if x.shape[-1] != model_res:
        x = F_.interpolate(x, size=(model_res, model_res), mode="area")
    return (x * 2.0 - 1.0)[None]


def _backgrounds(cfg: DistillConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    if rng.uniform() < cfg.bg_replace_prob:
        if cfg.bg_replace_mode == "random_gray":
            return np.repeat(rng.uniform(size=(n, 1)), 3, axis=1)
        return rng.uniform(size=(n, 3))
    return np.full((n, 3), 0.5)


class _Float64Prediction:
    """Runs a denoiser in its own precision and returns its prediction as float64."""

    def __init__(self, model):
        self.model = model
        self.dtype = model.conv_in.weight.dtype

    def __call__(self, x_t, t, tokens, cameras=None):
        cams = None if cameras is None else cameras.to(self.dtype)
        return self.model(x_t.to(self.dtype), t, tokens, cams).double()


def verify_sds_equivalence(model, field_: rd.HashGridField, sched: sch.NoiseSchedule, n_trials: int = 200,
                           rng: np.random.Generator | None = None, cfg_scale: float = 1.0,
                           rescale_phi: float = 0.0, words=("one", "red", "sphere"), n_views: int = 4,
                           samples_per_ray: int = 8, param_checks: int = 4) -> dict:
    """Compare the x0-loss gradient with ``(2 sigma/alpha)(eps_theta - eps)`` over random trials.

    The field, the noising and the loss run in float64; the denoiser keeps its
    own precision and its prediction is promoted to float64, so the comparison
    measures the loss identity rather than network roundoff.  Returns the max
    relative deviation in image space (every trial) and in field-parameter
    space (the first ``param_checks`` trials), measured as ``|a - b|_inf / |b|_inf``.
    """
    rng = rng or np.random.default_rng(0)
    net = _Float64Prediction(copy.deepcopy(model).eval())
    fld = copy.deepcopy(field_).double()
    res = model.config.image_res
    settings = rd.RenderSettings(samples_per_ray=samples_per_ray, resolution=res)
    pos = _view_tokens(prompt_tokens(words), n_views)
    neg = null_tokens(pos.shape)
    dev_img, dev_param = 0.0, 0.0
    for trial in range(n_trials):
        _, poses, cams16 = sample_cameras(rng, n_views)
        t = int(rng.integers(0, sched.num_steps))
        out = rd.render_poses(fld, poses, settings, rng)
        x = _to_model_input(out["rgb"], res)
        x_leaf = x.detach().requires_grad_(True)
        eps = torch.from_numpy(rng.standard_normal(tuple(x.shape)))
        cams = torch.from_numpy(cams16)[None]
        with torch.no_grad():
            x_t = sch.add_noise(x_leaf.detach(), eps, t, sched)
            eps_g, x0 = guided_eps(net, x_t, pos, neg, cams, t, cfg_scale, rescale_phi, sched)
        a_, s_ = sched.coeffs(t)
        expected = (2.0 * s_ / a_) * (eps_g - eps)
        (grad_x,) = torch.autograd.grad(sds_x0_loss(x_leaf, x0, "sum"), x_leaf)
        dev_img = max(dev_img, float((grad_x - expected).abs().max() / expected.abs().max()))
        if trial < param_checks:
            params = list(fld.parameters())
            g_loss = torch.autograd.grad(sds_x0_loss(x, x0, "sum"), params, retain_graph=True)
            g_ref = torch.autograd.grad(x, params, grad_outputs=expected)
            num = max(float((g1 - g2).abs().max()) for g1, g2 in zip(g_loss, g_ref))
            den = max(float(g2.abs().max()) for g2 in g_ref)
            dev_param = max(dev_param, num / den)
    return {"max_rel_dev": max(dev_img, dev_param), "image_space": dev_img, "param_space": dev_param,
            "n_trials": n_trials}


class Distiller:
    """Owns the field optimizer and the distillation RNG stream."""

    def __init__(self, field_: rd.HashGridField, model, config: DistillConfig, sched: sch.NoiseSchedule,
                 rng: np.random.Generator | None = None):
        self.field = field_
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.cfg = config
        self.sched = sched
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.opt = torch.optim.Adam(field_.parameters(), lr=config.lr, betas=(0.9, 0.99), eps=1e-15)
        self.pos = _view_tokens(prompt_tokens(config.pos_words, config.append_style), config.n_views)
        if config.use_negative:
            self.neg = _view_tokens(default_vocab().encode(list(config.neg_words)), config.n_views)
        else:
            self.neg = null_tokens(self.pos.shape)
        self.window = config.window()
        self.step_index = 0

    def t_bounds(self, step: int) -> tuple[int, int]:
        T = self.sched.num_steps
        if self.cfg.use_anneal:
            return sch.anneal_bounds(step, self.window, T)
        return int(self.cfg.t_min_end * T), int(self.cfg.t_max_start * T)

    def step(self) -> dict:
        cfg, rng, step = self.cfg, self.rng, self.step_index
        _, poses, cams16 = sample_cameras(rng, cfg.n_views)
        res = cfg.resolution_at(step)
        settings = rd.RenderSettings(samples_per_ray=cfg.samples_per_ray, resolution=res)
        bgs = _backgrounds(cfg, rng, cfg.n_views)
        out = rd.render_poses(self.field, poses, settings, rng, bg_colors=bgs)
        x = _to_model_input(out["rgb"], self.model.config.image_res).to(torch.float32)

        t_min, t_max = self.t_bounds(step)
        t = int(rng.integers(t_min, t_max + 1))
        eps = torch.from_numpy(rng.standard_normal(tuple(x.shape)).astype(np.float32))
        phi = cfg.rescale_phi if cfg.use_rescale else 0.0
        with torch.no_grad():
            x_t = sch.add_noise(x.detach(), eps, t, self.sched)
            _, x0 = guided_eps(self.model, x_t, self.pos, self.neg, torch.from_numpy(cams16).float()[None],
                               t, cfg.cfg_scale, phi, self.sched)
        loss_sds = sds_x0_loss(x, x0)

        loss_orient = torch.zeros(())
        if cfg.orient_weight > 0 and cfg.orient_rays > 0:
            n_rays = out["dirs"].shape[0]
            sub = torch.from_numpy(rng.choice(n_rays, size=min(cfg.orient_rays, n_rays), replace=False))
            origins = torch.from_numpy(np.concatenate(
                [np.broadcast_to(p.translation, (res * res, 3)) for p in poses]))[sub]
            sub_out = rd.render_rays(self.field, origins, out["dirs"][sub], settings, rng, with_normals=True)
            loss_orient = rd.orientation_loss(sub_out["weights"], sub_out["normals"], sub_out["dirs"])
        loss = loss_sds + cfg.orient_weight * loss_orient

        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.step_index += 1
        return {"step": self.step_index, "t": t, "t_min": t_min, "t_max": t_max, "resolution": res,
                "loss_sds": float(loss_sds.detach()), "loss_orient": float(loss_orient.detach()),
                "alpha_mean": float(out["alpha"].mean().detach())}


def distill_step(distiller: Distiller) -> dict:
    return distiller.step()


@torch.no_grad()
def render_canonical(field_: rd.HashGridField, n_views: int = 4, res: int = 32, samples: int = 64) -> dict:
    rig = cam.canonical_rig(n_views)
    settings = rd.RenderSettings(samples_per_ray=samples, resolution=res, stratified=False)
    out = rd.render_poses(field_, rig.poses, settings)
    return {"rgb": out["rgb"].numpy(), "alpha": out["alpha"].numpy()}


def alpha_coverage(field_: rd.HashGridField, n_views: int = 4, res: int = 32, threshold: float = 0.5) -> np.ndarray:
    """Fraction of foreground pixels (alpha > threshold) per canonical view."""
    alpha = render_canonical(field_, n_views, res)["alpha"]
    return (alpha > threshold).reshape(n_views, -1).mean(-1)


def opaque_density(G: int) -> float:
    """Density at which one cell of a ``G^3`` grid over the box absorbs half the light along its width."""
    return math.log(2.0) * G / (2 * rd.BOX_HALF)


def hidden_voxels(density: np.ndarray, box_width: float = 2 * rd.BOX_HALF) -> np.ndarray:
    """Voxels whose transmittance to the box boundary is below 1/2 along all six axis directions.

    A scale-free occupancy for a density grid: any density that renders opaque
    encloses its interior, however far above saturation it sits, while a thin
    uniform fog hides nothing.  Optical depth is measured to each voxel centre.
    """
    depth = np.asarray(density, dtype=np.float64) * (box_width / density.shape[0])
    hidden = np.ones(depth.shape, dtype=bool)
    for ax in range(3):
        fwd = np.cumsum(depth, axis=ax) - depth / 2
        bwd = np.flip(np.cumsum(np.flip(depth, ax), axis=ax), ax) - depth / 2
        hidden &= (fwd >= math.log(2.0)) & (bwd >= math.log(2.0))
    return hidden


def occupancy_iou(pred: np.ndarray, occupancy: np.ndarray) -> float:
    pred, occupancy = np.asarray(pred, dtype=bool), np.asarray(occupancy, dtype=bool)
    union = np.logical_or(pred, occupancy).sum()
    return float(np.logical_and(pred, occupancy).sum() / union) if union else 0.0


def _save_grid(rows: list[np.ndarray], path: Path) -> None:
    grid = np.concatenate([np.concatenate(list(r), axis=1) for r in rows], axis=0)
    Image.fromarray(np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8)).save(path)


def distill(field_init: rd.HashGridField, model, config: DistillConfig, sched: sch.NoiseSchedule,
            out_dir=None, rng: np.random.Generator | None = None):
    """Full distillation loop.  Returns ``(field, gallery)``; gallery maps step -> canonical renders."""
    d = Distiller(field_init, model, config, sched, rng)
    snap_steps = sorted({int(round(f * config.total_steps)) for f in config.snapshot_fractions})
    gallery = {}
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w")
    try:
        if 0 in snap_steps:
            gallery[0] = render_canonical(d.field, config.n_views)["rgb"]
        while d.step_index < config.total_steps:
            m = d.step()
            if metrics_fh:
                metrics_fh.write(json.dumps(m, sort_keys=True) + "\n")
            if m["step"] % 100 == 0:
                log.info("distill step %d t=%d loss=%.4f alpha=%.3f", m["step"], m["t"], m["loss_sds"],
                         m["alpha_mean"])
            if m["step"] in snap_steps:
                gallery[m["step"]] = render_canonical(d.field, config.n_views)["rgb"]
    finally:
        if metrics_fh:
            metrics_fh.close()
    if out_dir is not None:
        _save_grid([gallery[s] for s in sorted(gallery)], out_dir / "gallery.png")
        rd.save_field(d.field, out_dir / "field", {"distill_config": config.to_json()})
    return d.field, gallery
