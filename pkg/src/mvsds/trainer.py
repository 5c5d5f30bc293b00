"""Joint 2D / multi-view diffusion training and multi-view DreamBooth fine-tuning."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import sched as sch
from .mvnet import MultiViewUNet, collate, load_denoiser, save_denoiser
from .scenegen import Dataset, composite, load_batch
from .vocab import NEG_LOWQ, default_vocab

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    total_steps: int = 2000
    batch_scenes: int = 2
    n_views: int = 4
    mv_probability: float = 0.7
    lr: float = 1e-4
    weight_decay: float = 0.01
    cond_dropout: float = 0.1
    grad_clip: float = 1.0
    ema_decay: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mv_probability <= 1.0:
            raise ValueError("mv_probability must lie in [0, 1]")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("cond_dropout must lie in [0, 1]")


@dataclass
class DreamBoothConfig:
    identity_path: str = ""
    lam: float = 1.0
    steps: int = 600
    lr: float = 2e-5
    weight_decay: float = 0.01
    batch_size: int = 4
    n_identity_views: int = 8


def diffusion_loss(model, x0, tokens, cameras, t, eps, sched: sch.NoiseSchedule) -> torch.Tensor:
    """Mean squared error between the true noise and the model's prediction.

    ``x0``/``eps`` are ``(B, F, C, H, W)``; ``t`` is an int or a length-B sequence
    (one timestep shared by all views of a scene).
    """
    if x0.shape != eps.shape:
        raise ValueError("eps must match the image batch shape")
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() == 1:
        t = t.expand(x0.shape[0])
    alpha = torch.as_tensor(sched.alpha, dtype=x0.dtype)[t].view(-1, 1, 1, 1, 1)
    sigma = torch.as_tensor(sched.sigma, dtype=x0.dtype)[t].view(-1, 1, 1, 1, 1)
    x_t = alpha * x0 + sigma * eps
    return torch.mean((eps - model(x_t, t, tokens, cameras)) ** 2)


def draw_mode(u: float, mv_probability: float) -> str:
    return "multiview" if u <= mv_probability else "single"


def _check_finite(model: torch.nn.Module, step: int) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"parameter {name} became non-finite at step {step}")


class Trainer:
    """Single owner of a denoiser, its optimizer and the training RNG stream."""

    def __init__(self, model: MultiViewUNet, config: TrainConfig, sched: sch.NoiseSchedule,
                 rng: np.random.Generator | None = None):
        self.model = model
        self.config = config
        self.sched = sched
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.step = 0
        self.opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.ema = None
        if config.ema_decay:
            self.ema = {k: v.detach().clone() for k, v in model.state_dict().items()}

    def sample_batch(self, dataset: Dataset):
        cfg = self.config
        mode = draw_mode(float(self.rng.random()), cfg.mv_probability)
        batches = [load_batch(dataset, self.rng, mode, cfg.n_views) for _ in range(cfg.batch_scenes)]
        x0, cams, toks = collate(batches)
        drop = self.rng.random(cfg.batch_scenes) < cfg.cond_dropout
        # half of the dropped captions become the bare negative token, which the
        # toy data otherwise never shows; it thus learns to act as "unconditional"
        as_neg = self.rng.random(cfg.batch_scenes) < 0.5
        vocab = default_vocab()
        for i in np.flatnonzero(drop):
            toks[i] = vocab.pad_id
            if as_neg[i]:
                toks[i, :, 0] = vocab.id(NEG_LOWQ)
        t = self.rng.integers(0, self.sched.num_steps, size=cfg.batch_scenes)
        eps = torch.from_numpy(self.rng.standard_normal(tuple(x0.shape)).astype(np.float32))
        return mode, x0, cams, toks, torch.from_numpy(t), eps

    def train_step(self, dataset: Dataset) -> dict:
        mode, x0, cams, toks, t, eps = self.sample_batch(dataset)
        self.model.train()
        loss = diffusion_loss(self.model, x0, toks, cams, t, eps, self.sched)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        if self.config.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.opt.step()
        self.step += 1
        _check_finite(self.model, self.step)
        if self.ema is not None:
            d = self.config.ema_decay
            with torch.no_grad():
                for k, v in self.model.state_dict().items():
                    self.ema[k].mul_(d).add_(v, alpha=1 - d)
        val = float(loss.detach())
        return {"step": self.step, "mode": mode, "loss": val, "loss_image": val, "loss_preserve": 0.0,
                "lr": self.opt.param_groups[0]["lr"]}

    def save(self, out_dir, meta: dict | None = None) -> Path:
        extra = {}
        for i, (p, st) in enumerate(zip(self.model.parameters(), self._opt_states())):
            for k, v in st.items():
                extra[f"optim/{i:04d}/{k}"] = v.reshape(1) if v.dim() == 0 else v
        info = {"step": self.step, "train_config": asdict(self.config),
                "rng_state": self.rng.bit_generator.state, **(meta or {})}
        return save_denoiser(self.model, out_dir, extra, info)

    def _opt_states(self):
        return [self.opt.state.get(p, {}) for p in self.model.parameters()]

    @classmethod
    def resume(cls, ckpt_dir, sched: sch.NoiseSchedule, config: TrainConfig | None = None) -> "Trainer":
        model, tensors, meta = load_denoiser(ckpt_dir)
        config = config or TrainConfig(**meta["train_config"])
        tr = cls(model, config, sched)
        tr.step = int(meta["step"])
        tr.rng.bit_generator.state = meta["rng_state"]
        for i, p in enumerate(model.parameters()):
            keys = [k for k in tensors if k.startswith(f"optim/{i:04d}/")]
            if not keys:
                continue
            st = {}
            for k in keys:
                name = k.rsplit("/", 1)[1]
                v = torch.from_numpy(tensors[k])
                st[name] = v.reshape(()) if name == "step" else v.reshape(p.shape)
            tr.opt.state[p] = st
        return tr


def train(model: MultiViewUNet, dataset: Dataset, config: TrainConfig, sched: sch.NoiseSchedule,
          out_dir=None, checkpoint_every: int = 500, trainer: Trainer | None = None,
          rng: np.random.Generator | None = None) -> Trainer:
    """Run the training loop to ``config.total_steps``; writes metrics/checkpoints if ``out_dir``."""
    tr = trainer or Trainer(model, config, sched, rng)
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "a" if trainer is not None else "w")
    try:
        while tr.step < config.total_steps:
            m = tr.train_step(dataset)
            if metrics_fh:
                metrics_fh.write(json.dumps(m, sort_keys=True) + "\n")
            if m["step"] % 100 == 0:
                log.info("step %d mode=%s loss=%.4f", m["step"], m["mode"], m["loss"])
            if out_dir is not None and checkpoint_every and tr.step % checkpoint_every == 0:
                tr.save(out_dir / "checkpoints" / f"step_{tr.step:07d}")
    finally:
        if metrics_fh:
            metrics_fh.close()
    if out_dir is not None:
        tr.save(out_dir / "checkpoints" / "final")
    return tr


@torch.no_grad()
def evaluate(model, dataset: Dataset, sched: sch.NoiseSchedule, n_batches: int = 16, seed: int = 1234,
             n_views: int = 4, n_buckets: int = 4) -> dict:
    """Deterministic held-out epsilon-MSE for both modes plus per-timestep-bucket MSE."""
    model.eval()
    out: dict = {}
    for mode in ("multiview", "single"):
        if dataset.n_records(mode) == 0:
            continue
        rng = np.random.default_rng([seed, 0 if mode == "multiview" else 1])
        errs, buckets = [], [[] for _ in range(n_buckets)]
        for _ in range(n_batches):
            x0, cams, toks = collate([load_batch(dataset, rng, mode, n_views)])
            t = int(rng.integers(0, sched.num_steps))
            eps = torch.from_numpy(rng.standard_normal(tuple(x0.shape)).astype(np.float32))
            err = float(diffusion_loss(model, x0, toks, cams, t, eps, sched))
            errs.append(err)
            buckets[t * n_buckets // sched.num_steps].append(err)
        out[f"mse_{mode}"] = float(np.mean(errs))
        out[f"mse_{mode}_by_bucket"] = [float(np.mean(b)) if b else None for b in buckets]
    return out


def load_identity_images(dataset: Dataset, record: str | None = None, n_views: int = 8,
                         seed: int = 0) -> tuple[np.ndarray, list[int]]:
    """Identity set for DreamBooth: ``n_views`` evenly spaced renders of one record, grayscale background."""
    recs = dataset.records["multiview"]
    if not recs:
        raise ValueError(f"dataset {dataset.root} has no multiview records for an identity set")
    meta = recs[0] if record is None else next((r for r in recs if r["path"] == record), None)
    if meta is None:
        raise ValueError(f"record {record!r} not found in {dataset.root}")
    r = recs.index(meta)
    imgs = dataset.images["multiview"][r]
    idx = np.linspace(0, len(imgs), n_views, endpoint=False).astype(int)
    rng = np.random.default_rng(seed)
    x = np.stack([composite(imgs[i], float(rng.uniform())) for i in idx])
    vocab = default_vocab()
    return x, vocab.encode(vocab.decode(meta["caption"]))


def _identity_loss(model, images, tokens, t, eps, sched):
    x0 = images[:, None]
    toks = tokens[:, None]
    return diffusion_loss(model, x0, toks, None, t, eps[:, None], sched)


def identity_eval_loss(model, images: torch.Tensor, tokens: torch.Tensor, sched, n_draws: int = 8,
                       seed: int = 99) -> float:
    """Fixed Monte-Carlo estimate of the image-mode loss on the identity set."""
    rng = np.random.default_rng(seed)
    tot = 0.0
    with torch.no_grad():
        for _ in range(n_draws):
            t = torch.from_numpy(rng.integers(0, sched.num_steps, size=images.shape[0]))
            eps = torch.from_numpy(rng.standard_normal(tuple(images.shape)).astype(np.float32))
            tot += float(_identity_loss(model, images, tokens, t, eps, sched))
    return tot / n_draws


def dreambooth_finetune(model: MultiViewUNet, db: DreamBoothConfig, sched: sch.NoiseSchedule,
                        rng: np.random.Generator, images: np.ndarray, tokens, on_step=None,
                        eval_every: int = 0) -> list[dict]:
    """Fine-tune on identity images in image mode with an L1 preservation penalty.

    Loss = image diffusion loss + lam * mean |theta - theta_0|.  Returns per-step
    metric records; ``eval_every`` adds a fixed-noise identity loss to the records.
    """
    if len(images) == 0:
        raise ValueError("identity set is empty")
    if db.lam < 0:
        raise ValueError("lambda must be >= 0")
    params = [p for p in model.parameters() if p.requires_grad]
    theta0 = [p.detach().clone() for p in params]
    n_theta = sum(p.numel() for p in params)
    opt = torch.optim.AdamW(params, lr=db.lr, weight_decay=db.weight_decay)
    imgs = torch.from_numpy(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()
    toks = torch.as_tensor(np.asarray(tokens), dtype=torch.long).reshape(1, -1).expand(len(imgs), -1)
    records = []
    for step in range(1, db.steps + 1):
        model.train()
        idx = torch.from_numpy(rng.integers(0, len(imgs), size=db.batch_size))
        t = torch.from_numpy(rng.integers(0, sched.num_steps, size=db.batch_size))
        eps = torch.from_numpy(rng.standard_normal((db.batch_size, *imgs.shape[1:])).astype(np.float32))
        loss_image = _identity_loss(model, imgs[idx], toks[idx], t, eps, sched)
        loss_preserve = sum((p - p0).abs().sum() for p, p0 in zip(params, theta0)) / n_theta
        loss = loss_image + db.lam * loss_preserve
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        _check_finite(model, step)
        rec = {"step": step, "mode": "single", "loss": float(loss.detach()),
               "loss_image": float(loss_image.detach()), "loss_preserve": float(loss_preserve.detach()),
               "lam": db.lam, "lr": db.lr}
        if eval_every and step % eval_every == 0:
            rec["identity_eval"] = identity_eval_loss(model, imgs, toks, sched)
        records.append(rec)
        if on_step:
            on_step(rec)
    return records


def mean_abs_deviation(model: torch.nn.Module, reference: dict[str, torch.Tensor]) -> float:
    tot, n = 0.0, 0
    for name, p in model.named_parameters():
        tot += float((p.detach() - reference[name]).abs().sum())
        n += p.numel()
    return tot / n


__all__ = [
    "DreamBoothConfig", "TrainConfig", "Trainer", "diffusion_loss", "draw_mode", "dreambooth_finetune",
    "evaluate", "identity_eval_loss", "load_identity_images", "mean_abs_deviation", "train",
]
