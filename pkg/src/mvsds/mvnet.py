"""Multi-view denoiser: a small pixel-space UNet with inflated self-attention.

Tensors inside the network are laid out ``(B, F, C, H, W)``: ``B`` scenes of
``F`` views.  Convolutions and normalization act per view; the self-attention
layers either attend over all ``F * H * W`` tokens of a scene jointly
(``inflated_3d``) or within each view (``per_view_2d``) using the same
weights.  Camera conditioning is a 2-layer MLP on the 16-value normalized
extrinsic, injected either into the time embedding or as an extra
cross-attention token.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F_
from torch import nn

from . import sched as sch
from . import tensorio
from .vocab import CONTEXT_LEN, default_vocab

CAMERA_INJECTIONS = ("add_to_time", "append_to_text")
ATTENTION_MODES = ("inflated_3d", "per_view_2d")


@dataclass
class DenoiserConfig:
    image_res: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 4)
    attention_resolutions: tuple = (8, 4)
    num_res_blocks: int = 1
    text_embed_dim: int = 64
    time_embed_dim: int = 128
    head_dim: int = 8
    norm_groups: int = 8
    vocab_size: int = field(default_factory=lambda: len(default_vocab()))
    context_len: int = CONTEXT_LEN
    camera_injection: str = "add_to_time"
    attention_mode: str = "inflated_3d"

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        self.attention_resolutions = tuple(int(r) for r in self.attention_resolutions)
        if self.camera_injection not in CAMERA_INJECTIONS:
            raise ValueError(f"camera_injection must be one of {CAMERA_INJECTIONS}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        bad = set(self.attention_resolutions) - set(self.level_resolutions())
        if bad:
            raise ValueError(f"attention resolutions {sorted(bad)} are not UNet level resolutions "
                             f"{self.level_resolutions()}")
        for m in self.channel_mult:
            c = m * self.base_channels
            if c % self.head_dim or c % self.norm_groups:
                raise ValueError(f"channel count {c} not divisible by head_dim/norm_groups")

    def level_resolutions(self) -> list[int]:
        """Encoder level resolutions followed by the middle-block resolution."""
        n = len(self.channel_mult)
        return [self.image_res // 2**i for i in range(n + 1)]

    def to_json(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


@dataclass
class MultiViewBatch:
    """One scene's worth of training data (numpy, channels-last)."""

    images: np.ndarray  # F x H x W x 3 in [-1, 1]
    cameras: np.ndarray | None  # F x 16, None in single mode
    tokens: np.ndarray  # F x L token ids
    mode: str

    def __post_init__(self):
        if (self.mode == "single") != (self.cameras is None):
            raise ValueError("cameras must be present exactly when mode is 'multiview'")


def collate(batches: list[MultiViewBatch], dtype=torch.float32):
    """Stack scenes into ``(B, F, 3, H, W)`` images, ``(B, F, 16)`` cameras, ``(B, F, L)`` tokens."""
    modes = {b.mode for b in batches}
    if len(modes) != 1:
        raise ValueError("cannot mix single and multiview batches")
    x = torch.from_numpy(np.stack([b.images for b in batches])).to(dtype).permute(0, 1, 4, 2, 3).contiguous()
    cams = None
    if batches[0].cameras is not None:
        cams = torch.from_numpy(np.stack([b.cameras for b in batches])).to(dtype)
    toks = torch.from_numpy(np.stack([b.tokens for b in batches])).long()
    return x, cams, toks


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Attention(nn.Module):
    def __init__(self, dim: int, context_dim: int | None = None, head_dim: int = 8):
        super().__init__()
        context_dim = context_dim or dim
        self.heads = dim // head_dim
        self.head_dim = head_dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        context = x if context is None else context
        b, n, _ = x.shape
        m = context.shape[1]
        q = self.to_q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(context).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(context).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = (w @ v).transpose(1, 2).reshape(b, n, -1)
        return self.to_out(out)


def inflated_attention(attn: Attention, tokens: torch.Tensor, n_views: int, mode: str) -> torch.Tensor:
    """Self-attention over ``(B*F, HW, C)`` tokens.

    ``inflated_3d`` regroups to ``(B, F*HW, C)`` so every view attends to every
    other view; ``per_view_2d`` keeps the views separate.  Same weights either way.
    """
    if mode not in ATTENTION_MODES:
        raise ValueError(f"unknown attention mode {mode!r}")
    bf, hw, c = tokens.shape
    if bf % n_views:
        raise ValueError(f"token batch {bf} is not a multiple of {n_views} views")
    if mode == "per_view_2d":
        return attn(tokens)
    b = bf // n_views
    out = attn(tokens.reshape(b, n_views * hw, c))
    return out.reshape(bf, hw, c)


def inflated_attention_bfhwc(attn: Attention, features: torch.Tensor, mode: str) -> torch.Tensor:
    """Convenience form on ``(B, F, H, W, C)`` features."""
    if features.dim() != 5:
        raise ValueError(f"expected B x F x H x W x C features, got shape {tuple(features.shape)}")
    b, f, h, w, c = features.shape
    if c % attn.head_dim:
        raise ValueError(f"channels {c} not divisible by head dim {attn.head_dim}")
    out = inflated_attention(attn, features.reshape(b * f, h * w, c), f, mode)
    return out.reshape(b, f, h, w, c)


class TransformerBlock(nn.Module):
    def __init__(self, ch: int, context_dim: int, head_dim: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, ch)
        self.proj_in = nn.Linear(ch, ch)
        self.ln1 = nn.LayerNorm(ch)
        self.attn1 = Attention(ch, head_dim=head_dim)
        self.ln2 = nn.LayerNorm(ch)
        self.attn2 = Attention(ch, context_dim, head_dim=head_dim)
        self.ln3 = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 4 * ch), nn.GELU(), nn.Linear(4 * ch, ch))
        self.proj_out = nn.Linear(ch, ch)

    def forward(self, x, context, n_views: int, mode: str):
        bf, c, h, w = x.shape
        y = self.norm(x).permute(0, 2, 3, 1).reshape(bf, h * w, c)
        y = self.proj_in(y)
        y = y + inflated_attention(self.attn1, self.ln1(y), n_views, mode)
        y = y + self.attn2(self.ln2(y), context)
        y = y + self.ff(self.ln3(y))
        y = self.proj_out(y)
        return x + y.reshape(bf, h, w, c).permute(0, 3, 1, 2)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F_.silu(self.norm1(x)))
        h = h + self.temb(F_.silu(emb))[:, :, None, None]
        h = self.conv2(F_.silu(self.norm2(h)))
        return self.skip(x) + h


class Stage(nn.Module):
    """ResBlock optionally followed by a transformer block."""

    def __init__(self, cin, cout, cfg: DenoiserConfig, attn: bool):
        super().__init__()
        self.res = ResBlock(cin, cout, cfg.time_embed_dim, cfg.norm_groups)
        self.attn = TransformerBlock(cout, cfg.text_embed_dim, cfg.head_dim, cfg.norm_groups) if attn else None

    def forward(self, x, emb, context, n_views, mode):
        x = self.res(x, emb)
        if self.attn is not None:
            x = self.attn(x, context, n_views, mode)
        return x


class MultiViewUNet(nn.Module):
    """The denoiser ``eps_theta(x_t; tokens, cameras, t)``; its state_dict is the parameter tree."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = cfg = config
        ch = cfg.base_channels
        tdim = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(ch, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        cam_out = tdim if cfg.camera_injection == "add_to_time" else cfg.text_embed_dim
        self.camera_mlp = nn.Sequential(nn.Linear(16, tdim), nn.SiLU(), nn.Linear(tdim, cam_out))
        self.token_emb = nn.Embedding(cfg.vocab_size, cfg.text_embed_dim)
        self.pos_emb = nn.Parameter(torch.randn(cfg.context_len, cfg.text_embed_dim) * 0.02)

        self.conv_in = nn.Conv2d(cfg.in_channels, ch, 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skips = [ch]
        cur = ch
        res = cfg.image_res
        for level, mult in enumerate(cfg.channel_mult):
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(Stage(cur, mult * ch, cfg, res in cfg.attention_resolutions))
                cur = mult * ch
                skips.append(cur)
            self.down.append(blocks)
            self.downsample.append(nn.Conv2d(cur, cur, 3, stride=2, padding=1))
            if level < len(cfg.channel_mult) - 1:
                skips.append(cur)
            res //= 2
        mid_attn = res in cfg.attention_resolutions
        self.mid1 = Stage(cur, cur, cfg, mid_attn)
        self.mid2 = Stage(cur, cur, cfg, False)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for mult in reversed(cfg.channel_mult):
            self.upsample.append(nn.Conv2d(cur, cur, 3, padding=1))
            res *= 2
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks + 1):
                blocks.append(Stage(cur + skips.pop(), mult * ch, cfg, res in cfg.attention_resolutions))
                cur = mult * ch
            self.up.append(blocks)
        self.norm_out = nn.GroupNorm(cfg.norm_groups, cur)
        self.conv_out = nn.Conv2d(cur, cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def embed_camera(self, camera16: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(camera16).all():
            raise ValueError("camera parameters must be finite")
        if camera16.shape[-1] != 16:
            raise ValueError(f"camera vectors must have 16 values, got {camera16.shape[-1]}")
        return self.camera_mlp(camera16)

    def context(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.token_emb(tokens) + self.pos_emb[: tokens.shape[-1]]

    def forward(self, x_t, t, tokens, cameras=None, mode: str | None = None):
        """Predict noise for ``x_t`` of shape ``(B, F, C, H, W)``.

        ``cameras`` (``(B, F, 16)``) selects multi-view mode; without cameras
        every view is an independent image (2D attention, no camera path).
        """
        cfg = self.config
        inferred = "single" if cameras is None else "multiview"
        if mode is not None and mode != inferred:
            raise ValueError(f"mode {mode!r} is inconsistent with cameras={'absent' if cameras is None else 'present'}")
        if x_t.dim() != 5:
            raise ValueError(f"expected (B, F, C, H, W) input, got {tuple(x_t.shape)}")
        b, f, c, h, w = x_t.shape
        if tokens.shape[:2] != (b, f):
            raise ValueError(f"tokens must be (B, F, L) = ({b}, {f}, L), got {tuple(tokens.shape)}")
        if cameras is not None and tuple(cameras.shape) != (b, f, 16):
            raise ValueError(f"cameras must be ({b}, {f}, 16), got {tuple(cameras.shape)}")
        attn_mode = "per_view_2d" if cameras is None else cfg.attention_mode

        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        emb = self.time_mlp(timestep_embedding(t, cfg.base_channels).to(x_t.dtype))
        emb = emb[:, None].expand(b, f, -1).reshape(b * f, -1)
        ctx = self.context(tokens.reshape(b * f, -1))
        if cameras is not None:
            cam = self.embed_camera(cameras.reshape(b * f, 16))
            if cfg.camera_injection == "add_to_time":
                emb = emb + cam
            else:
                ctx = torch.cat([ctx, cam[:, None]], dim=1)

        x = self.conv_in(x_t.reshape(b * f, c, h, w))
        hs = [x]
        last = len(self.down) - 1
        for level, (blocks, down) in enumerate(zip(self.down, self.downsample)):
            for blk in blocks:
                x = blk(x, emb, ctx, f, attn_mode)
                hs.append(x)
            x = down(x)
            if level < last:
                hs.append(x)
        x = self.mid1(x, emb, ctx, f, attn_mode)
        x = self.mid2(x, emb, ctx, f, attn_mode)
        for blocks, up in zip(self.up, self.upsample):
            x = up(F_.interpolate(x, scale_factor=2, mode="nearest"))
            for blk in blocks:
                x = blk(torch.cat([x, hs.pop()], dim=1), emb, ctx, f, attn_mode)
        out = self.conv_out(F_.silu(self.norm_out(x)))
        return out.reshape(b, f, c, h, w)


def init_denoiser(config: DenoiserConfig | None = None, seed: int = 0) -> MultiViewUNet:
    """Fan-in scaled init (torch defaults) under a private RNG; zero output conv."""
    config = config or DenoiserConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MultiViewUNet(config)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_denoiser(model: MultiViewUNet, out_dir, extra_tensors: dict | None = None, meta: dict | None = None):
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra_tensors or {})
    return tensorio.save_tensors(out_dir, tensors, {"kind": "denoiser", "config": model.config.to_json(),
                                                     **(meta or {})})


def load_denoiser(ckpt_dir) -> tuple[MultiViewUNet, dict, dict]:
    """Returns (model, all tensors, metadata); the model's shapes are validated against its config."""
    tensors, meta = tensorio.load_tensors(ckpt_dir)
    if meta.get("kind") != "denoiser":
        raise ValueError(f"{ckpt_dir} is not a denoiser checkpoint")
    model = MultiViewUNet(DenoiserConfig.from_json(meta["config"]))
    tensorio.load_into_module(model, {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
    return model, tensors, meta


def _per_view_std(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).std(dim=-1)[..., None, None, None]


def guided_eps(model, x_t, pos_tokens, neg_tokens, cameras, t: int, cfg_scale: float,
               rescale_phi: float, sched: sch.NoiseSchedule):
    """Classifier-free guidance against a negative prompt, with x0 rescale.

    Returns ``(eps_guided, x0_adjusted)``.  The rescale matches each view's std of
    the guided x0 to the std of the positive-only x0 and blends with ``rescale_phi``.
    """
    if cfg_scale < 0:
        raise ValueError("cfg_scale must be >= 0")
    if not 0.0 <= rescale_phi <= 1.0:
        raise ValueError("rescale_phi must lie in [0, 1]")
    b = x_t.shape[0]
    cams = None if cameras is None else torch.cat([cameras, cameras])
    eps = model(torch.cat([x_t, x_t]), t, torch.cat([pos_tokens, neg_tokens]), cams)
    eps_pos, eps_neg = eps[:b], eps[b:]
    eps_g = eps_neg + cfg_scale * (eps_pos - eps_neg)
    x0_cfg = sch.estimate_x0(x_t, eps_g, t, sched)
    if rescale_phi == 0.0:
        return eps_g, x0_cfg
    x0_pos = sch.estimate_x0(x_t, eps_pos, t, sched)
    std_cfg = _per_view_std(x0_cfg)
    ratio = torch.where(std_cfg > 0, _per_view_std(x0_pos) / std_cfg.clamp_min(1e-30), torch.ones_like(std_cfg))
    x0_rescaled = x0_cfg * ratio
    return eps_g, rescale_phi * x0_rescaled + (1.0 - rescale_phi) * x0_cfg


def null_tokens(shape, pad_id: int | None = None) -> torch.Tensor:
    pad_id = default_vocab().pad_id if pad_id is None else pad_id
    return torch.full(shape, pad_id, dtype=torch.long)


@torch.no_grad()
def sample_views(model, tokens, cameras, n_ddim_steps: int, cfg_scale: float, rng: np.random.Generator,
                 sched: sch.NoiseSchedule, neg_tokens=None, rescale_phi: float = 0.0) -> np.ndarray:
    """DDIM multi-view sampling.

    ``tokens`` is a length-L id sequence (shared by every view) and ``cameras``
    an ``F x 16`` array; ``F`` may exceed the number of views used in training.
    Returns ``F x H x W x 3`` float images in [0, 1].
    """
    cams = torch.as_tensor(np.asarray(cameras), dtype=torch.float32)[None]
    n_views = cams.shape[1]
    toks = torch.as_tensor(np.asarray(tokens), dtype=torch.long).reshape(1, 1, -1).expand(1, n_views, -1)
    neg = null_tokens(toks.shape) if neg_tokens is None else \
        torch.as_tensor(np.asarray(neg_tokens), dtype=torch.long).reshape(1, 1, -1).expand(1, n_views, -1)
    res = model.config.image_res
    shape = (1, n_views, model.config.in_channels, res, res)
    x = torch.from_numpy(rng.standard_normal(shape).astype(np.float32))
    ts = sch.ddim_timesteps(sched.num_steps, n_ddim_steps)
    for t_from, t_to in zip(ts[:-1], ts[1:]):
        eps, x0 = guided_eps(model, x, toks, neg, cams, t_from, cfg_scale, rescale_phi, sched)
        if rescale_phi > 0.0:
            # keep the rescaled x0 consistent with the step: re-derive eps from it
            a, s = sched.coeffs(t_from)
            eps = (x - a * x0) / s
        x = sch.ddim_step(x, eps, t_from, t_to, sched)
    out = ((x[0].clamp(-1.0, 1.0) + 1.0) / 2.0).permute(0, 2, 3, 1)
    return out.numpy()
