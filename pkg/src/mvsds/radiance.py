"""Hash-grid radiance field with differentiable volume rendering.

The field lives in the box [-0.5, 0.5]^3.  Each of ``levels`` feature tables is
indexed by a spatial XOR-prime hash of integer grid corners; per-level features
are trilinearly interpolated, concatenated and decoded by a small MLP into a
density (shifted softplus, so a fresh field is nearly empty) and an albedo in
[0, 1].  Rendered colour is albedo only (no shading).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F_
from torch import nn

from . import camera as cam
from . import tensorio
from ._hashgrid import HashEncode

PRIMES = (1, 2654435761, 805459861)
BOX_HALF = 0.5


@dataclass
class FieldConfig:
    levels: int = 8
    table_size: int = 2**14
    features: int = 2
    base_res: float = 16.0
    max_res: float = 128.0
    hidden: int = 64
    density_shift: float = -3.0
    blob_density: float = 0.0
    blob_radius: float = 0.5
    init_scale: float = 1e-4

    def __post_init__(self):
        if self.table_size <= 0 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")

    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return (self.max_res / self.base_res) ** (1.0 / (self.levels - 1))


@dataclass
class RenderSettings:
    samples_per_ray: int = 64
    resolution: int = 32
    background: str = "fixed"
    background_color: tuple = (0.5, 0.5, 0.5)
    stratified: bool = True

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("need at least 2 samples per ray")
        if self.background not in ("fixed", "random_color"):
            raise ValueError(f"unknown background mode {self.background!r}")


class HashGridField(nn.Module):
    def __init__(self, config: FieldConfig | None = None):
        super().__init__()
        self.config = cfg = config or FieldConfig()
        self.tables = nn.Parameter(
            (torch.rand(cfg.levels, cfg.table_size, cfg.features) * 2 - 1) * cfg.init_scale)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.levels * cfg.features, cfg.hidden), nn.SiLU(),
            nn.Linear(cfg.hidden, 4),
        )
        self.register_buffer("level_res", torch.tensor(self.level_resolutions(), dtype=torch.float64),
                             persistent=False)
        offsets = torch.tensor([[i >> 2 & 1, i >> 1 & 1, i & 1] for i in range(8)], dtype=torch.long)
        self.register_buffer("corner_offsets", offsets, persistent=False)

    def level_resolutions(self) -> list[float]:
        cfg = self.config
        return [cfg.base_res * cfg.growth() ** lvl for lvl in range(cfg.levels)]

    def hash_index(self, corners: torch.Tensor) -> torch.Tensor:
        h = corners[..., 0] * PRIMES[0]
        h = h ^ (corners[..., 1] * PRIMES[1])
        h = h ^ (corners[..., 2] * PRIMES[2])
        return h & (self.config.table_size - 1)

    def encode(self, points: torch.Tensor) -> torch.Tensor:
        """Concatenated per-level interpolated features, ``N x (levels * features)``."""
        pts = points.to(self.tables.dtype)
        return HashEncode.apply(pts, self.tables, self.level_resolutions(), BOX_HALF)

    def encode_reference(self, points: torch.Tensor) -> torch.Tensor:
        """Pure-torch equivalent of :meth:`encode` (slow; used to cross-check the kernels)."""
        cfg = self.config
        u = (points.to(self.tables.dtype) + BOX_HALF).clamp(0.0, 1.0)
        feats = []
        for lvl in range(cfg.levels):
            scaled = u * float(self.level_res[lvl])
            base = torch.floor(scaled.detach()).long()
            frac = scaled - base.to(scaled.dtype)
            corners = base[:, None, :] + self.corner_offsets[None]
            idx = self.hash_index(corners)
            w = torch.where(self.corner_offsets[None].bool(), frac[:, None, :], 1.0 - frac[:, None, :]).prod(-1)
            vals = self.tables[lvl][idx]
            feats.append((w[..., None] * vals).sum(1))
        return torch.cat(feats, dim=-1)

    def _raw(self, points: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.encode(points))

    def _density(self, raw_sigma: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        pre = raw_sigma + cfg.density_shift
        if cfg.blob_density:
            r = points.to(pre.dtype).norm(dim=-1)
            pre = pre + cfg.blob_density * (1.0 - r / cfg.blob_radius)
        inside = (points.abs() <= BOX_HALF).all(dim=-1)
        return F_.softplus(pre) * inside.to(pre.dtype)

    def query(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``(density N, rgb N x 3)``; density is exactly 0 outside the box."""
        raw = self._raw(points)
        return self._density(raw[:, 0], points), torch.sigmoid(raw[:, 1:])

    def density(self, points: torch.Tensor) -> torch.Tensor:
        return self.query(points)[0]


def query_field(field: HashGridField, points) -> tuple[torch.Tensor, torch.Tensor]:
    return field.query(torch.as_tensor(points))


def box_intersect(origins: torch.Tensor, dirs: torch.Tensor, half: float = BOX_HALF):
    """Entry/exit distances of rays through the box; misses give ``near == far == 0``."""
    safe = torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
    t0 = (-half - origins) / safe
    t1 = (half - origins) / safe
    near = torch.minimum(t0, t1).amax(-1).clamp_min(0.0)
    far = torch.maximum(t0, t1).amin(-1)
    hit = far > near
    return torch.where(hit, near, torch.zeros_like(near)), torch.where(hit, far, torch.zeros_like(far))


def normals(field, points: torch.Tensor, create_graph: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Unit normals ``-grad(density) / |grad(density)|`` and a validity mask.

    ``field`` is anything with a ``density(points)`` method.  Points where the
    gradient vanishes get a zero vector and ``False`` in the mask.
    """
    with torch.enable_grad():
        p = points if points.requires_grad else points.detach().requires_grad_(True)
        sigma = field.density(p)
        (g,) = torch.autograd.grad(sigma.sum(), p, create_graph=create_graph)
    return _normalize_grad(g)


def fd_normals(field, points: torch.Tensor, h: float | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Central-difference normals, differentiable w.r.t. the field parameters.

    Needs only first-order gradients through the density, so it works with the
    fused hash kernels.  ``h`` defaults to half a cell of the finest level.
    """
    if h is None:
        h = 0.5 * 2 * BOX_HALF / field.config.max_res
    offs = torch.eye(3, dtype=points.dtype) * h
    shifted = torch.cat([points[None] + offs[:, None], points[None] - offs[:, None]]).reshape(-1, 3)
    sig = field.density(shifted).reshape(2, 3, -1)
    g = ((sig[0] - sig[1]) / (2 * h)).T
    return _normalize_grad(g)


def _normalize_grad(g: torch.Tensor):
    norm = g.norm(dim=-1, keepdim=True)
    valid = norm[..., 0] > 1e-12
    n = torch.where(valid[..., None], -g / norm.clamp_min(1e-12), torch.zeros_like(g))
    return n, valid


def orientation_loss(weights: torch.Tensor, normals_: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Per ray ``sum_i stopgrad(w_i) * max(0, n_i . d)^2``, averaged over rays.

    ``weights`` is ``R x S``, ``normals_`` ``R x S x 3`` and ``dirs`` ``R x 3``.
    """
    facing = (normals_ * dirs[:, None, :]).sum(-1)
    return (weights.detach() * F_.relu(facing) ** 2).sum(-1).mean()


def render_rays(field: HashGridField, origins: torch.Tensor, dirs: torch.Tensor, settings: RenderSettings,
                rng: np.random.Generator | None = None, bg_color=None, with_normals: bool = False) -> dict:
    """Volume render ``R`` rays.  Returns rgb (composited), alpha, depth and per-sample weights.

    ``with_normals`` adds finite-difference density normals per sample.
    """
    dtype = field.tables.dtype
    origins = origins.to(dtype)
    dirs = dirs.to(dtype)
    n_rays, S = origins.shape[0], settings.samples_per_ray
    near, far = box_intersect(origins, dirs)
    width = (far - near) / S
    if settings.stratified and rng is not None:
        jitter = torch.from_numpy(rng.uniform(size=(n_rays, S))).to(dtype)
    else:
        jitter = torch.full((n_rays, S), 0.5, dtype=dtype)
    steps = torch.arange(S, dtype=dtype)[None]
    t = near[:, None] + (steps + jitter) * width[:, None]
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    flat = pts.reshape(-1, 3)
    sigma, rgb = field.query(flat)
    out = {}
    if with_normals:
        out["normals"] = fd_normals(field, flat.detach())[0].reshape(n_rays, S, 3)
    sigma = sigma.reshape(n_rays, S)
    rgb = rgb.reshape(n_rays, S, 3)
    tau = sigma * width[:, None]
    a = 1.0 - torch.exp(-tau)
    trans = torch.exp(-torch.cumsum(torch.cat([torch.zeros_like(tau[:, :1]), tau[:, :-1]], dim=1), dim=1))
    w = trans * a
    alpha = w.sum(-1)
    color = (w[..., None] * rgb).sum(1)
    if bg_color is None:
        bg_color = settings.background_color
    bg = torch.as_tensor(np.asarray(bg_color, dtype=np.float64), dtype=dtype)
    if bg.dim() == 1:
        bg = bg.expand(n_rays, 3)
    out.update(rgb=color + (1.0 - alpha[:, None]) * bg, rgb_raw=color, alpha=alpha,
               depth=(w * t).sum(-1), weights=w, dirs=dirs)
    return out


def pick_background(settings: RenderSettings, rng: np.random.Generator | None):
    if settings.background == "random_color":
        if rng is None:
            raise ValueError("random_color background needs an rng")
        return rng.uniform(size=3)
    return np.asarray(settings.background_color, dtype=np.float64)


def render_poses(field: HashGridField, poses, settings: RenderSettings, rng: np.random.Generator | None = None,
                 bg_colors=None, with_normals: bool = False) -> dict:
    """Render several poses in one batch; image outputs are ``V x res x res (x 3)``."""
    res = settings.resolution
    rays = [cam.camera_rays(p, res) for p in poses]
    o = torch.from_numpy(np.concatenate([r[0].reshape(-1, 3) for r in rays]))
    d = torch.from_numpy(np.concatenate([r[1].reshape(-1, 3) for r in rays]))
    if bg_colors is None:
        bg_colors = [pick_background(settings, rng) for _ in poses]
    bg = np.repeat(np.asarray(bg_colors, dtype=np.float64).reshape(len(poses), 3), res * res, axis=0)
    out = render_rays(field, o, d, settings, rng, bg, with_normals)
    v = len(poses)
    images = {
        "rgb": out["rgb"].reshape(v, res, res, 3),
        "rgb_raw": out["rgb_raw"].reshape(v, res, res, 3),
        "alpha": out["alpha"].reshape(v, res, res),
        "depth": out["depth"].reshape(v, res, res),
    }
    return {**images, "weights": out["weights"], "dirs": out["dirs"], "normals": out.get("normals"),
            "background": np.asarray(bg_colors)}


def render(field: HashGridField, pose: cam.CameraPose, settings: RenderSettings,
           rng: np.random.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    out = render_poses(field, [pose], settings, rng)
    return out["rgb"][0], out["alpha"][0], out["depth"][0]


@torch.no_grad()
def density_grid(field: HashGridField, G: int, chunk: int = 65536) -> np.ndarray:
    """Density at the centers of a ``G^3`` grid over the box, indexed ``[x, y, z]``."""
    c = (torch.arange(G, dtype=field.tables.dtype) + 0.5) / G - BOX_HALF
    pts = torch.stack(torch.meshgrid(c, c, c, indexing="ij"), dim=-1).reshape(-1, 3)
    out = torch.cat([field.density(pts[i:i + chunk]) for i in range(0, len(pts), chunk)])
    return out.reshape(G, G, G).cpu().numpy()


def export_occupancy(field: HashGridField, G: int, out_dir):
    grid = density_grid(field, G)
    return tensorio.save_tensors(out_dir, {"density": grid}, {"kind": "density_grid", "G": G,
                                                               "box": [-BOX_HALF, BOX_HALF]})


def save_field(field: HashGridField, out_dir, meta: dict | None = None):
    return tensorio.save_tensors(out_dir, {f"field/{k}": v for k, v in field.state_dict().items()},
                                 {"kind": "field", "config": asdict(field.config), **(meta or {})})


def load_field(ckpt_dir) -> HashGridField:
    tensors, meta = tensorio.load_tensors(ckpt_dir)
    if meta.get("kind") != "field":
        raise ValueError(f"{ckpt_dir} is not a field checkpoint")
    field = HashGridField(FieldConfig(**meta["config"]))
    tensorio.load_into_module(field, {k[len("field/"):]: v for k, v in tensors.items() if k.startswith("field/")})
    return field


def init_field(config: FieldConfig | None = None, seed: int = 0) -> HashGridField:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return HashGridField(config)
