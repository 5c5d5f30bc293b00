"""Procedural multi-view dataset: parametric scenes, sphere-traced renders, disk layout.

Layout written by :func:`build_dataset`::

    <root>/manifest.json
    <root>/<scene_id>/<pass>/meta.json, view_<k>.png     (32 views per pass)
    <root>/<scene_id>/single/meta.json, view_0.png       (single-view split)
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import camera as cam
from .vocab import COLORS, CONTEXT_LEN, COUNTS, SHAPES, STYLE_3D, default_vocab

PALETTE = {
    "red": (0.85, 0.15, 0.15),
    "orange": (0.95, 0.55, 0.10),
    "yellow": (0.95, 0.90, 0.20),
    "green": (0.20, 0.75, 0.25),
    "cyan": (0.20, 0.80, 0.85),
    "blue": (0.20, 0.30, 0.90),
    "purple": (0.60, 0.25, 0.80),
    "white": (0.92, 0.92, 0.92),
}

# axis-aligned half extents in units of the primitive scale
HALF_EXTENTS = {
    "sphere": (1.0, 1.0, 1.0),
    "box": (0.8, 0.8, 0.8),
    "cylinder": (0.75, 0.75, 0.75),
    "cone": (0.8, 0.8, 0.8),
    "torus": (1.0, 0.3, 1.0),
}

LIGHT_DIR = np.array([0.3, 0.9, 0.5]) / np.linalg.norm([0.3, 0.9, 0.5])
AMBIENT = 0.35
TRACE_STEPS = 64
TRACE_EPS = 1e-3
N_AZIMUTHS = 32


@dataclass(frozen=True)
class Primitive:
    shape: str
    color: str
    center: tuple[float, float, float]
    scale: float

    def to_json(self) -> dict:
        return {"shape": self.shape, "color": self.color,
                "center": [float(c) for c in self.center], "scale": float(self.scale)}

    @classmethod
    def from_json(cls, d: dict) -> "Primitive":
        return cls(d["shape"], d["color"], tuple(d["center"]), d["scale"])


@dataclass(frozen=True)
class Scene:
    primitives: list[Primitive]
    caption: list[str] = field(default_factory=list)


def caption_for(primitives) -> list[str]:
    """Group identical (color, shape) kinds; order by shape then color."""
    counts: dict[tuple[str, str], int] = {}
    for p in primitives:
        counts[(p.shape, p.color)] = counts.get((p.shape, p.color), 0) + 1
    words: list[str] = []
    for shape, color in sorted(counts, key=lambda k: (SHAPES.index(k[0]), COLORS.index(k[1]))):
        words += [COUNTS[counts[(shape, color)] - 1], color, shape]
    return words


def sample_scene(rng: np.random.Generator, max_tries: int = 200) -> Scene:
    n = int(rng.integers(1, 4))
    n_kinds = 1 if n == 1 else int(rng.integers(1, 3))
    kinds: list[tuple[str, str]] = []
    while len(kinds) < n_kinds:
        k = (SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))])
        if k not in kinds:
            kinds.append(k)
    assigned = kinds + [kinds[rng.integers(len(kinds))] for _ in range(n - n_kinds)]

    prims: list[Primitive] = []
    for shape, color in assigned:
        lo, hi = (0.25, 0.4) if n == 1 else (0.14, 0.26)
        for _ in range(max_tries):
            s = rng.uniform(lo, hi)
            ext = np.asarray(HALF_EXTENTS[shape]) * s
            c = rng.uniform(-0.5 + ext, 0.5 - ext)
            if all(np.linalg.norm(c - np.asarray(q.center)) >= 0.8 * (s + q.scale) for q in prims):
                prims.append(Primitive(shape, color, tuple(float(v) for v in c), float(s)))
                break
        # placement failures just drop the primitive; the caption follows what was placed
    return Scene(primitives=recenter(prims), caption=caption_for(prims))


def recenter(prims: list[Primitive]) -> list[Primitive]:
    """Translate so the primitives' joint bounding box is centered at the origin.

    A box that fits in the unit cube still fits after centering.
    """
    if not prims:
        return prims
    ext = [np.asarray(HALF_EXTENTS[p.shape]) * p.scale for p in prims]
    lo = np.min([np.asarray(p.center) - e for p, e in zip(prims, ext)], axis=0)
    hi = np.max([np.asarray(p.center) + e for p, e in zip(prims, ext)], axis=0)
    shift = -(lo + hi) / 2
    return [Primitive(p.shape, p.color, tuple(float(v) for v in np.asarray(p.center) + shift), p.scale)
            for p in prims]


def _sdf_primitive(p: np.ndarray, prim: Primitive) -> np.ndarray:
    q = (p - np.asarray(prim.center)) / prim.scale
    s = prim.scale
    if prim.shape == "sphere":
        d = np.linalg.norm(q, axis=-1) - 1.0
    elif prim.shape == "box":
        b = np.abs(q) - 0.8
        d = np.linalg.norm(np.maximum(b, 0.0), axis=-1) + np.minimum(b.max(axis=-1), 0.0)
    elif prim.shape == "cylinder":
        dx = np.hypot(q[..., 0], q[..., 2]) - 0.75
        dy = np.abs(q[..., 1]) - 0.75
        d = np.minimum(np.maximum(dx, dy), 0.0) + np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
    elif prim.shape == "cone":
        d = _sdf_capped_cone(q, h=0.8, r1=0.8, r2=0.0)
    elif prim.shape == "torus":
        ring = np.hypot(q[..., 0], q[..., 2]) - 0.7
        d = np.hypot(ring, q[..., 1]) - 0.3
    else:
        raise ValueError(f"unknown shape {prim.shape!r}")
    return d * s


def _sdf_capped_cone(q: np.ndarray, h: float, r1: float, r2: float) -> np.ndarray:
    # exact capped cone around +y, radius r1 at y=-h and r2 at y=+h
    qx = np.hypot(q[..., 0], q[..., 2])
    qy = q[..., 1]
    k1 = np.array([r2, h])
    k2 = np.array([r2 - r1, 2.0 * h])
    ca_x = qx - np.minimum(qx, np.where(qy < 0.0, r1, r2))
    ca_y = np.abs(qy) - h
    proj = ((k1[0] - qx) * k2[0] + (k1[1] - qy) * k2[1]) / (k2 @ k2)
    proj = np.clip(proj, 0.0, 1.0)
    cb_x = qx - k1[0] + k2[0] * proj
    cb_y = qy - k1[1] + k2[1] * proj
    sign = np.where((cb_x < 0.0) & (ca_y < 0.0), -1.0, 1.0)
    return sign * np.sqrt(np.minimum(ca_x**2 + ca_y**2, cb_x**2 + cb_y**2))


def scene_sdf(scene: Scene, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Signed distance to the union of primitives and the index of the closest one."""
    if not scene.primitives:
        return np.full(p.shape[:-1], np.inf), np.full(p.shape[:-1], -1)
    d = np.stack([_sdf_primitive(p, prim) for prim in scene.primitives], axis=0)
    idx = d.argmin(axis=0)
    return d.min(axis=0), idx


def occupancy_grid(scene: Scene, G: int) -> np.ndarray:
    """Analytic occupancy sampled at the centers of a G^3 grid over the unit box (x, y, z order)."""
    c = (np.arange(G) + 0.5) / G - 0.5
    pts = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)
    return scene_sdf(scene, pts)[0] < 0.0


def _box_interval(o: np.ndarray, d: np.ndarray, half: float):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (-half - o) * inv
        t1 = (half - o) * inv
    tn = np.nanmax(np.minimum(t0, t1), axis=-1)
    tf = np.nanmin(np.maximum(t0, t1), axis=-1)
    return np.maximum(tn, 0.0), tf


def trace_rays(scene: Scene, origins: np.ndarray, dirs: np.ndarray):
    """Sphere trace; returns (hit mask, hit distance, primitive index)."""
    n = origins.shape[0]
    hit = np.zeros(n, dtype=bool)
    prim_idx = np.full(n, -1)
    if not scene.primitives:
        return hit, np.zeros(n), prim_idx
    t, t_far = _box_interval(origins, dirs, 0.5 + 2 * TRACE_EPS)
    active = t < t_far
    for _ in range(TRACE_STEPS):
        if not active.any():
            break
        ids = np.nonzero(active)[0]
        d, _ = scene_sdf(scene, origins[ids] + t[ids, None] * dirs[ids])
        done = d < TRACE_EPS
        hit[ids[done]] = True
        t[ids[~done]] += d[~done]
        active[ids[done]] = False
        active[ids] &= t[ids] < t_far[ids]
    if hit.any():
        ids = np.nonzero(hit)[0]
        _, prim_idx[ids] = scene_sdf(scene, origins[ids] + t[ids, None] * dirs[ids])
    return hit, t, prim_idx


def _normals(scene: Scene, p: np.ndarray, h: float = 1e-4) -> np.ndarray:
    g = np.zeros_like(p)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = scene_sdf(scene, p + e)[0] - scene_sdf(scene, p - e)[0]
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


def render_views(scene: Scene, poses, res: int = 32) -> np.ndarray:
    """Render several poses at once; returns ``n x res x res x 4`` uint8 RGBA."""
    rays = [cam.camera_rays(p, res) for p in poses]
    o = np.concatenate([r[0].reshape(-1, 3) for r in rays])
    d = np.concatenate([r[1].reshape(-1, 3) for r in rays])
    hit, t, idx = trace_rays(scene, o, d)
    rgba = np.zeros((o.shape[0], 4))
    if hit.any():
        ids = np.nonzero(hit)[0]
        p = o[ids] + t[ids, None] * d[ids]
        n = _normals(scene, p)
        shade = AMBIENT + (1.0 - AMBIENT) * np.clip(n @ LIGHT_DIR, 0.0, None)
        albedo = np.array([PALETTE[scene.primitives[i].color] for i in idx[ids]])
        rgba[ids, :3] = albedo * shade[:, None]
        rgba[ids, 3] = 1.0
    out = np.round(np.clip(rgba, 0.0, 1.0) * 255.0).astype(np.uint8)
    return out.reshape(len(poses), res, res, 4)


def render_view(scene: Scene, pose: cam.CameraPose, res: int = 32) -> np.ndarray:
    if res not in (32, 64):
        raise ValueError(f"render resolution must be 32 or 64, got {res}")
    return render_views(scene, [pose], res)[0]


def _view_meta(pose: cam.CameraPose, **extra) -> dict:
    return {"camera16": [float(v) for v in cam.normalize_extrinsic(pose)],
            "fov_deg": float(pose.fov_deg), **{k: float(v) for k, v in extra.items()}}


def _write_record(rec_dir: Path, images: np.ndarray, views: list[dict], caption_ids, split: str) -> None:
    rec_dir.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(images):
        Image.fromarray(img, mode="RGBA").save(rec_dir / f"view_{k}.png", optimize=False)
    meta = {"caption": list(caption_ids), "split": split, "views": views}
    (rec_dir / "meta.json").write_text(json.dumps(meta, indent=1))


def build_dataset(rng: np.random.Generator, n_scenes: int, out_dir, passes: int = 2,
                  res: int = 32, force: bool = False) -> Path:
    """Generate ``n_scenes`` scenes, ``passes`` 32-view rigs each, plus one single view per scene."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    out_dir = Path(out_dir)
    if out_dir.exists() and not force:
        raise FileExistsError(f"{out_dir} exists (use force to overwrite)")
    vocab = default_vocab()
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=out_dir.name + ".tmp-", dir=out_dir.parent))
    try:
        scene_seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(n_scenes)
        scenes_meta, mv, single = [], [], []
        for i, ss in enumerate(scene_seeds):
            srng = np.random.default_rng(ss)
            scene = sample_scene(srng)
            sid = f"scene_{i:04d}"
            cap = [vocab.id(w) for w in scene.caption]
            scenes_meta.append({"id": sid, "caption": cap,
                                "primitives": [p.to_json() for p in scene.primitives]})
            for k in range(passes):
                rig = cam.sample_dataset_rig(srng, N_AZIMUTHS)
                imgs = render_views(scene, rig.poses, res)
                views = [_view_meta(p, azimuth_deg=a, elevation_deg=rig.elevation_deg, distance=rig.distance)
                         for p, a in zip(rig.poses, rig.azimuth_deg)]
                _write_record(tmp / sid / str(k), imgs, views, cap, "multiview")
                mv.append(f"{sid}/{k}")
            fov, elev, dist = cam.sample_rig_params(srng)
            az = srng.uniform(0.0, 360.0)
            pose = cam.orbit_pose(az, float(elev), float(dist), float(fov))
            imgs = render_views(scene, [pose], res)
            _write_record(tmp / sid / "single", imgs,
                          [_view_meta(pose, azimuth_deg=az, elevation_deg=elev, distance=dist)], cap, "single")
            single.append(f"{sid}/single")
        manifest = {
            "format": "mvsds-dataset/1",
            "resolution": res,
            "views_per_pass": N_AZIMUTHS,
            "passes": passes,
            "vocab_hash": vocab.digest(),
            "scenes": scenes_meta,
            "splits": {"multiview": mv, "single": single},
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1))
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except OSError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise OSError(f"writing dataset under {out_dir} failed: {exc}") from exc
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir


class Dataset:
    """In-memory view of a dataset directory (read-only)."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no dataset manifest at {path}")
        self.manifest = json.loads(path.read_text())
        self.res = int(self.manifest["resolution"])
        self.scenes = {s["id"]: s for s in self.manifest["scenes"]}
        self.records: dict[str, list[dict]] = {}
        self.images: dict[str, np.ndarray] = {}
        self.cameras: dict[str, np.ndarray] = {}
        for split, rels in self.manifest["splits"].items():
            metas, imgs, cams = [], [], []
            for rel in rels:
                meta = json.loads((self.root / rel / "meta.json").read_text())
                meta["path"] = rel
                metas.append(meta)
                imgs.append(np.stack([np.asarray(Image.open(self.root / rel / f"view_{k}.png").convert("RGBA"))
                                      for k in range(len(meta["views"]))]))
                cams.append(np.array([v["camera16"] for v in meta["views"]]))
            self.records[split] = metas
            self.images[split] = np.stack(imgs) if imgs else np.zeros((0, 0, self.res, self.res, 4), np.uint8)
            self.cameras[split] = np.stack(cams) if cams else np.zeros((0, 0, 16))

    def n_records(self, split: str) -> int:
        return len(self.records.get(split, []))

    def scene(self, scene_id: str) -> Scene:
        s = self.scenes[scene_id]
        prims = [Primitive.from_json(p) for p in s["primitives"]]
        return Scene(prims, default_vocab().decode(s["caption"]))

    def find_caption(self, words) -> list[str]:
        ids = [default_vocab().id(w) for w in words]
        return [s["id"] for s in self.manifest["scenes"] if s["caption"] == ids]


def composite(rgba: np.ndarray, background) -> np.ndarray:
    """RGBA uint8 over a background (a gray level or an RGB triple in [0, 1]), mapped to [-1, 1]."""
    x = rgba.astype(np.float32) / 255.0
    a = x[..., 3:4]
    rgb = x[..., :3] * a + np.asarray(background, dtype=np.float32) * (1.0 - a)
    return rgb * 2.0 - 1.0


def load_batch(dataset: Dataset, rng: np.random.Generator, mode: str = "multiview", F: int = 4):
    """Draw one training batch.

    ``multiview``: one record, ``F`` orthogonal views, shared grayscale background,
    caption + style token, cameras attached.  ``single``: ``F`` independent
    single-view records (each with its own background and caption), no cameras.
    """
    from .mvnet import MultiViewBatch

    vocab = default_vocab()
    if mode not in ("multiview", "single"):
        raise ValueError(f"unknown mode {mode!r}")
    n = dataset.n_records(mode)
    if n == 0:
        raise LookupError(f"dataset {dataset.root} has no {mode!r} records")
    if mode == "multiview":
        r = int(rng.integers(n))
        idx = cam.select_orthogonal_views(rng, dataset.images[mode].shape[1], F)
        gray = float(rng.uniform())
        imgs = composite(dataset.images[mode][r, idx], gray)
        cams = dataset.cameras[mode][r, idx].astype(np.float32)
        words = vocab.decode(dataset.records[mode][r]["caption"]) + [STYLE_3D]
        toks = np.tile(np.asarray(vocab.encode(words), dtype=np.int64), (F, 1))
        return MultiViewBatch(imgs, cams, toks, "multiview")
    imgs, toks = [], []
    for _ in range(F):
        r = int(rng.integers(n))
        imgs.append(composite(dataset.images[mode][r, 0], float(rng.uniform())))
        toks.append(vocab.encode(vocab.decode(dataset.records[mode][r]["caption"])))
    return MultiViewBatch(np.stack(imgs), None, np.asarray(toks, dtype=np.int64), "single")


__all__ = [
    "CONTEXT_LEN", "Dataset", "PALETTE", "Primitive", "Scene", "build_dataset", "caption_for",
    "composite", "load_batch", "occupancy_grid", "render_view", "render_views", "sample_scene",
    "scene_sdf",
]
