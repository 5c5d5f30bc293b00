"""Tensor-manifest checkpoint format shared by denoiser, radiance field and debug dumps.

A checkpoint is a directory holding ``manifest.json`` (tensor names, shapes,
dtype and byte offsets, plus free-form metadata) and ``weights.bin``, a
contiguous little-endian float32 blob.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
import torch

FORMAT = "mvsds-tensors/1"


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", dir=path.parent)
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", dir=path.parent)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_tensors(out_dir, tensors: dict, meta: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    manifest = {"format": FORMAT, "meta": meta or {}, "tensors": entries}
    tmp = Path(tempfile.mkdtemp(prefix=out_dir.name + ".tmp-", dir=out_dir.parent))
    try:
        (tmp / "weights.bin").write_bytes(b"".join(chunks))
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir


def load_tensors(ckpt_dir) -> tuple[dict[str, np.ndarray], dict]:
    ckpt_dir = Path(ckpt_dir)
    mpath = ckpt_dir / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{mpath}: unsupported format {manifest.get('format')!r}")
    blob = (ckpt_dir / "weights.bin").read_bytes()
    out = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise ValueError(f"{ckpt_dir}: tensor {e['name']} runs past the end of weights.bin")
        arr = np.frombuffer(blob[e["offset"]:end], dtype="<f4").reshape(e["shape"])
        out[e["name"]] = arr.copy()
    return out, manifest["meta"]


def load_into_module(module: torch.nn.Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy named tensors into a module's state, validating names and shapes."""
    state = module.state_dict()
    want = {prefix + k for k in state}
    have = {k for k in tensors if k.startswith(prefix)}
    if want != have:
        missing, extra = sorted(want - have), sorted(have - want)
        raise ValueError(f"checkpoint does not match model: missing={missing[:5]} unexpected={extra[:5]}")
    new_state = {}
    for k, v in state.items():
        arr = tensors[prefix + k]
        if tuple(arr.shape) != tuple(v.shape):
            raise ValueError(f"shape mismatch for {k}: checkpoint {arr.shape} vs model {tuple(v.shape)}")
        new_state[k] = torch.from_numpy(arr).to(v.dtype)
    module.load_state_dict(new_state)
