"""Sample one prompt with 4 and with 8 views from a checkpoint trained on 4 views.

Usage: python demos/more_views.py CKPT OUT [--seeds 5] [--prompt "one red sphere"]

Writes ``OUT/views4.png`` and ``OUT/views8.png`` (one row per seed) and prints
per-view pixel mean/std so the two view counts can be compared.
"""

import argparse
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from mvsds import camera as cam
from mvsds import mvnet
from mvsds import sched as sch
from mvsds.vocab import NEG_LOWQ, STYLE_3D, default_vocab


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("ckpt")
    p.add_argument("out")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--prompt", default="one red sphere")
    args = p.parse_args()
    torch.set_num_threads(1)

    model, _, _ = mvnet.load_denoiser(args.ckpt)
    sched = sch.build_schedule()
    vocab = default_vocab()
    tokens = vocab.encode(args.prompt.split() + [STYLE_3D])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n_views in (4, 8):
        cams = np.stack([cam.normalize_extrinsic(p) for p in cam.canonical_rig(n_views).poses])
        rows = []
        for seed in range(args.seeds):
            imgs = mvnet.sample_views(model, tokens, cams, 50, 5.0, np.random.default_rng(seed), sched,
                                      neg_tokens=vocab.encode([NEG_LOWQ]))
            flat = imgs.reshape(n_views, -1)
            print(f"F={n_views} seed={seed} mean={[round(float(v), 3) for v in flat.mean(1)]} "
                  f"std={[round(float(v), 3) for v in flat.std(1)]}")
            rows.append(np.concatenate(list(imgs), axis=1))
        grid = np.round(np.concatenate(rows, axis=0) * 255).astype(np.uint8)
        Image.fromarray(grid).save(out / f"views{n_views}.png")


if __name__ == "__main__":
    main()
