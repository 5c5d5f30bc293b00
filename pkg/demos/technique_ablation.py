"""Distill one prompt with each technique switched off in turn and tile the results.

Usage: python demos/technique_ablation.py CKPT OUT [--steps N] [--prompt "one red sphere"]

Rows of ``OUT/ablation.png`` are: all on, no annealing, no negative prompt, no
rescale; columns are the canonical views of the final field.
"""

import argparse
import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from mvsds import distill as ds
from mvsds import mvnet
from mvsds import radiance as rd
from mvsds import sched as sch

VARIANTS = {"all_on": {}, "no_anneal": {"use_anneal": False}, "no_negative": {"use_negative": False},
            "no_rescale": {"use_rescale": False}}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("ckpt")
    p.add_argument("out")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--prompt", default="one red sphere")
    args = p.parse_args()
    torch.set_num_threads(1)

    model, _, _ = mvnet.load_denoiser(args.ckpt)
    sched = sch.build_schedule()
    out = Path(args.out)
    rows, summary = [], {}
    for name, switches in VARIANTS.items():
        config = ds.DistillConfig(total_steps=args.steps, pos_words=tuple(args.prompt.split()), **switches)
        field_, gallery = ds.distill(rd.init_field(config.field, 0), model, config, sched, out / name,
                                     np.random.default_rng(0))
        rows.append(np.concatenate(list(gallery[args.steps]), axis=1))
        summary[name] = [round(float(c), 3) for c in ds.alpha_coverage(field_)]
        print(name, "coverage", summary[name], flush=True)
    grid = np.round(np.clip(np.concatenate(rows, axis=0), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(grid).save(out / "ablation.png")
    (out / "coverage.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
