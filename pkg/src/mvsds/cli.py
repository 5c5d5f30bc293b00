"""``mvsds`` command-line entry point.

Exit codes: 0 success, 1 invalid arguments or inputs, 2 runtime failure,
3 failed check (invariant suite or distillation coverage sanity).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import camera as cam
from . import radiance as rd
from . import scenegen as sg
from . import trainer as tr
from .config import ConfigError, RunConfig, describe_schema, parse_value
from .tensorio import atomic_write_text
from .vocab import NEG_LOWQ, STYLE_3D, default_vocab

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
COVERAGE_RANGE = (0.05, 0.9)

log = logging.getLogger("mvsds")


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def subsystem_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per subsystem, derived from the single root seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _int_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(2**31 - 1))


def parse_prompt(text: str) -> list[str]:
    words = text.replace(",", " ").split()
    vocab = default_vocab()
    unknown = [w for w in words if w not in vocab.tokens]
    if unknown:
        raise UsageError(f"unknown tokens {unknown}; vocabulary: {' '.join(vocab.tokens)}")
    if not words:
        raise UsageError("empty prompt")
    return words


def _prompt_arg(text: str) -> list[str]:
    try:
        return parse_prompt(text)
    except UsageError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _resolve(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = parse_value(v)
    for key, attr in getattr(args, "flag_keys", {}).items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = val
    return RunConfig.load(args.config, overrides)


def _prepare_out(path, force: bool = False) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_png(images: np.ndarray, path: Path) -> None:
    """Row of ``F x H x W x 3`` images in [0, 1] as one PNG."""
    row = np.concatenate(list(images), axis=1)
    png = Image.fromarray(np.round(np.clip(row, 0, 1) * 255).astype(np.uint8))
    png.save(path, optimize=False)


def _load_model(ckpt):
    from .mvnet import load_denoiser

    if not (Path(ckpt) / "manifest.json").is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {ckpt}")
    model, _, meta = load_denoiser(ckpt)
    return model.eval(), meta


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args, rc: RunConfig) -> int:
    n = rc["data.scenes"]
    if n <= 0:
        raise UsageError(f"--scenes must be positive, got {n}")
    if rc["data.resolution"] not in (32, 64):
        raise UsageError("data.resolution must be 32 or 64")
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"dataset directory {out} already exists (use --force to overwrite)")
    sg.build_dataset(subsystem_rng(rc["seed"], "data"), n, out, passes=rc["data.passes"],
                     res=rc["data.resolution"], force=args.force)
    ds = sg.Dataset(out)
    print(json.dumps({"dataset": str(out), "multiview_records": ds.n_records("multiview"),
                      "single_records": ds.n_records("single")}))
    return EXIT_OK


def cmd_train(args, rc: RunConfig) -> int:
    from .mvnet import init_denoiser

    if not (Path(args.data) / "manifest.json").is_file():
        raise FileNotFoundError(f"dataset not found at {args.data}")
    ds = sg.Dataset(args.data)
    sched = rc.schedule()
    tc = rc.train_config()
    if args.resume:
        trainer = tr.Trainer.resume(args.resume, sched, tc)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        model = trainer.model
        log.info("resuming at step %d", trainer.step + 1)
    else:
        out = _prepare_out(args.out, args.force)
        trainer = None
        model = init_denoiser(rc.denoiser_config(), _int_seed(subsystem_rng(rc["seed"], "init")))
    rc.echo(out)
    t = tr.train(model, ds, tc, sched, out, rc["train.checkpoint_every"], trainer,
                 rng=subsystem_rng(rc["seed"], "train"))
    print(json.dumps({"checkpoint": str(out / "checkpoints" / "final"), "step": t.step}))
    return EXIT_OK


def cmd_sample(args, rc: RunConfig) -> int:
    from .mvnet import sample_views

    words = parse_prompt(args.prompt)
    model, _ = _load_model(args.ckpt)
    n_views = rc["sample.n_views"]
    if n_views < 1:
        raise UsageError("number of views must be >= 1")
    rig = cam.canonical_rig(n_views)
    cams = np.stack([cam.normalize_extrinsic(p) for p in rig.poses])
    vocab = default_vocab()
    tokens = vocab.encode(words if STYLE_3D in words else words + [STYLE_3D])
    images = sample_views(model, tokens, cams, rc["sample.ddim_steps"], rc["sample.cfg_scale"],
                          subsystem_rng(rc["seed"], "sample"), rc.schedule(),
                          neg_tokens=vocab.encode([NEG_LOWQ]), rescale_phi=rc["sample.rescale_phi"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.echo(out)
    _save_png(images, out / "grid.png")
    sidecar = {"prompt": words, "views": [
        {"azimuth_deg": float(a), "elevation_deg": rig.elevation_deg, "fov_deg": rig.fov_deg,
         "distance": rig.distance, "camera16": [float(v) for v in c]}
        for a, c in zip(rig.azimuth_deg, cams)]}
    atomic_write_text(out / "cameras.json", json.dumps(sidecar, indent=2) + "\n")
    print(json.dumps({"grid": str(out / "grid.png"), "views": n_views}))
    return EXIT_OK


def _distill_into(out: Path, model, rc: RunConfig, export_occupancy: int | None) -> dict:
    from .distill import alpha_coverage, distill

    dc = rc.distill_config()
    field = rd.init_field(dc.field, _int_seed(subsystem_rng(rc["seed"], "field")))
    field, gallery = distill(field, model, dc, rc.schedule(), out, subsystem_rng(rc["seed"], "distill"))
    coverage = alpha_coverage(field)
    report = {"steps": dc.total_steps, "gallery_steps": sorted(gallery),
              "toggles": {"anneal": dc.use_anneal, "negative": dc.use_negative, "rescale": dc.use_rescale},
              "coverage": [float(c) for c in coverage],
              "coverage_ok": bool(np.all((coverage >= COVERAGE_RANGE[0]) & (coverage <= COVERAGE_RANGE[1])))}
    if export_occupancy:
        rd.export_occupancy(field, export_occupancy, out / "occupancy")
        report["occupancy"] = str(out / "occupancy")
    atomic_write_text(out / "report.json", json.dumps(report, indent=2) + "\n")
    return report


def cmd_distill(args, rc: RunConfig) -> int:
    parse_prompt(" ".join(rc["distill.pos_words"]))
    model, _ = _load_model(args.ckpt)
    out = _prepare_out(args.out, args.force)
    rc.echo(out)
    report = _distill_into(out, model, rc, args.export_occupancy)
    print(json.dumps(report))
    if not report["coverage_ok"]:
        raise CheckFailed(f"coverage {report['coverage']} outside {COVERAGE_RANGE}")
    return EXIT_OK


def cmd_dreambooth(args, rc: RunConfig) -> int:
    from .mvnet import save_denoiser

    model, _ = _load_model(args.ckpt)
    db = rc.dreambooth_config()
    ident = db.identity_path or args.data
    if not ident or not (Path(ident) / "manifest.json").is_file():
        raise FileNotFoundError(f"identity dataset not found at {ident!r}")
    images, tokens = tr.load_identity_images(sg.Dataset(ident), args.record, db.n_identity_views, rc["seed"])
    out = _prepare_out(args.out, args.force)
    rc.echo(out)
    with open(out / "metrics.jsonl", "w") as fh:
        tr.dreambooth_finetune(model, db, rc.schedule(), subsystem_rng(rc["seed"], "dreambooth"), images, tokens,
                               on_step=lambda r: fh.write(json.dumps(r, sort_keys=True) + "\n"))
    save_denoiser(model, out / "checkpoint", meta={"dreambooth": vars(db)})
    result = {"checkpoint": str(out / "checkpoint")}
    if args.distill:
        report = _distill_into(out / "distill", model, rc, args.export_occupancy)
        result["distill"] = report
        print(json.dumps(result))
        if not report["coverage_ok"]:
            raise CheckFailed(f"coverage {report['coverage']} outside {COVERAGE_RANGE}")
        return EXIT_OK
    print(json.dumps(result))
    return EXIT_OK


def cmd_eval(args, rc: RunConfig) -> int:
    model, _ = _load_model(args.ckpt)
    if not (Path(args.data) / "manifest.json").is_file():
        raise FileNotFoundError(f"dataset not found at {args.data}")
    metrics = tr.evaluate(model, sg.Dataset(args.data), rc.schedule(), rc["eval.batches"], seed=rc["seed"])
    text = json.dumps(metrics, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rc.echo(out)
        atomic_write_text(out / "eval.json", text + "\n")
    print(text)
    return EXIT_OK


def cmd_check(args, rc: RunConfig) -> int:
    from .checks import run_checks

    report = run_checks(inject_fault=args.inject_fault)
    text = json.dumps(report, indent=2)
    if args.out:
        atomic_write_text(Path(args.out), text + "\n")
    print(text)
    if not report["passed"]:
        raise CheckFailed(f"failed invariants: {', '.join(report['failed'])}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvsds", description="Toy multi-view diffusion and score distillation.",
                formatter_class=argparse.RawDescriptionHelpFormatter,
                epilog="config keys (set via --config FILE or --set key=value):\n" + describe_schema())
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, flag_keys=None):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="JSON file with dotted config keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int, help="root seed (config key 'seed')")
        sp.set_defaults(fn=fn, subparser=sp, flag_keys={"seed": "seed", **(flag_keys or {})})
        return sp

    sp = add("gen-data", cmd_gen_data, "generate the procedural multi-view dataset",
             {"data.scenes": "scenes", "data.passes": "passes", "data.resolution": "resolution"})
    sp.add_argument("--out", required=True)
    sp.add_argument("--scenes", type=int)
    sp.add_argument("--passes", type=int)
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--force", action="store_true")

    sp = add("train", cmd_train, "train the multi-view denoiser", {"train.total_steps": "steps"})
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--resume", help="checkpoint directory to continue from")
    sp.add_argument("--force", action="store_true")

    sp = add("sample", cmd_sample, "sample views on a canonical rig",
             {"sample.n_views": "views", "sample.cfg_scale": "cfg_scale", "sample.ddim_steps": "ddim_steps"})
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--views", type=int)
    sp.add_argument("--cfg-scale", type=float)
    sp.add_argument("--ddim-steps", type=int)

    distill_flags = {"distill.total_steps": "steps", "distill.cfg_scale": "cfg_scale", "distill.pos_words": "prompt",
                     "distill.use_anneal": "anneal", "distill.use_negative": "negative",
                     "distill.use_rescale": "rescale"}

    def add_distill_args(sp):
        sp.add_argument("--steps", type=int)
        sp.add_argument("--cfg-scale", type=float)
        sp.add_argument("--no-anneal", dest="anneal", action="store_const", const=False)
        sp.add_argument("--no-neg", dest="negative", action="store_const", const=False)
        sp.add_argument("--no-rescale", dest="rescale", action="store_const", const=False)
        sp.add_argument("--export-occupancy", type=int, metavar="G", help="also write a G^3 density grid")

    sp = add("distill", cmd_distill, "distill a radiance field from a trained denoiser", distill_flags)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--prompt", type=_prompt_arg)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    add_distill_args(sp)

    sp = add("dreambooth", cmd_dreambooth, "fine-tune on an identity set, optionally then distill",
             {**distill_flags, "dreambooth.steps": "db_steps", "dreambooth.lam": "lam"})
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", help="identity dataset (defaults to dreambooth.identity_path)")
    sp.add_argument("--record", help="record path inside the identity dataset (default: first)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--db-steps", type=int)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--prompt", type=_prompt_arg)
    sp.add_argument("--distill", action="store_true", help="chain distillation with the fine-tuned model")
    sp.add_argument("--force", action="store_true")
    add_distill_args(sp)

    sp = add("eval", cmd_eval, "held-out epsilon-MSE of a checkpoint", {"eval.batches": "batches"})
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--batches", type=int)
    sp.add_argument("--out")

    sp = add("check", cmd_check, "run the named invariant suite")
    sp.add_argument("--out", help="write the JSON report here as well")
    sp.add_argument("--inject-fault", choices=["alpha"], help="corrupt an input to demonstrate detection")
    return p


def _configure_threads() -> None:
    n = os.environ.get("MVSDS_THREADS")
    if n:
        try:
            k = max(int(n), 1)
        except ValueError:
            raise UsageError(f"MVSDS_THREADS must be an integer, got {n!r}") from None
        torch.set_num_threads(k)
        try:
            import numba

            numba.set_num_threads(min(k, numba.config.NUMBA_NUM_THREADS))
        except (ImportError, ValueError):
            pass


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        _configure_threads()
        rc = _resolve(args)
        return args.fn(args, rc)
    except (UsageError, ConfigError, FileNotFoundError, FileExistsError) as e:
        if isinstance(e, UsageError):
            args.subparser.print_usage(sys.stderr)
        print(f"mvsds {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except CheckFailed as e:
        print(f"mvsds {args.command}: check failed: {e}", file=sys.stderr)
        return EXIT_CHECK
    except Exception as e:  # anything else is a runtime failure
        log.exception("runtime failure")
        print(f"mvsds {args.command}: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
