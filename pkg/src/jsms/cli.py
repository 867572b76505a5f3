"""``jsms`` command line: gen, train, infer, eval.

Exit codes: 0 success, 2 usage error, 3 input/format error, 4 orchestration/state error.
Each command writes a JSON manifest of its flags next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from dataclasses import replace

import numpy as np

from . import netgraph as ng
from . import train as tr
from .errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    GenerationError,
    InitError,
    OrchestrationError,
    TransferError,
)
from .flow import read_flo
from .rasters import ClassCatalog, colorize, read_palette, read_png_rgb, write_label_map, write_palette, write_png_rgb
from .synth import SceneDistribution, generate_dataset, load_dataset, save_dataset

VERSION = "0.1.0"
EXIT_USAGE, EXIT_INPUT, EXIT_STATE = 2, 3, 4

log = logging.getLogger("jsms")


class UsageError(Exception):
    pass


def _manifest(args) -> dict:
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    return {
        "command": args.command,
        "flags": flags,
        "versions": {"jsms": VERSION, "numpy": np.__version__, "python": platform.python_version()},
    }


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 16 or w < 16:
        raise argparse.ArgumentTypeError(f"size must be at least 16x16, got {text}")
    return h, w


# -- commands --------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise UsageError(f"{args.out} exists and is not empty (use --force to overwrite)")
    h, w = args.size
    dist = SceneDistribution(height=h, width=w, num_classes=args.classes)
    samples = generate_dataset(args.samples, seed=args.seed, dist=dist, val_fraction=args.val_fraction)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(args.out, samples, ClassCatalog.toy(args.classes), manifest=_manifest(args))
    n_val = sum(s.split == "val" for s in samples)
    print(f"wrote {len(samples)} samples ({len(samples) - n_val} train / {n_val} val) to {args.out}")
    return 0


def cmd_train(args) -> int:
    stage = args.stage.replace("-", "_")
    if stage in ("joint", "joint_context") and not args.init:
        raise UsageError(f"--stage {args.stage} requires --init (checkpoint from the previous stage)")
    samples, catalog = load_dataset(args.data, "train")
    if not samples:
        raise UsageError(f"no training samples in {args.data}")
    init = ng.load_checkpoint(args.init) if args.init else None
    base = tr.TOY_STAGES[stage]
    cfg = replace(
        base,
        learning_rate=base.learning_rate if args.lr is None else args.lr,
        momentum=base.momentum if args.momentum is None else args.momentum,
        iterations=base.iterations if args.iters is None else args.iters,
        batch_size=base.batch_size if args.batch is None else args.batch,
        crop_size=base.crop_size if args.crop is None else args.crop,
        seed=args.seed,
    )
    state = tr.prepare_stage(stage, init, catalog, seed=args.seed, preset=args.preset)
    every = max(1, cfg.iterations // 10)

    def report(i, loss):
        if (i + 1) % every == 0:
            log.info("iter %d/%d loss %.4f", i + 1, cfg.iterations, loss)

    state, losses = tr.run_stage(cfg, state, samples, catalog, callback=report)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    ng.save_checkpoint(state, args.out)
    write_palette(args.out + ".palette.json", catalog)
    with open(args.out + ".loss.tsv", "w") as fh:
        fh.write(tr.format_loss_log(losses))
    m = _manifest(args)
    m["train_config"] = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    _write_json(args.out + ".manifest.json", m)
    tail = f", final loss {losses[-1]:.4f}" if losses else ""
    print(f"stage {stage}: {cfg.iterations} iterations{tail}; checkpoint {args.out}")
    return 0


def _catalog_for(ckpt: str, state: ng.NetworkState, palette: str | None) -> ClassCatalog:
    path = palette or ckpt + ".palette.json"
    if os.path.exists(path):
        cat = read_palette(path)
    else:
        cat = ClassCatalog.toy(7 if state.spec.num_classes >= 7 else 6)
    if state.spec.num_classes > len(cat):
        raise FormatError(f"palette has {len(cat)} classes, checkpoint predicts {state.spec.num_classes}")
    return cat


def cmd_infer(args) -> int:
    state = ng.load_checkpoint(args.ckpt)
    image = read_png_rgb(args.image_t)
    image_t1 = read_png_rgb(args.image_t1)
    flow = read_flo(args.flow)
    if image_t1.shape != image.shape or flow.shape[:2] != image.shape[:2]:
        raise DimensionError(
            f"input sizes disagree: image_t {image.shape[:2]}, image_t1 {image_t1.shape[:2]}, flow {flow.shape[:2]}"
        )
    catalog = _catalog_for(args.ckpt, state, args.palette)
    labels = tr.predict_sample(state, image, flow, amplify=args.amplify == "on")
    stem, _ = os.path.splitext(args.out)
    write_png_rgb(args.out, colorize(labels, catalog))
    write_label_map(stem + "_index.png", labels)
    _write_json(stem + ".manifest.json", _manifest(args))
    counts = np.bincount(labels.ravel(), minlength=len(catalog))
    summary = ", ".join(f"{n}={c}" for n, c in zip(catalog.names, counts) if c)
    print(f"wrote {args.out} and {stem}_index.png ({summary})")
    return 0


def cmd_eval(args) -> int:
    state = ng.load_checkpoint(args.ckpt)
    samples, catalog = load_dataset(args.data, args.split)
    if not samples:
        raise UsageError(f"split {args.split!r} of {args.data} is empty")
    if state.spec.num_classes != len(catalog):
        raise OrchestrationError(
            f"checkpoint predicts {state.spec.num_classes} classes, dataset has {len(catalog)}"
        )
    ev = tr.evaluate(state, samples, catalog, amplify=args.amplify == "on")
    text = ev.report()
    with open(args.report, "w") as fh:
        fh.write(text)
    _write_json(os.path.splitext(args.report)[0] + ".manifest.json", _manifest(args))
    sys.stdout.write(text)
    return 0


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jsms", description="Joint semantic and motion segmentation toolkit.")
    p.add_argument("--version", action="version", version=f"jsms {VERSION}")
    p.add_argument("-q", "--quiet", action="store_true", help="only print errors")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic moving-scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, choices=(6, 7), default=6)
    g.add_argument("--size", type=_parse_size, default=(64, 64), metavar="HxW")
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=("semantic", "baseline", "joint", "joint-context"))
    t.add_argument("--data", required=True)
    t.add_argument("--init", help="checkpoint from the previous stage")
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--crop", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--preset", choices=("toy", "paper_scale"), default="toy")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="label one frame pair")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image-t", required=True)
    i.add_argument("--image-t1", required=True)
    i.add_argument("--flow", required=True)
    i.add_argument("--out", required=True, help="color label PNG; the index map goes to <stem>_index.png")
    i.add_argument("--amplify", choices=("on", "off"), default="on")
    i.add_argument("--palette", help="palette.json (default: the one saved next to the checkpoint)")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="write an IoU / PPV report for a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--report", required=True)
    e.add_argument("--amplify", choices=("on", "off"), default="on")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"jsms {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DimensionError, OSError) as exc:
        print(f"jsms {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (OrchestrationError, TransferError, InitError, GenerationError) as exc:
        print(f"jsms {args.command}: state error: {exc}", file=sys.stderr)
        return EXIT_STATE


if __name__ == "__main__":
    sys.exit(main())
