"""
Three-stage training on the toy dataset
=======================================

Trains the RGB baseline, then adds flow amplification with the feature
convs frozen, then inserts the context module and fine-tunes everything.
Pass --quick for a short smoke run; the default takes a couple of minutes.
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from jsms import train as tr
from jsms.rasters import ClassCatalog, colorize, write_png_rgb
from jsms.synth import generate_dataset

quick = "--quick" in sys.argv
out = Path("demo_out")
out.mkdir(exist_ok=True)

cat = ClassCatalog.toy(6)
ds = generate_dataset(40 if quick else 200, seed=0)
train = [s for s in ds if s.split == "train"]
val = [s for s in ds if s.split == "val"]
print(len(train), "train /", len(val), "val scenes")

state = None
for stage in ("semantic", "baseline", "joint", "joint_context"):
    cfg = tr.TOY_STAGES[stage]
    if quick:
        cfg = replace(cfg, iterations=cfg.iterations // 20)
    state = tr.prepare_stage(stage, state, cat, seed=0)
    state, losses = tr.run_stage(cfg, state, train, cat)
    line = f"{stage:14s} {cfg.iterations:4d} iters  loss {np.mean(losses[:10]):.3f} -> {np.mean(losses[-10:]):.3f}"
    if stage != "semantic":
        ev = tr.evaluate(state, val, cat)
        line += f"  moving-box IoU {ev.class_iou('moving-box'):.3f}  stationary mIoU {ev.stationary_mean_iou():.3f}"
    print(line)

# side by side: frame, ground truth, prediction
s = val[0]
pred = tr.predict_sample(state, s.image_t, s.flow)
panel = np.concatenate([s.image_t, colorize(s.labels, cat), colorize(pred, cat)], axis=1)
write_png_rgb(out / "prediction.png", panel)
print("wrote", out / "prediction.png")
print(tr.evaluate(state, val, cat).report())
