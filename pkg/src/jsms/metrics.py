"""Confusion tallies, IoU and PPV, and the fixed-format metrics report."""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError
from .rasters import IGNORE_INDEX, ClassCatalog

STATIONARY, MOVING = 0, 1


class ConfusionMatrix:
    """``counts[gt, pred]`` over ``num_classes`` labels, int64."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), np.int64)

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DimensionError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        keep = gt != self.ignore_index
        p = pred[keep].astype(np.int64)
        g = gt[keep].astype(np.int64)
        k = self.num_classes
        if p.size and (p.max() >= k or g.max() >= k or p.min() < 0 or g.min() < 0):
            raise ValueError(f"label outside [0, {k})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    @property
    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fp - self.fn


def accumulate_confusion(pred, gt, cm: ConfusionMatrix) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else math.nan


def iou(cm: ConfusionMatrix, c: int) -> float:
    """TP / (TP + FP + FN); NaN when the class never occurs in either map."""
    tp, fp, fn = int(cm.tp[c]), int(cm.fp[c]), int(cm.fn[c])
    return _ratio(tp, tp + fp + fn)


def ppv(cm: ConfusionMatrix, c: int) -> float:
    """TP / (TP + FP); NaN when the class is never predicted."""
    tp, fp = int(cm.tp[c]), int(cm.fp[c])
    return _ratio(tp, tp + fp)


def mean_iou(cm: ConfusionMatrix, classes=None) -> float:
    classes = range(cm.num_classes) if classes is None else classes
    vals = [v for v in (iou(cm, c) for c in classes) if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else math.nan


def motion_binary_projection(labels, catalog: ClassCatalog) -> np.ndarray:
    """Moving classes -> 1, every other class -> 0; ignored pixels stay ignored."""
    labels = np.asarray(labels)
    lut = np.zeros(256, np.uint8)
    lut[catalog.moving_indices] = MOVING
    lut[IGNORE_INDEX] = IGNORE_INDEX
    return lut[labels.astype(np.uint8)]


def ppv_motion(cm: ConfusionMatrix) -> float:
    return ppv(cm, MOVING)


class Evaluation:
    """Joint-label and binary motion confusion accumulated together."""

    def __init__(self, catalog: ClassCatalog):
        self.catalog = catalog
        self.joint = ConfusionMatrix(len(catalog))
        self.motion = ConfusionMatrix(2)

    def add(self, pred, gt) -> "Evaluation":
        self.joint.accumulate(pred, gt)
        self.motion.accumulate(
            motion_binary_projection(pred, self.catalog), motion_binary_projection(gt, self.catalog)
        )
        return self

    def class_iou(self, name: str) -> float:
        return iou(self.joint, self.catalog.index(name))

    def stationary_mean_iou(self) -> float:
        return mean_iou(self.joint, [c.index for c in self.catalog.classes if not c.moving])

    def report(self) -> str:
        return format_report(self)


def _fmt(v: float) -> str:
    return "n/a" if math.isnan(v) else f"{v:.4f}"


def format_report(ev: Evaluation) -> str:
    lines = ["# joint labels", "class\tTP\tFP\tFN\tIoU"]
    cm = ev.joint
    for c in ev.catalog.classes:
        i = c.index
        lines.append(f"{c.name}\t{cm.tp[i]}\t{cm.fp[i]}\t{cm.fn[i]}\t{_fmt(iou(cm, i))}")
    lines += ["# motion", "class\tTP\tFP\tFN\tIoU"]
    mc = ev.motion
    for i, name in ((STATIONARY, "stationary"), (MOVING, "moving")):
        lines.append(f"{name}\t{mc.tp[i]}\t{mc.fp[i]}\t{mc.fn[i]}\t{_fmt(iou(mc, i))}")
    lines += [
        "# summary",
        f"mean IoU\t{_fmt(mean_iou(cm))}",
        f"stationary-classes mean IoU\t{_fmt(ev.stationary_mean_iou())}",
        f"motion IoU\t{_fmt(iou(mc, MOVING))}",
        f"motion PPV\t{_fmt(ppv_motion(mc))}",
    ]
    return "\n".join(lines) + "\n"
