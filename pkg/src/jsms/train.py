"""Softmax cross-entropy, SGD with momentum, augmentation and the staged training schedule.

Stages, in order:

``semantic``       optional pre-training on labels with motion folded away (C classes)
``baseline``       joint C+M labels, RGB only; a C-class init is widened first
``joint``          feature convs frozen, fully connected layers see flow-amplified features
``joint_context``  identity context module inserted, everything trained end to end
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import netgraph as ng
from . import tensor as T
from .context import insert_context
from .errors import ConfigurationError, DimensionError, LossError, OrchestrationError
from .flow import flow_magnitude, freeze_feature_convs, normalize_quantize, resize_to_feature_grid
from .metrics import Evaluation
from .rasters import IGNORE_INDEX, ClassCatalog
from .weights import TransferPlan, init_state, transfer_extend_head

log = logging.getLogger(__name__)

STAGES = ("semantic", "baseline", "joint", "joint_context")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "baseline"
    learning_rate: float = 1e-4
    momentum: float = 0.9
    iterations: int = 10_000
    batch_size: int = 1
    crop_size: int = 900
    pad: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.iterations < 0 or self.batch_size < 1 or self.crop_size < 1 or self.pad < 0:
            raise ConfigurationError(f"invalid iteration/batch/crop/pad settings: {self}")


# Settings used on KITTI at full scale; kept for reference, far too slow here.
PAPER_STAGES = {
    "baseline": TrainConfig("baseline", 1e-4, 0.9, 10_000, 1, 900),
    "joint": TrainConfig("joint", 1e-4, 0.9, 10_000, 1, 900),
    "joint_context": TrainConfig("joint_context", 1e-5, 0.99, 20_000, 1, 900),
}

# Desk-scale schedule for 64x64 synthetic scenes; 2,000 iterations in total.
TOY_STAGES = {
    "semantic": TrainConfig("semantic", 1e-2, 0.9, 400, 4, 48),
    "baseline": TrainConfig("baseline", 1e-2, 0.9, 400, 4, 48),
    "joint": TrainConfig("joint", 1e-2, 0.9, 400, 4, 48),
    # last stage: lr down tenfold, heavier momentum
    "joint_context": TrainConfig("joint_context", 1e-3, 0.99, 800, 4, 48),
}


# -- loss and optimiser ----------------------------------------------------

def softmax_xent_loss(logits, labels, ignore_index: int = IGNORE_INDEX):
    """Mean of ``-log softmax(logits)[label]`` over non-ignored pixels, and its gradient."""
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise DimensionError(f"labels shape {labels.shape} != logits grid {(n, h, w)}")
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise LossError("every pixel in the batch is ignored; loss is undefined")
    lab = np.where(valid, labels, 0).astype(np.int64)
    if lab.max() >= k or lab.min() < 0:
        raise DimensionError(f"label outside [0, {k})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, lab[:, None], axis=1)[:, 0]
    loss = float(((lse - picked) * valid).sum() / count)
    grad = np.exp(z - lse[:, None])
    np.put_along_axis(grad, lab[:, None], np.take_along_axis(grad, lab[:, None], axis=1) - 1.0, axis=1)
    grad *= valid[:, None] / count
    return loss, grad.astype(logits.dtype)


def sgd_momentum_step(state: ng.NetworkState, grads: dict, lr: float, momentum: float, velocity: dict):
    """``v <- m*v - lr*g; w <- w + v`` for every trainable parameter, in place.

    Frozen layers and their velocities are left alone.
    """
    for name in state.trainable_names():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != state.params[name].shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {state.params[name].shape}")
        v = velocity.get(name)
        v = -lr * g if v is None else momentum * v - lr * g
        velocity[name] = v.astype(np.float32)
        state.params[name] = (state.params[name] + velocity[name]).astype(np.float32)
    return state


# -- data staging ----------------------------------------------------------

def image_to_input(image) -> np.ndarray:
    """uint8 ``[H, W, 3]`` -> float32 ``[3, H, W]`` in [-1, 1]."""
    return (np.asarray(image, np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def image_amplifier(flow) -> np.ndarray:
    """Image-scale amplifier map (before resizing to the feature grid)."""
    return normalize_quantize(flow_magnitude(flow))


def augment(sample: dict, crop_size: int, seed, pad: int = 0, flip: bool | None = None) -> dict:
    """Reflect-pad, random crop and coin-flip mirror, applied identically to every raster.

    ``sample`` maps names to arrays whose first two axes are ``H, W``
    (typically ``image``, ``labels`` and ``amp``).
    """
    rng = np.random.default_rng(seed)
    h, w = next(iter(sample.values())).shape[:2]
    for k, v in sample.items():
        if v.shape[:2] != (h, w):
            raise DimensionError(f"raster {k!r} is {v.shape[:2]}, expected {(h, w)}")
    if crop_size > h + 2 * pad or crop_size > w + 2 * pad:
        raise ConfigurationError(f"crop {crop_size} larger than padded extent {(h + 2 * pad, w + 2 * pad)}")
    y0 = int(rng.integers(0, h + 2 * pad - crop_size + 1))
    x0 = int(rng.integers(0, w + 2 * pad - crop_size + 1))
    do_flip = bool(rng.random() < 0.5) if flip is None else flip
    out = {}
    for k, v in sample.items():
        if pad:
            v = np.pad(v, ((pad, pad), (pad, pad)) + ((0, 0),) * (v.ndim - 2), mode="reflect")
        v = v[y0:y0 + crop_size, x0:x0 + crop_size]
        if do_flip:
            v = v[:, ::-1]
        out[k] = np.ascontiguousarray(v)
    return out


def downsample_labels(labels, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour label sampling at the positions the corner-aligned upsampler uses."""
    h, w = labels.shape[-2:]
    ys = np.floor(np.arange(out_h) * ((h - 1) / max(out_h - 1, 1)) + 0.5).astype(int)
    xs = np.floor(np.arange(out_w) * ((w - 1) / max(out_w - 1, 1)) + 0.5).astype(int)
    return labels[..., ys[:, None], xs[None, :]]


def stage_label_lut(stage: str, catalog: ClassCatalog) -> np.ndarray:
    if stage == "semantic":
        return catalog.semantic_lut()
    return np.arange(256, dtype=np.uint8)


def uses_amplify(spec: ng.NetworkSpec) -> bool:
    return spec.has_amplify


def make_batch(samples, indices, cfg: TrainConfig, spec: ng.NetworkSpec, lut, rng, amps=None):
    f = spec.downsample_factor
    g = cfg.crop_size // f
    xs, ys, ams = [], [], []
    for i in indices:
        s = samples[i]
        rasters = {"image": s.image_t, "labels": s.labels}
        if spec.has_amplify:
            rasters["amp"] = amps[i] if amps is not None else image_amplifier(s.flow)
        a = augment(rasters, cfg.crop_size, rng.integers(2**63), cfg.pad)
        xs.append(image_to_input(a["image"]))
        ys.append(downsample_labels(lut[a["labels"]], g, g))
        if spec.has_amplify:
            ams.append(resize_to_feature_grid(a["amp"], g, g)[None])
    amp = np.stack(ams) if ams else None
    return np.stack(xs), np.stack(ys), amp


# -- stage orchestration ---------------------------------------------------

def prepare_stage(stage: str, state: ng.NetworkState | None, catalog: ClassCatalog, seed: int = 0,
                  preset: str = "toy") -> ng.NetworkState:
    """Turn the previous stage's network into the starting point for ``stage``."""
    c, k = catalog.num_semantic, len(catalog)
    if stage == "semantic":
        if state is None:
            return init_state(ng.build_front_end(preset, c), seed)
        if state.spec.num_classes != c:
            raise OrchestrationError(f"semantic stage needs a {c}-class network, got {state.spec.num_classes}")
        return state.copy()
    if state is None:
        if stage == "baseline":
            return init_state(ng.build_front_end(preset, k), seed)
        raise OrchestrationError(f"stage {stage!r} needs an initial checkpoint from the previous stage")
    if stage in ("baseline", "joint") and state.spec.num_classes == c and c != k:
        if state.spec.has_amplify:
            raise OrchestrationError("cannot widen the head of a network that already has an amplify stage")
        target = state.spec.with_layers(
            replace(l, out_channels=k) if l.role_tag == "head" and l.kind == "conv" else l
            for l in state.spec.layers
        )
        state = transfer_extend_head(TransferPlan(state, target, c, k - c), seed)
    if state.spec.num_classes != k:
        raise OrchestrationError(f"stage {stage!r} needs a {k}-class head, got {state.spec.num_classes}")
    if stage == "baseline":
        if state.spec.has_amplify:
            raise OrchestrationError("baseline stage expects an RGB-only network, got one with an amplify stage")
        return state.copy()
    if stage == "joint":
        if state.spec.has_context:
            raise OrchestrationError("joint stage expects a network without a context module")
        spec = freeze_feature_convs(ng.with_amplify(state.spec))
        return ng.NetworkState(spec, {n: v.copy() for n, v in state.params.items()})
    # joint_context
    if state.spec.has_context:
        return state.copy()
    if not state.spec.has_amplify:
        raise OrchestrationError("joint_context stage needs a checkpoint from the joint stage (missing stage: joint)")
    state = insert_context(state)
    spec = state.spec.with_layers(replace(l, freeze=False) for l in state.spec.layers)
    return ng.NetworkState(spec, state.params)


def check_prerequisites(stage: str, state: ng.NetworkState, catalog: ClassCatalog):
    spec = state.spec
    if stage == "semantic" and spec.num_classes != catalog.num_semantic:
        raise OrchestrationError("semantic stage needs a semantics-only head")
    if stage != "semantic" and spec.num_classes != len(catalog):
        raise OrchestrationError(f"stage {stage!r} needs a {len(catalog)}-class head (missing head transfer)")
    if stage == "joint" and not (spec.has_amplify and all(l.freeze for l in spec.convs if l.role_tag == "feature_conv")):
        raise OrchestrationError("joint stage needs the amplify stage and frozen feature convs (run prepare_stage)")
    if stage == "joint_context" and not spec.has_context:
        raise OrchestrationError("joint_context stage needs an inserted context module (missing stage: joint)")


def run_stage(cfg: TrainConfig, state: ng.NetworkState, samples, catalog: ClassCatalog, callback=None):
    """Train ``state`` in place for ``cfg.iterations`` steps; returns ``(state, losses)``."""
    check_prerequisites(cfg.stage, state, catalog)
    if not samples:
        raise ConfigurationError("no training samples")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, STAGES.index(cfg.stage)]))
    lut = stage_label_lut(cfg.stage, catalog)
    amps = [image_amplifier(s.flow) for s in samples] if state.spec.has_amplify else None
    names = state.trainable_names()
    velocity: dict = {}
    losses = []
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(samples), cfg.batch_size)
        x, y, amp = make_batch(samples, idx, cfg, state.spec, lut, rng, amps)
        tape = T.GradTape()
        logits = ng.forward(state, x, amp, tape)
        loss, g = softmax_xent_loss(logits, y)
        tape.backward(logits, g)
        grads = {n: tape.grad(state.params[n]) for n in names}
        sgd_momentum_step(state, grads, cfg.learning_rate, cfg.momentum, velocity)
        losses.append(loss)
        if callback is not None:
            callback(it, loss)
    return state, losses


def format_loss_log(losses) -> str:
    return "".join(f"{i}\t{v:.6f}\n" for i, v in enumerate(losses))


# -- inference and evaluation ----------------------------------------------

def predict_sample(state: ng.NetworkState, image, flow=None, amplify: bool = True) -> np.ndarray:
    """Joint label map ``[H, W]`` for one image (and its flow, if the network amplifies)."""
    x = image_to_input(image)[None]
    amp = None
    if amplify and state.spec.has_amplify and flow is not None:
        _, _, fh, fw = state.spec.feature_shape(x.shape)
        amp = resize_to_feature_grid(image_amplifier(flow), fh, fw)
    return ng.predict_labels(state, x, amp)[0]


def evaluate(state: ng.NetworkState, samples, catalog: ClassCatalog, amplify: bool = True,
             batch_size: int = 20) -> Evaluation:
    ev = Evaluation(catalog)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x = np.stack([image_to_input(s.image_t) for s in chunk])
        amp = None
        if amplify and state.spec.has_amplify:
            _, _, fh, fw = state.spec.feature_shape(x.shape)
            amp = np.stack([resize_to_feature_grid(image_amplifier(s.flow), fh, fw)[None] for s in chunk])
        pred = ng.predict_labels(state, x, amp)
        for p, s in zip(pred, chunk):
            ev.add(p, s.labels)
    return ev
