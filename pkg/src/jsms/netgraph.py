"""Linear layer graphs: presets, pool-removal surgery, execution and checkpoints."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
    DimensionError,
)

LAYER_KINDS = ("conv", "pool", "relu", "softmax", "upsample", "amplify")
ROLE_TAGS = ("feature_conv", "context", "fully_connected", "head")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    out_channels: int = 0
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    dilation: int = 1
    pad: int = 0
    pad_mode: str = "zero"
    factor: int = 2  # pool window / upsample factor
    freeze: bool = False
    role_tag: str = "feature_conv"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"layer {self.name}: unknown kind {self.kind!r}")
        if self.role_tag not in ROLE_TAGS:
            raise ConfigurationError(f"layer {self.name}: unknown role_tag {self.role_tag!r}")
        if self.kind == "conv" and self.out_channels < 1:
            raise ConfigurationError(f"layer {self.name}: conv needs out_channels >= 1")

    @property
    def conv_params(self) -> T.ConvParams:
        return T.ConvParams(self.kernel_h, self.kernel_w, self.stride, self.dilation, self.pad, self.pad_mode)


def conv(name, out_channels, k=3, dilation=1, role="feature_conv", stride=1) -> LayerSpec:
    """3x3 (or k x k) conv with 'same' padding for its dilation."""
    return LayerSpec(
        name, "conv", out_channels, k, k, stride, dilation, pad=dilation * (k - 1) // 2, role_tag=role
    )


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ConfigurationError(f"duplicate layer names: {dup}")
        seen_fc = False
        for l in self.layers:
            if l.kind != "conv":
                continue
            if l.role_tag in ("fully_connected", "head"):
                seen_fc = True
            elif seen_fc:
                raise ConfigurationError(
                    f"layer {l.name}: {l.role_tag} conv placed after fully connected layers"
                )

    def __iter__(self) -> Iterator[LayerSpec]:
        return iter(self.layers)

    def layer(self, name) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def index(self, name) -> int:
        return [l.name for l in self.layers].index(name)

    @property
    def convs(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "conv"]

    @property
    def head(self) -> LayerSpec:
        heads = [l for l in self.layers if l.kind == "conv" and l.role_tag == "head"]
        if len(heads) != 1:
            raise ConfigurationError(f"expected exactly one head conv, found {len(heads)}")
        return heads[0]

    @property
    def num_classes(self) -> int:
        return self.head.out_channels

    @property
    def downsample_factor(self) -> int:
        f = 1
        for l in self.layers:
            if l.kind == "pool":
                f *= l.factor
            elif l.kind == "conv":
                f *= l.stride
        return f

    @property
    def has_amplify(self) -> bool:
        return any(l.kind == "amplify" for l in self.layers)

    @property
    def has_context(self) -> bool:
        return any(l.role_tag == "context" for l in self.convs)

    def channels_before(self) -> dict[str, int]:
        """Input channel count seen by each layer."""
        out, c = {}, self.in_channels
        for l in self.layers:
            out[l.name] = c
            if l.kind == "conv":
                c = l.out_channels
        return out

    def feature_channels(self) -> int:
        """Channel count of the last feature conv, i.e. the maps that get amplified."""
        feats = [l for l in self.convs if l.role_tag == "feature_conv"]
        if not feats:
            raise ConfigurationError("network has no feature_conv layers")
        return feats[-1].out_channels

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        cin = self.channels_before()
        shapes = {}
        for l in self.convs:
            shapes[f"{l.name}.weight"] = (l.out_channels, cin[l.name], l.kernel_h, l.kernel_w)
            shapes[f"{l.name}.bias"] = (l.out_channels,)
        return shapes

    def num_parameters(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def output_shape(self, input_shape) -> tuple[int, ...]:
        """Shape arithmetic only; nothing is executed."""
        n, c, h, w = input_shape
        if c != self.in_channels:
            raise DimensionError(f"axis C: network expects {self.in_channels} input channels, got {c}")
        for l in self.layers:
            if l.kind == "conv":
                h, w = l.conv_params.output_hw(h, w)
                c = l.out_channels
            elif l.kind == "pool":
                h, w = h // l.factor, w // l.factor
            elif l.kind == "upsample":
                h, w = h * l.factor, w * l.factor
        return (n, c, h, w)

    def feature_shape(self, input_shape) -> tuple[int, ...]:
        """Shape of the amplified feature maps for ``input_shape``."""
        last = [l for l in self.convs if l.role_tag == "feature_conv"][-1]
        cut = self.index(last.name) + 1
        # include the relu that follows the last feature conv, if any
        return NetworkSpec(self.layers[:cut], self.in_channels).output_shape(input_shape)

    def with_layers(self, layers) -> "NetworkSpec":
        return NetworkSpec(tuple(layers), self.in_channels)

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels, "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d) -> "NetworkSpec":
        return cls(tuple(LayerSpec(**l) for l in d["layers"]), d.get("in_channels", 3))


@dataclass
class NetworkState:
    spec: NetworkSpec
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigurationError(f"parameter names disagree with spec (missing {missing}, extra {extra})")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise DimensionError(f"{k}: shape {self.params[k].shape} != spec shape {shape}")

    def ordered(self) -> list[tuple[str, np.ndarray]]:
        return [(k, self.params[k]) for k in self.spec.param_shapes()]

    def copy(self) -> "NetworkState":
        return NetworkState(self.spec, {k: v.copy() for k, v in self.params.items()})

    def weight(self, layer) -> np.ndarray:
        return self.params[f"{layer}.weight"]

    def bias(self, layer) -> np.ndarray:
        return self.params[f"{layer}.bias"]

    def trainable_names(self) -> list[str]:
        frozen = {l.name for l in self.spec.convs if l.freeze}
        return [k for k, _ in self.ordered() if k.split(".")[0] not in frozen]

    def checksum(self, layers=None) -> str:
        h = hashlib.sha256()
        for k, v in self.ordered():
            if layers is None or k.split(".")[0] in layers:
                h.update(k.encode())
                h.update(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return h.hexdigest()


# -- presets and surgery ---------------------------------------------------

def _block(prefix, n, channels):
    layers = []
    for i in range(1, n + 1):
        layers += [conv(f"{prefix}_{i}", channels), LayerSpec(f"relu{prefix[4:]}_{i}", "relu")]
    return layers


def _pool(name):
    return LayerSpec(name, "pool", factor=2, role_tag="feature_conv")


def pooled_front_end(preset: str, num_classes: int) -> NetworkSpec:
    """The pooled baseline that :func:`build_front_end` performs surgery on."""
    if num_classes < 1:
        raise ConfigurationError(f"num_classes must be >= 1, got {num_classes}")
    if preset == "toy":
        layers = (
            _block("conv1", 2, 16) + [_pool("pool1")]
            + _block("conv2", 2, 32) + [_pool("pool2"), _pool("pool3")]
            + _block("conv3", 2, 64)
            + [
                conv("fc1", 128, k=3, role="fully_connected"), LayerSpec("relu_fc1", "relu"),
                conv("fc2", 128, k=1, role="fully_connected"), LayerSpec("relu_fc2", "relu"),
                conv("head", num_classes, k=1, role="head"),
            ]
        )
    elif preset == "paper_scale":
        layers = (
            _block("conv1", 2, 64) + [_pool("pool1")]
            + _block("conv2", 2, 128) + [_pool("pool2")]
            + _block("conv3", 3, 256) + [_pool("pool3")]
            + _block("conv4", 3, 512) + [_pool("pool4")]
            + _block("conv5", 3, 512) + [_pool("pool5")]
            + [
                conv("fc6", 4096, k=7, role="fully_connected"), LayerSpec("relu_fc6", "relu"),
                conv("fc7", 4096, k=1, role="fully_connected"), LayerSpec("relu_fc7", "relu"),
                conv("head", num_classes, k=1, role="head"),
            ]
        )
    else:
        raise ConfigurationError(f"unknown preset {preset!r} (expected 'toy' or 'paper_scale')")
    return NetworkSpec(tuple(layers))


# pools removed from each pooled preset to obtain the dilated front end
_SURGERY = {"toy": 1, "paper_scale": 2}


def apply_pool_removal_surgery(pooled: NetworkSpec, n_pools_to_remove: int = 2) -> NetworkSpec:
    """Drop the last ``n`` pools; every later conv has dilation and padding doubled per removed pool."""
    pools = [i for i, l in enumerate(pooled.layers) if l.kind == "pool"]
    if n_pools_to_remove < 0 or n_pools_to_remove > len(pools):
        raise ConfigurationError(
            f"cannot remove {n_pools_to_remove} pools from a network with {len(pools)}"
        )
    removed = set(pools[len(pools) - n_pools_to_remove:])
    out, mult = [], 1
    for i, l in enumerate(pooled.layers):
        if i in removed:
            mult *= 2
            continue
        if l.kind == "conv" and mult > 1:
            l = replace(l, dilation=l.dilation * mult, pad=l.pad * mult)
        out.append(l)
    return pooled.with_layers(out)


def build_front_end(preset: str, num_classes: int) -> NetworkSpec:
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2 for the joint label space, got {num_classes}")
    if preset not in _SURGERY:
        raise ConfigurationError(f"unknown preset {preset!r} (expected 'toy' or 'paper_scale')")
    return apply_pool_removal_surgery(pooled_front_end(preset, num_classes), _SURGERY[preset])


def with_amplify(spec: NetworkSpec) -> NetworkSpec:
    """Insert the flow-amplification stage right after the last feature conv's activation."""
    if spec.has_amplify:
        return spec
    layers = list(spec.layers)
    last = max(i for i, l in enumerate(layers) if l.kind == "conv" and l.role_tag == "feature_conv")
    at = last + 1
    while at < len(layers) and layers[at].kind == "relu":
        at += 1
    layers.insert(at, LayerSpec("amplify", "amplify", role_tag="feature_conv"))
    return spec.with_layers(layers)


# -- execution -------------------------------------------------------------

def _first_trainable(spec: NetworkSpec) -> int:
    for i, l in enumerate(spec.layers):
        if l.kind == "conv" and not l.freeze:
            return i
    return len(spec.layers)


def forward(state: NetworkState, x, amp=None, tape: T.GradTape | None = None, upto: str | None = None):
    """Run the layer chain on ``x`` and return the final activation (head logits).

    ``amp`` is the amplifier map for the ``amplify`` stage, shaped ``[h, w]``
    or ``[N, 1, h, w]`` on the feature grid; ``None`` skips amplification.
    Layers before the first trainable conv are never recorded on ``tape``.
    """
    spec = state.spec
    if x.ndim != 4:
        raise DimensionError(f"input must be [N, C, H, W], got shape {x.shape}")
    f = spec.downsample_factor
    if x.shape[2] % f or x.shape[3] % f:
        raise DimensionError(
            f"input spatial dims {x.shape[2:]} are not divisible by the downsample factor {f}; "
            f"pad the input to a multiple of {f}"
        )
    start = _first_trainable(spec)
    h = x
    for i, l in enumerate(spec.layers):
        tp = tape if i >= start else None
        if l.kind == "conv":
            h = T.dilated_conv2d(h, state.weight(l.name), state.bias(l.name), l.conv_params, tp)
        elif l.kind == "relu":
            h = T.relu(h, tp)
        elif l.kind == "pool":
            h = T.max_pool2d(h, l.factor, tp)
        elif l.kind == "softmax":
            h = T.softmax_channels(h, tp)
        elif l.kind == "upsample":
            h = T.bilinear_upsample(h, l.factor, tp)
        elif l.kind == "amplify" and amp is not None:
            amp = np.asarray(amp, dtype=h.dtype)
            if amp.shape[-2:] != h.shape[-2:]:
                raise DimensionError(f"amplifier map {amp.shape[-2:]} != feature grid {h.shape[-2:]}")
            h = T.mul(h, amp, tp)
        if upto is not None and l.name == upto:
            break
    return h


def predict_labels(state: NetworkState, x, amp=None) -> np.ndarray:
    """Per-pixel joint labels ``[N, H, W]``: softmax, upsample to input size, argmax (lowest index on ties)."""
    logits = forward(state, x, amp)
    probs = T.softmax_channels(logits)
    f = x.shape[2] // logits.shape[2]
    probs = T.bilinear_upsample(probs, f)
    return np.argmax(probs, axis=1).astype(np.uint8)


# -- checkpoints -----------------------------------------------------------

MAGIC = b"JSMS"
VERSION = 1


def save_checkpoint(state: NetworkState, path, write_spec: bool = True):
    """Write parameters in the JSMS binary format, plus ``<path>.json`` holding the layer spec."""
    path = os.fspath(path)
    items = state.ordered()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    if write_spec:
        with open(path + ".json", "w") as fh:
            json.dump(state.spec.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def read_checkpoint_tensors(path) -> dict[str, np.ndarray]:
    """Parse a JSMS file into an ordered name -> float32 array mapping."""
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointTruncatedError(f"file ends while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointMagicError(f"bad magic, expected {MAGIC!r}", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}", 4)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * size, f"payload of {name}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last tensor", pos)
    return out


def load_spec(path) -> NetworkSpec:
    side = os.fspath(path) + ".json"
    if not os.path.exists(side):
        raise CheckpointError(f"no layer spec found next to checkpoint (expected {side})")
    with open(side) as fh:
        return NetworkSpec.from_dict(json.load(fh))


def load_checkpoint(path, spec: NetworkSpec | None = None) -> NetworkState:
    """Load parameters and validate them against ``spec`` (default: the sidecar spec)."""
    tensors = read_checkpoint_tensors(path)
    if spec is None:
        spec = load_spec(path)
    expected = spec.param_shapes()
    if list(tensors) != list(expected):
        missing = [k for k in expected if k not in tensors]
        extra = [k for k in tensors if k not in expected]
        raise CheckpointShapeError(f"tensor names disagree with spec (missing {missing}, extra {extra})")
    for k, shape in expected.items():
        if tensors[k].shape != shape:
            raise CheckpointShapeError(f"{k}: checkpoint shape {tensors[k].shape} != spec shape {shape}")
    return NetworkState(spec, tensors)
