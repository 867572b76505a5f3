"""Initialisers: Glorot-uniform, head extension from C to C+M classes, identity context filters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InitError, TransferError
from .netgraph import NetworkSpec, NetworkState


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_init(shape, fan_in: int, fan_out: int, seed) -> np.ndarray:
    """I.i.d. uniform on ``[-a, a]`` with ``a = sqrt(6 / (fan_in + fan_out))``, float32."""
    if fan_in < 1 or fan_out < 1:
        raise InitError(f"fans must be positive, got fan_in={fan_in}, fan_out={fan_out}")
    a = xavier_bound(fan_in, fan_out)
    a32 = np.float32(a)
    if a32 > a:
        a32 = np.nextafter(a32, np.float32(0))
    w = _rng(seed).uniform(-a, a, size=shape).astype(np.float32)
    return np.clip(w, -a32, a32)


def conv_fans(weight_shape) -> tuple[int, int]:
    cout, cin, kh, kw = weight_shape
    return cin * kh * kw, cout * kh * kw


def init_state(spec: NetworkSpec, seed) -> NetworkState:
    """Xavier weights and zero biases for every conv, one independent stream per layer."""
    params = {}
    shapes = spec.param_shapes()
    for i, l in enumerate(spec.convs):
        ws = shapes[f"{l.name}.weight"]
        params[f"{l.name}.weight"] = xavier_init(ws, *conv_fans(ws), seed=np.random.SeedSequence([seed, i]))
        params[f"{l.name}.bias"] = np.zeros(ws[0], np.float32)
    return NetworkState(spec, params)


@dataclass(frozen=True)
class TransferPlan:
    source: NetworkState
    target: NetworkSpec
    num_semantic: int
    num_motion: int

    def validate(self):
        src, dst = self.source.spec, self.target
        src_head, dst_head = src.head.name, dst.head.name
        if src.num_classes != self.num_semantic:
            raise TransferError(f"source head has {src.num_classes} outputs, expected C={self.num_semantic}")
        if dst.num_classes != self.num_semantic + self.num_motion:
            raise TransferError(
                f"target head has {dst.num_classes} outputs, expected C+M={self.num_semantic + self.num_motion}"
            )
        s_shapes, d_shapes = src.param_shapes(), dst.param_shapes()
        for k, shape in d_shapes.items():
            layer = k.split(".")[0]
            if layer == dst_head:
                continue
            if s_shapes.get(k) != shape:
                raise TransferError(f"layer {layer}: source shape {s_shapes.get(k)} != target shape {shape}")
        for k in s_shapes:
            if k.split(".")[0] != src_head and k not in d_shapes:
                raise TransferError(f"layer {k.split('.')[0]} missing from target network")
        sw, dw = s_shapes[f"{src_head}.weight"], d_shapes[f"{dst_head}.weight"]
        if sw[1:] != dw[1:]:
            raise TransferError(f"layer {dst_head}: head input/kernel shape {sw[1:]} != {dw[1:]}")


def transfer_extend_head(plan: TransferPlan, seed) -> NetworkState:
    """Copy a C-class network into a (C+M)-class one.

    Every non-head tensor and the first C head channels are copied bit for
    bit; the M new head channels get Xavier weights and zero bias.
    """
    plan.validate()
    src = plan.source
    c = plan.num_semantic
    params = {}
    src_head, dst_head = src.spec.head.name, plan.target.head.name
    for k, shape in plan.target.param_shapes().items():
        layer, kind = k.split(".")
        if layer != dst_head:
            params[k] = src.params[k].copy()
            continue
        old = src.params[f"{src_head}.{kind}"]
        new = np.zeros(shape, np.float32)
        new[:c] = old
        if kind == "weight" and plan.num_motion:
            new[c:] = xavier_init((plan.num_motion,) + shape[1:], *conv_fans(shape), seed=seed)
        params[k] = new
    return NetworkState(plan.target, params)


def identity_init_context(spec: NetworkSpec) -> NetworkState:
    """Filters that relay their input: weight[j, i, centre] = 1 iff i == j, zero bias.

    A head layer, if the spec has one, is left all zero.
    """
    shapes = spec.param_shapes()
    params = {}
    for l in spec.convs:
        ws = shapes[f"{l.name}.weight"]
        w = np.zeros(ws, np.float32)
        if l.role_tag != "head":
            cout, cin, kh, kw = ws
            if cout != cin:
                raise InitError(f"layer {l.name}: identity init needs equal in/out channels, got {cin} -> {cout}")
            if kh % 2 == 0 or kw % 2 == 0:
                raise InitError(f"layer {l.name}: identity init needs an odd kernel, got {kh}x{kw}")
            w[np.arange(cout), np.arange(cin), kh // 2, kw // 2] = 1.0
        params[f"{l.name}.weight"] = w
        params[f"{l.name}.bias"] = np.zeros(ws[0], np.float32)
    return NetworkState(spec, params)
