"""Optical-flow magnitude amplifier maps and Middlebury ``.flo`` I/O.

A flow field is a float32 array of shape ``[H, W, 2]`` holding ``(u, v)``
displacements from frame t to t+1. The amplifier map is its per-image
min-max normalised magnitude in ``[1, 2]``, quantised to 256 grey levels,
then area-averaged down to the feature grid.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import replace

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError
from .netgraph import NetworkSpec

log = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
LEVELS = 256


def flow_magnitude(flow) -> np.ndarray:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[-1] != 2:
        raise DimensionError(f"flow must be [H, W, 2], got shape {flow.shape}")
    f = flow.astype(np.float64)
    return np.sqrt(f[..., 0] ** 2 + f[..., 1] ** 2).astype(np.float32)


def quantize_levels(mags) -> np.ndarray:
    """Grey levels 0..255: min magnitude -> 0, max -> 255, nearest level with ties rounded down."""
    m = np.asarray(mags, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if not hi > lo:
        return np.zeros(m.shape, np.uint8)
    t = (m - lo) / (hi - lo) * (LEVELS - 1)
    return np.clip(np.ceil(t - 0.5), 0, LEVELS - 1).astype(np.uint8)


def dequantize(levels) -> np.ndarray:
    return (1.0 + np.asarray(levels, dtype=np.float64) / (LEVELS - 1)).astype(np.float32)


def normalize_quantize(mags) -> np.ndarray:
    """Image-scale amplifier map with values ``1 + k/255``; a constant field maps to all ones."""
    return dequantize(quantize_levels(mags))


def _area_matrix(n_in, n_out):
    # row j averages source cells overlapping [j*n_in/n_out, (j+1)*n_in/n_out)
    m = np.zeros((n_out, n_in))
    step = n_in / n_out
    for j in range(n_out):
        a, b = j * step, (j + 1) * step
        for i in range(int(np.floor(a)), min(int(np.ceil(b)), n_in)):
            m[j, i] = min(b, i + 1) - max(a, i)
    return m / m.sum(axis=1, keepdims=True)


def resize_to_feature_grid(amp, target_h: int, target_w: int) -> np.ndarray:
    """Area-average downsampling to ``target_h x target_w``; upsizing falls back to bilinear."""
    if target_h < 1 or target_w < 1:
        raise DimensionError(f"target size must be positive, got {target_h}x{target_w}")
    amp = np.asarray(amp)
    h, w = amp.shape
    if target_h > h or target_w > w:
        log.warning("amplifier map upsized from %dx%d to %dx%d; bilinear used", h, w, target_h, target_w)
        out = T.bilinear_resize(amp.astype(np.float64), target_h, target_w)
    else:
        out = _area_matrix(h, target_h) @ amp.astype(np.float64) @ _area_matrix(w, target_w).T
    lo, hi = float(amp.min()), float(amp.max())
    return np.clip(out, lo, hi).astype(np.float32)


def amplifier_map(flow, target_h: int, target_w: int) -> np.ndarray:
    """Flow field -> magnitude -> [1, 2] grey levels -> feature-grid map."""
    return resize_to_feature_grid(normalize_quantize(flow_magnitude(flow)), target_h, target_w)


def amplify(features, amp, tape: T.GradTape | None = None):
    """Scale every channel of ``features`` by the spatial map ``amp``."""
    amp = np.asarray(amp, dtype=features.dtype)
    if amp.shape[-2:] != features.shape[-2:]:
        raise DimensionError(f"amplifier map {amp.shape[-2:]} != feature grid {features.shape[-2:]}")
    return T.mul(features, amp, tape)


def freeze_feature_convs(spec: NetworkSpec) -> NetworkSpec:
    """Mark every feature conv frozen; fully connected, context and head layers stay trainable."""
    return spec.with_layers(
        replace(l, freeze=True) if l.kind == "conv" and l.role_tag == "feature_conv" else l
        for l in spec.layers
    )


def write_flo(path, flow):
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[-1] != 2:
        raise DimensionError(f"flow must be [H, W, 2], got shape {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(np.ascontiguousarray(flow).tobytes())


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12:
        raise FormatError(f"{os.fspath(path)}: .flo header truncated", len(buf))
    magic, w, h = struct.unpack("<fii", buf[:12])
    if magic != FLO_MAGIC:
        raise FormatError(f"{os.fspath(path)}: bad .flo magic {magic!r}, expected {FLO_MAGIC}", 0)
    if w < 1 or h < 1:
        raise FormatError(f"{os.fspath(path)}: invalid .flo size {w}x{h}", 4)
    need = 12 + 8 * w * h
    if len(buf) != need:
        raise FormatError(f"{os.fspath(path)}: expected {need} bytes for {w}x{h} flow, got {len(buf)}", min(len(buf), need))
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)
