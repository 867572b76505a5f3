"""Dense tensor kernels with a reverse-mode gradient tape.

Tensors are plain ``numpy.ndarray`` objects laid out as ``[N, C, H, W]``.
Parameters and activations are float32; every reduction (the convolution
matmuls, softmax normalisers) accumulates in float64 and rounds once at the
end. Passing float64 inputs keeps the whole computation in float64, which is
what the finite-difference checks rely on.

Each op takes an optional :class:`GradTape`. When one is given the op
records a closure that maps the upstream gradient to gradients for its
inputs; :meth:`GradTape.backward` replays those closures in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, PaddingError, TapeError

__all__ = [
    "ConvParams",
    "GradTape",
    "dilated_conv2d",
    "dilated_conv2d_backward",
    "max_pool2d",
    "relu",
    "softmax_channels",
    "bilinear_upsample",
    "bilinear_resize",
    "add",
    "mul",
    "scale",
]


@dataclass(frozen=True)
class ConvParams:
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    dilation: int = 1
    pad: int = 0
    pad_mode: str = "zero"

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride, self.dilation) < 1:
            raise ValueError(f"kernel, stride and dilation must be positive: {self}")
        if self.pad < 0:
            raise ValueError(f"pad must be non-negative, got {self.pad}")
        if self.pad_mode not in ("zero", "reflect"):
            raise ValueError(f"pad_mode must be 'zero' or 'reflect', got {self.pad_mode!r}")

    @property
    def span_h(self) -> int:
        """Extent of the dilated kernel along y."""
        return (self.kernel_h - 1) * self.dilation + 1

    @property
    def span_w(self) -> int:
        return (self.kernel_w - 1) * self.dilation + 1

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        hp, wp = h + 2 * self.pad, w + 2 * self.pad
        if hp < self.span_h:
            raise DimensionError(
                f"axis H: padded extent {hp} smaller than dilated kernel extent {self.span_h}"
            )
        if wp < self.span_w:
            raise DimensionError(
                f"axis W: padded extent {wp} smaller than dilated kernel extent {self.span_w}"
            )
        return (hp - self.span_h) // self.stride + 1, (wp - self.span_w) // self.stride + 1


@dataclass
class _Record:
    name: str
    inputs: tuple
    output: np.ndarray
    backward: Callable[[np.ndarray], tuple]


class GradTape:
    """Ordered log of executed ops, replayed in reverse to get gradients.

    Tensors are identified by object identity; every op returns a fresh
    array, and the tape keeps its operands alive so identities stay valid.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._grads: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self._records)

    def record(self, name, inputs, output, backward):
        self._records.append(_Record(name, tuple(inputs), output, backward))

    def find(self, output) -> _Record | None:
        for rec in reversed(self._records):
            if rec.output is output:
                return rec
        return None

    def backward(self, output: np.ndarray, grad: np.ndarray | None = None):
        """Propagate ``grad`` (default: ones) from ``output`` back through the tape."""
        if self.find(output) is None:
            raise TapeError("output tensor was not produced by an op on this tape")
        if grad is None:
            grad = np.ones_like(output)
        if grad.shape != output.shape:
            raise DimensionError(f"upstream gradient shape {grad.shape} != output shape {output.shape}")
        self._grads = {id(output): np.asarray(grad)}
        for rec in reversed(self._records):
            g = self._grads.get(id(rec.output))
            if g is None:
                continue
            for x, gx in zip(rec.inputs, rec.backward(g)):
                if gx is None or not isinstance(x, np.ndarray):
                    continue
                key = id(x)
                if key in self._grads:
                    self._grads[key] = self._grads[key] + gx
                else:
                    self._grads[key] = gx
        return self

    def grad(self, tensor: np.ndarray) -> np.ndarray | None:
        return self._grads.get(id(tensor))


def _maybe_record(tape, name, inputs, output, backward):
    if tape is not None:
        tape.record(name, inputs, output, backward)
    return output


def _check_rank(x, rank, what):
    if x.ndim != rank:
        raise DimensionError(f"{what}: expected rank {rank}, got shape {x.shape}")


# -- padding ---------------------------------------------------------------

def _pad(x, pad, mode):
    if pad == 0:
        return x
    if mode == "reflect":
        h, w = x.shape[-2:]
        if pad >= h or pad >= w:
            raise PaddingError(f"reflect pad {pad} needs spatial extent > pad, got {h}x{w}")
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _reflect_adjoint_1d(g, pad, n, axis):
    g = np.moveaxis(g, axis, -1)
    out = g[..., pad:pad + n].copy()
    out[..., 1:pad + 1] += g[..., :pad][..., ::-1]
    out[..., n - 1 - pad:n - 1] += g[..., pad + n:][..., ::-1]
    return np.moveaxis(out, -1, axis)


def _unpad(g, pad, mode, h, w):
    if pad == 0:
        return g
    if mode == "reflect":
        g = _reflect_adjoint_1d(g, pad, h, 2)
        return _reflect_adjoint_1d(g, pad, w, 3)
    return g[:, :, pad:pad + h, pad:pad + w]


# -- dilated convolution ---------------------------------------------------

def _im2col(xp, p, ho, wo):
    n, c = xp.shape[:2]
    s, d = p.stride, p.dilation
    cols = np.empty((n, c, p.kernel_h, p.kernel_w, ho, wo), dtype=np.float64)
    for i in range(p.kernel_h):
        for j in range(p.kernel_w):
            cols[:, :, i, j] = xp[:, :, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s]
    return cols.reshape(n, c * p.kernel_h * p.kernel_w, ho * wo)


def _col2im(dcols, p, padded_shape, ho, wo):
    n, c = padded_shape[:2]
    s, d = p.stride, p.dilation
    dcols = dcols.reshape(n, c, p.kernel_h, p.kernel_w, ho, wo)
    dxp = np.zeros(padded_shape, dtype=np.float64)
    for i in range(p.kernel_h):
        for j in range(p.kernel_w):
            dxp[:, :, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s] += dcols[:, :, i, j]
    return dxp


def dilated_conv2d(x, weight, bias, p: ConvParams, tape: GradTape | None = None):
    """Cross-correlate ``x`` with a dilated kernel.

    ``out[n, co, y, x] = bias[co] + sum_{ci,i,j} xpad[n, ci, y*s + i*d, x*s + j*d] * weight[co, ci, i, j]``
    """
    _check_rank(x, 4, "input")
    _check_rank(weight, 4, "weight")
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    if weight.shape[1] != cin:
        raise DimensionError(f"axis Cin: input has {cin} channels, weight expects {weight.shape[1]}")
    if weight.shape[2:] != (p.kernel_h, p.kernel_w):
        raise DimensionError(
            f"axis kernel: weight spatial shape {weight.shape[2:]} != ({p.kernel_h}, {p.kernel_w})"
        )
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"axis Cout: bias shape {bias.shape} != ({cout},)")
    ho, wo = p.output_hw(h, w)
    dtype = np.result_type(x, weight)

    xp = _pad(x, p.pad, p.pad_mode)
    cols = _im2col(xp, p, ho, wo)
    wmat = weight.reshape(cout, -1).astype(np.float64)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.astype(np.float64)[:, None]
    out = out.reshape(n, cout, ho, wo).astype(dtype)

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo).astype(np.float64)
        k = cols.shape[1]
        dw = g2.transpose(1, 0, 2).reshape(cout, -1) @ cols.transpose(1, 0, 2).reshape(k, -1).T
        db = g2.sum(axis=(0, 2))
        dxp = _col2im(np.matmul(wmat.T, g2), p, xp.shape, ho, wo)
        dx = _unpad(dxp, p.pad, p.pad_mode, h, w)
        return (
            dx.astype(x.dtype),
            dw.reshape(weight.shape).astype(weight.dtype),
            None if bias is None else db.astype(bias.dtype),
        )

    return _maybe_record(tape, "dilated_conv2d", (x, weight, bias), out, backward)


def dilated_conv2d_backward(tape: GradTape | None, output, grad_out):
    """Gradients ``(d_input, d_weight, d_bias)`` for a recorded convolution."""
    rec = None if tape is None else tape.find(output)
    if rec is None or rec.name != "dilated_conv2d":
        raise TapeError("no dilated_conv2d record for this output on the tape")
    if grad_out.shape != output.shape:
        raise DimensionError(f"upstream gradient shape {grad_out.shape} != output shape {output.shape}")
    return rec.backward(grad_out)


# -- pooling and pointwise ops ---------------------------------------------

def max_pool2d(x, size: int = 2, tape: GradTape | None = None):
    """Non-overlapping ``size x size`` max pool; trailing rows/cols are dropped.

    Ties go to the first element of the window in row-major order, which is
    also where the backward pass routes the gradient.
    """
    _check_rank(x, 4, "input")
    n, c, h, w = x.shape
    if h < size or w < size:
        raise DimensionError(f"axis H/W: spatial dims {h}x{w} smaller than pool window {size}")
    ho, wo = h // size, w // size
    win = (
        x[:, :, :ho * size, :wo * size]
        .reshape(n, c, ho, size, wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, size * size)
    )
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, ho, wo, size * size), dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :ho * size, :wo * size] = (
            gw.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        )
        return (gx,)

    return _maybe_record(tape, "max_pool2d", (x,), out, backward)


def relu(x, tape: GradTape | None = None):
    out = np.maximum(x, 0).astype(x.dtype)
    return _maybe_record(tape, "relu", (x,), out, lambda g: (g * (x > 0),))


def softmax_channels(x, tape: GradTape | None = None):
    """Softmax over axis 1 of an ``[N, K, H, W]`` tensor."""
    _check_rank(x, 4, "input")
    z = x.astype(np.float64)
    z = np.exp(z - z.max(axis=1, keepdims=True))
    s = z / z.sum(axis=1, keepdims=True)
    out = s.astype(x.dtype)

    def backward(g):
        g = g.astype(np.float64)
        return ((s * (g - (g * s).sum(axis=1, keepdims=True))).astype(x.dtype),)

    return _maybe_record(tape, "softmax_channels", (x,), out, backward)


def _interp_matrix(n_in, n_out):
    """Row i holds the corner-aligned linear interpolation weights for output i."""
    m = np.zeros((n_out, n_in))
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def bilinear_resize(x, out_h: int, out_w: int, tape: GradTape | None = None):
    """Corner-aligned bilinear resampling of the last two axes to ``out_h x out_w``."""
    if x.ndim < 2:
        raise DimensionError(f"expected at least 2 dims, got shape {x.shape}")
    h, w = x.shape[-2:]
    my, mx = _interp_matrix(h, out_h), _interp_matrix(w, out_w)
    out = (my @ x.astype(np.float64) @ mx.T).astype(x.dtype)
    return _maybe_record(
        tape, "bilinear_resize", (x,), out,
        lambda g: ((my.T @ g.astype(np.float64) @ mx).astype(x.dtype),),
    )


def bilinear_upsample(x, factor: int, tape: GradTape | None = None):
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    h, w = x.shape[-2:]
    return bilinear_resize(x, h * factor, w * factor, tape=tape)


# -- elementwise -----------------------------------------------------------

def _broadcast_ok(a, b):
    if b.shape == a.shape:
        return True
    if b.ndim == 2 and a.ndim >= 2 and b.shape == a.shape[-2:]:
        return True
    # per-sample spatial map [N, 1, H, W] against [N, C, H, W]
    return a.ndim == 4 and b.shape == (a.shape[0], 1) + a.shape[2:]


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 2:
        return g.reshape(-1, *shape).sum(axis=0)
    return g.sum(axis=1, keepdims=True)


def _check_broadcast(a, b):
    if not _broadcast_ok(a, b):
        raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}")


def add(a, b, tape: GradTape | None = None):
    _check_broadcast(a, b)
    out = (a + b).astype(np.result_type(a, b))
    return _maybe_record(tape, "add", (a, b), out, lambda g: (g, _reduce_to(g, b.shape)))


def mul(a, b, tape: GradTape | None = None):
    """Pointwise product; ``b`` may be a spatial map broadcast over N and C."""
    _check_broadcast(a, b)
    out = (a * b).astype(np.result_type(a, b))
    return _maybe_record(
        tape, "mul", (a, b), out,
        lambda g: ((g * b).astype(a.dtype), _reduce_to(g * a, b.shape).astype(b.dtype)),
    )


def scale(a, s: float, tape: GradTape | None = None):
    out = (a * s).astype(a.dtype)
    return _maybe_record(tape, "scale", (a,), out, lambda g: ((g * s).astype(a.dtype),))


def tape_gradients(tape: GradTape, tensors: Sequence[np.ndarray]):
    """Gradients for ``tensors`` after :meth:`GradTape.backward`, zeros where untouched."""
    out = []
    for t in tensors:
        g = tape.grad(t)
        out.append(np.zeros_like(t) if g is None else g)
    return out
