"""Slow, obviously-correct reference implementations used only by the tests.

Nothing here imports the code paths it checks.
"""

import math

import numpy as np


def reflect_index(i, n):
    # single reflection, edge pixel not repeated
    if i < 0:
        return -i
    if i >= n:
        return 2 * (n - 1) - i
    return i


def conv_direct(x, w, b, stride=1, dilation=1, pad=0, pad_mode="zero"):
    """Five-nested-loop evaluation of the dilated correlation sum, in float64."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - ((kh - 1) * dilation + 1)) // stride + 1
    wo = (wd + 2 * pad - ((kw - 1) * dilation + 1)) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for nn in range(n):
        for co in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                yy = y * stride + i * dilation - pad
                                xq = xx * stride + j * dilation - pad
                                if pad_mode == "reflect":
                                    yy, xq = reflect_index(yy, h), reflect_index(xq, wd)
                                elif not (0 <= yy < h and 0 <= xq < wd):
                                    continue
                                acc += float(x[nn, ci, yy, xq]) * float(w[co, ci, i, j])
                    out[nn, co, y, xx] = acc
    return out


def maxpool_scan(x, size=2):
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    for a in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    best = None
                    for dy in range(size):
                        for dx in range(size):
                            v = x[a, ch, y * size + dy, xx * size + dx]
                            if best is None or v > best:
                                best = v
                    out[a, ch, y, xx] = best
    return out


def bilinear_corner_aligned(img, out_h, out_w):
    """Per-pixel scalar evaluation of corner-aligned bilinear interpolation."""
    h, w = img.shape
    out = np.empty((out_h, out_w))
    for oy in range(out_h):
        sy = 0.0 if out_h == 1 else oy * (h - 1) / (out_h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        ty = sy - y0
        for ox in range(out_w):
            sx = 0.0 if out_w == 1 else ox * (w - 1) / (out_w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            tx = sx - x0
            top = img[y0, x0] * (1 - tx) + img[y0, x1] * tx
            bot = img[y1, x0] * (1 - tx) + img[y1, x1] * tx
            out[oy, ox] = top * (1 - ty) + bot * ty
    return out


def numeric_grad(f, x, h=1e-3, coords=None):
    """Central differences of scalar ``f`` w.r.t. float64 array ``x`` (mutated in place, restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric, floor=1e-6):
    """Elementwise |a-n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def confusion_loop(pred, gt, k, ignore=255):
    """Per-class (tp, fp, fn, tn) by visiting every pixel."""
    tp = [0] * k
    fp = [0] * k
    fn = [0] * k
    tn = [0] * k
    for p, g in zip(pred.reshape(-1).tolist(), gt.reshape(-1).tolist()):
        if g == ignore:
            continue
        for c in range(k):
            if p == c and g == c:
                tp[c] += 1
            elif p == c:
                fp[c] += 1
            elif g == c:
                fn[c] += 1
            else:
                tn[c] += 1
    return tp, fp, fn, tn


def block_mean(m, fy, fx):
    h, w = m.shape
    out = np.empty((h // fy, w // fx))
    for y in range(h // fy):
        for x in range(w // fx):
            out[y, x] = sum(
                float(m[y * fy + a, x * fx + b]) for a in range(fy) for b in range(fx)
            ) / (fy * fx)
    return out
