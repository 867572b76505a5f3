"""
Dilated convolutions and the context module
===========================================

A 3x3 filter dilated by d taps every d-th pixel, so stacking dilations
1, 2, 4 grows the receptive field to 15x15 without pooling.
"""

import numpy as np

from jsms import tensor as T
from jsms import netgraph as ng
from jsms.context import build_context, receptive_field

# a single bright pixel shows which taps a dilated filter touches
x = np.zeros((1, 1, 9, 9))
x[0, 0, 4, 4] = 1.0
w = np.ones((1, 1, 3, 3))
for d in (1, 2, 4):
    y = T.dilated_conv2d(x, w, None, T.ConvParams(dilation=d, pad=d))
    print(f"dilation {d}: nonzero outputs at offsets", sorted(set((np.nonzero(y[0, 0])[0] - 4).tolist())))

# backpropagate an impulse through the stack to read off the footprint
img = np.ones((1, 1, 31, 31))
tape = T.GradTape()
h = img
for d in (1, 2, 4):
    h = T.dilated_conv2d(h, w, np.zeros(1), T.ConvParams(dilation=d, pad=d), tape)
up = np.zeros_like(h)
up[0, 0, 15, 15] = 1
tape.backward(h, up)
ys, xs = np.nonzero(tape.grad(img)[0, 0])
print("footprint of dilations 1,2,4:", np.ptp(ys) + 1, "x", np.ptp(xs) + 1)

# the context module starts out as an exact identity on nonnegative features
ctx = build_context(16)
print("context layers:", [(l.name, l.dilation) for l in ctx.spec.convs])
feats = np.abs(np.random.default_rng(0).normal(size=(1, 16, 20, 20))).astype(np.float32)
print("max |ctx(x) - x| =", np.abs(ng.forward(ctx, feats) - feats).max())
print("context receptive field:", receptive_field())

# pool removal: the toy front end downsamples by 4 instead of 8
pooled = ng.pooled_front_end("toy", 6)
dilated = ng.build_front_end("toy", 6)
print("downsample pooled / dilated:", pooled.downsample_factor, "/", dilated.downsample_factor)
print("dilations after surgery:", {l.name: l.dilation for l in dilated.convs if l.dilation > 1})
