"""
Dead depthwise channels and per-tensor quantization
===================================================

A depthwise channel whose BN variance collapses gets a huge BN scale.
Folding the scale into the depthwise weights stretches the per-tensor
weight range, and the healthy channels are left with a handful of codes.
The friendly block (no BN or ReLU6 between depthwise and pointwise) has no
such scale to fold.
"""

import numpy as np

from qfnet import float_engine as fe
from qfnet.calib import collect_stats
from qfnet.diagnostics import bn_alpha, dequantized_weights, weight_channel_sqnr
from qfnet.int8_engine import accuracy_quantized
from qfnet.ir import build_baseline_mini, build_friendly_mini
from qfnet.quantize import build_quantized_graph
from qfnet.synth import GenSpec, generate
from qfnet.trainer import TrainConfig, init_weights, train
from qfnet.transforms import fold_batchnorm, inject_dead_channels

# %%
# A small dataset and a few epochs are enough for the textures.
train_set, val, _ = generate(GenSpec(seed=0, train=800, val=400, holdout=100))
cfg = TrainConfig(epochs=6)
baseline, _ = train(init_weights(build_baseline_mini(), 0), train_set, cfg)
friendly, _ = train(init_weights(build_friendly_mini(), 0), train_set, cfg)

# %%
# Kill channel 0 of the first depthwise layer and look at the BN scales.
dead = inject_dead_channels(baseline, 1, [0])
rep = bn_alpha(dead)[0]
print("alpha of the injected BN:", np.round(rep.alpha[:6], 2), "... flagged", rep.flagged)

# %%
# Fold, calibrate on one image per class and quantize each model.
calib = train_set.per_class(1)


def int8(g):
    f = fold_batchnorm(g)[0]
    return f, build_quantized_graph(f, collect_stats(f, calib))


for name, g in (("baseline", baseline), ("baseline + dead", dead), ("friendly", friendly)):
    f, q = int8(g)
    print(f"{name:16s} float {fe.accuracy(f, val.images, val.labels):.3f}"
          f"  int8 {accuracy_quantized(q, val.images, val.labels):.3f}")

# %%
# The folded depthwise weights: injected channel vs the rest.
f, q = int8(dead)
w = f.layers[1].weights
sq = weight_channel_sqnr(w, dequantized_weights(q.layers[1]), channel_axis=2)
codes = [len(np.unique(q.layers[1].weights[:, :, c])) for c in range(w.shape[2])]
print("weight range ratio (dead / healthy):", np.abs(w[:, :, 0]).max() / np.abs(w[:, :, 1:]).max())
print("SQNR dB, dead channel:", round(sq[0], 1), " healthy median:", round(float(np.nanmedian(sq[1:])), 1))
print("distinct codes per healthy channel:", codes[1:])
