"""Graph rewrites: batch-norm folding, the friendly separable block, dead-channel injection."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .ir import Activation, Conv2D, DepthwiseConv2D, Graph, GraphError, infer_shapes

DEAD_CHANNEL_VAR = 1e-8


@dataclass
class FoldedLayer:
    layer: int  # index of the conv in the *original* graph
    alpha: np.ndarray
    shift: np.ndarray

    @property
    def max_alpha(self) -> float:
        return float(self.alpha.max())

    @property
    def min_alpha(self) -> float:
        return float(self.alpha.min())

    @property
    def median_alpha(self) -> float:
        return float(np.median(self.alpha))


@dataclass
class FoldReport:
    layers: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)


def fold_batchnorm(g: Graph):
    """Absorb every inference-mode BN into the conv directly before it.

    Returns ``(folded_graph, FoldReport)``.
    """
    layers = []
    report = FoldReport()
    src = g.layers
    i = 0
    while i < len(src):
        layer = src[i]
        if layer.kind == "batchnorm":
            raise GraphError("batchnorm must directly follow a conv2d or depthwise_conv2d to be folded", i)
        nxt = src[i + 1] if i + 1 < len(src) else None
        if layer.kind in ("conv2d", "depthwise_conv2d") and nxt is not None and nxt.kind == "batchnorm":
            alpha = nxt.alpha()
            w = layer.weights.astype(np.float64)
            b = layer.bias.astype(np.float64) if layer.bias is not None else 0.0
            # out-channel axis is 3 for conv2d, 2 for depthwise
            w_new = w * (alpha if layer.kind == "conv2d" else alpha[:, None])
            shift = nxt.beta.astype(np.float64) - alpha * nxt.mean.astype(np.float64)
            b_new = shift + alpha * b
            cls = Conv2D if layer.kind == "conv2d" else DepthwiseConv2D
            layers.append(cls(w_new.astype(np.float32), b_new.astype(np.float32), layer.stride, layer.padding))
            report.layers.append(FoldedLayer(i, alpha, shift))
            i += 2
            continue
        layers.append(copy.deepcopy(layer))
        i += 1
    out = Graph(tuple(g.input_shape), layers, g.name + "_folded", g.seed, list(g.notes) + ["batchnorm folded"])
    infer_shapes(out)
    return out, report


def _is_act(layer, act):
    return layer.kind == "activation" and layer.act == act


def _is_pointwise(layer):
    return layer.kind == "conv2d" and layer.kernel == (1, 1)


def make_friendly(g: Graph) -> Graph:
    """Drop BN+ReLU6 between depthwise and pointwise; ReLU6 after pointwise becomes ReLU.

    Accepts baseline blocks ``DW, BN, ReLU6, PW, BN, ReLU6`` and already
    friendly blocks ``DW, PW, BN, ReLU`` (so the rewrite is idempotent).
    """
    src = g.layers
    out = []
    seen_block = False
    i = 0
    while i < len(src):
        layer = src[i]
        if layer.kind != "depthwise_conv2d":
            # stem layers pass through; after the first block only the head may follow
            if seen_block and layer.kind in ("conv2d", "batchnorm", "activation"):
                raise GraphError("unrecognized block structure", i)
            out.append(copy.deepcopy(layer))
            i += 1
            continue
        seen_block = True
        block = src[i:i + 6]
        kinds = [l.kind for l in block]
        if kinds[:6] == ["depthwise_conv2d", "batchnorm", "activation", "conv2d", "batchnorm", "activation"] \
                and _is_act(block[2], "relu6") and _is_pointwise(block[3]):
            dw = copy.deepcopy(block[0])
            if dw.bias is None:
                dw.bias = np.zeros(dw.out_channels, np.float32)
            act = block[5].act
            out += [dw, copy.deepcopy(block[3]), copy.deepcopy(block[4]), Activation("relu" if act == "relu6" else act)]
            i += 6
        elif kinds[:4] == ["depthwise_conv2d", "conv2d", "batchnorm", "activation"] and _is_pointwise(block[1]):
            dw = copy.deepcopy(block[0])
            if dw.bias is None:
                dw.bias = np.zeros(dw.out_channels, np.float32)
            out += [dw, copy.deepcopy(block[1]), copy.deepcopy(block[2]), Activation("relu")]
            i += 4
        else:
            raise GraphError(f"unrecognized separable block {kinds[:6]}", i)
    name = g.name.replace("baseline", "friendly") if "baseline" in g.name else g.name
    res = Graph(tuple(g.input_shape), out, name, g.seed, list(g.notes))
    infer_shapes(res)
    return res


def inject_dead_channels(g: Graph, layer: int, channels, zero_weights: bool = False) -> Graph:
    """Turn selected depthwise channels into dead channels with collapsed BN statistics.

    The BN after depthwise ``layer`` gets mean 0 and variance 1e-8 on
    ``channels`` (gamma and beta untouched), so its scale becomes
    ``gamma / sqrt(1e-8 + eps)``. The next pointwise conv stops reading
    those channels (its input weights for them are zeroed), so the float
    network ignores them. The depthwise weights stay live: zeroed weights
    would fold to zero and erase the outlier range. ``zero_weights`` zeroes
    them anyway.
    """
    channels = sorted({int(c) for c in channels})
    if not 0 <= layer < len(g.layers) - 1:
        raise GraphError("layer index out of range", layer)
    dw, bn = g.layers[layer], g.layers[layer + 1]
    if dw.kind != "depthwise_conv2d" or bn.kind != "batchnorm":
        raise GraphError("dead-channel injection needs a depthwise_conv2d followed by batchnorm", layer)
    c = dw.out_channels
    bad = [ch for ch in channels if not 0 <= ch < c]
    if bad:
        raise ValueError(f"channel indices {bad} out of range for {c} channels")
    out = g.copy()
    if not channels:
        return out
    dw, bn = out.layers[layer], out.layers[layer + 1]
    idx = np.asarray(channels)
    if zero_weights:
        dw.weights[:, :, idx, :] = 0.0
    bn.mean[idx] = 0.0
    bn.var[idx] = DEAD_CHANNEL_VAR
    for nxt in out.layers[layer + 2:]:
        if nxt.kind == "conv2d":
            nxt.weights[:, :, idx, :] = 0.0
            break
        if nxt.kind != "activation":
            break
    out.notes.append(f"dead channels {channels} injected at layer {layer}")
    return out
