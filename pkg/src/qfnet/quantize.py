"""Conversion of a folded float graph into an 8-bit ``QuantizedGraph``."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .calib import CalibrationRecord, greedy_search_qparams, input_key, output_key, weight_key
from .ir import Graph, GraphError, infer_shapes
from .tensor import QuantParams, quantize_array, round_half_away

INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


class QuantizationError(ValueError):
    pass


@dataclass
class QConv:
    kind: str  # "conv2d" | "depthwise_conv2d"
    weights: np.ndarray  # uint8, same layout as the float layer
    w_qparams: QuantParams
    bias: np.ndarray  # int32 at scale in_delta * w_delta, zero offset
    in_qparams: QuantParams
    out_qparams: QuantParams
    stride: int = 1
    padding: str = "same"

    @property
    def bias_delta(self) -> float:
        return self.in_qparams.delta * self.w_qparams.delta


@dataclass
class QDense:
    weights: np.ndarray
    w_qparams: QuantParams
    bias: np.ndarray
    in_qparams: QuantParams
    out_qparams: QuantParams

    kind = "dense"

    @property
    def bias_delta(self) -> float:
        return self.in_qparams.delta * self.w_qparams.delta


@dataclass
class QActivation:
    act: str
    out_qparams: QuantParams

    kind = "activation"


@dataclass
class QGlobalAvgPool:
    in_qparams: QuantParams
    out_qparams: QuantParams

    kind = "global_avg_pool"


@dataclass
class QSoftmax:
    """Float softmax over dequantized logits."""

    kind = "softmax"


@dataclass
class QuantizedGraph:
    input_shape: tuple
    input_qparams: QuantParams
    layers: list
    name: str = "quantized"
    notes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)


def quantize_bias(bias: Optional[np.ndarray], n: int, bias_delta: float) -> np.ndarray:
    if bias is None:
        return np.zeros(n, np.int32)
    q = round_half_away(bias.astype(np.float64) / bias_delta)
    if np.any(q < INT32_MIN) or np.any(q > INT32_MAX):
        raise QuantizationError("bias does not fit in int32 at scale in_delta * w_delta")
    return q.astype(np.int32)


def accumulator_bound(layer) -> int:
    """Worst-case |accumulator| before bias for 8-bit operands."""
    if layer.kind == "conv2d":
        kh, kw, cin, _ = layer.weights.shape
        terms = kh * kw * cin
    elif layer.kind == "depthwise_conv2d":
        terms = layer.weights.shape[0] * layer.weights.shape[1]
    else:
        terms = layer.weights.shape[0]
    return terms * 255 * 255


def build_quantized_graph(g: Graph, rec: CalibrationRecord, search=greedy_search_qparams) -> QuantizedGraph:
    """Per-tensor 8-bit quantization of a BN-folded graph.

    A conv or dense layer directly followed by an activation takes the
    activation's output range (the activation then only clamps), otherwise
    its own. Biases become int32 at scale ``in_delta * w_delta``.
    """
    infer_shapes(g)
    in_q = search(rec[input_key()])
    cur = in_q
    qlayers = []
    for i, layer in enumerate(g.layers):
        kind = layer.kind
        if kind == "batchnorm":
            raise GraphError("fold batchnorm before quantizing", i)
        if kind in ("conv2d", "depthwise_conv2d", "dense"):
            if accumulator_bound(layer) >= 2**31:
                raise QuantizationError(f"layer {i}: accumulator may overflow int32")
            w_q = search(rec[weight_key(i)])
            w_codes = quantize_array(layer.weights, w_q)
            nxt = g.layers[i + 1] if i + 1 < len(g.layers) else None
            out_key = output_key(i + 1) if nxt is not None and nxt.kind == "activation" else output_key(i)
            out_q = search(rec[out_key])
            nout = layer.weights.shape[3] if kind == "conv2d" else (
                layer.weights.shape[2] if kind == "depthwise_conv2d" else layer.weights.shape[1])
            bias = quantize_bias(layer.bias, nout, cur.delta * w_q.delta)
            if kind == "dense":
                qlayers.append(QDense(w_codes, w_q, bias, cur, out_q))
            else:
                qlayers.append(QConv(kind, w_codes, w_q, bias, cur, out_q, layer.stride, layer.padding))
            cur = out_q
        elif kind == "activation":
            qlayers.append(QActivation(layer.act, cur))
        elif kind == "global_avg_pool":
            out_q = search(rec[output_key(i)])
            qlayers.append(QGlobalAvgPool(cur, out_q))
            cur = out_q
        elif kind == "softmax":
            qlayers.append(QSoftmax())
        else:
            raise GraphError(f"cannot quantize layer kind {kind!r}", i)
    return QuantizedGraph(tuple(g.input_shape), in_q, qlayers, g.name + "_int8", list(g.notes))
