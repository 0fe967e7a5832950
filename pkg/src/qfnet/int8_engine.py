"""Fixed-point inference: uint8 activations and weights, int32 accumulators.

Accumulation is carried in int64 numpy arrays; the build-time bound in
``quantize.accumulator_bound`` guarantees every value fits in int32, and
``qconv2d`` checks it anyway.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .float_engine import extract_patches, pad_input, softmax
from .quantize import QuantizedGraph
from .tensor import QMAX, QMIN, QuantParams, TensorU8, quantize_array, quantize_value, round_half_away


@dataclass(frozen=True)
class RequantMode:
    kind: str = "float_multiplier"  # or "fixed_multiplier"

    def __post_init__(self):
        if self.kind not in ("float_multiplier", "fixed_multiplier"):
            raise ValueError(f"unknown requantization mode {self.kind!r}")


FLOAT_MULTIPLIER = RequantMode("float_multiplier")
FIXED_MULTIPLIER = RequantMode("fixed_multiplier")


def quantize_multiplier(m: float):
    """Normalized (multiplier, right_shift) with m ~= multiplier * 2**-(31 + right_shift).

    ``multiplier`` lies in [2**30, 2**31).
    """
    if not m > 0:
        raise ValueError("multiplier must be positive")
    mant, exp = math.frexp(m)  # m = mant * 2**exp, mant in [0.5, 1)
    q = int(round_half_away(mant * 2**31))
    if q == 2**31:
        q //= 2
        exp += 1
    return q, -exp


def rounding_shift(x: np.ndarray, shift: int) -> np.ndarray:
    """x / 2**shift rounded half away from zero (left shift when ``shift`` < 0)."""
    if shift <= 0:
        return x << -shift
    half = np.int64(1) << (shift - 1)
    mag = (np.abs(x) + half) >> shift
    return np.where(x < 0, -mag, mag)


def requantize(acc: np.ndarray, multiplier: float, out_q: QuantParams, mode: RequantMode = FLOAT_MULTIPLIER):
    """Map int accumulators to uint8 codes: clamp(round(acc * M) + zero_point)."""
    acc = np.asarray(acc, dtype=np.int64)
    if mode.kind == "float_multiplier":
        scaled = round_half_away(acc.astype(np.float64) * multiplier)
    else:
        m, shift = quantize_multiplier(multiplier)
        scaled = rounding_shift(acc * np.int64(m), 31 + shift)
    return np.clip(scaled + out_q.zero_point, QMIN, QMAX).astype(np.uint8)


def _check_acc(acc):
    if acc.size and (acc.max() > 2**31 - 1 or acc.min() < -(2**31)):
        raise OverflowError("int32 accumulator overflow")


def conv_accumulate(x: TensorU8, w: TensorU8, bias: np.ndarray, stride: int, padding: str, depthwise: bool):
    """Exact integer sum of (x - zp_x)(w - zp_w) + bias; padding contributes real zero."""
    kh, kw = w.data.shape[:2]
    xs = x.data.astype(np.int64) - x.qparams.zero_point
    xs = pad_input(xs, kh, kw, stride, padding, value=0)
    ws = w.data.astype(np.int64) - w.qparams.zero_point
    patches = extract_patches(xs, kh, kw, stride)
    n, oh, ow, c = patches.shape[:4]
    if depthwise:
        acc = np.einsum("nhwcij,ijc->nhwc", patches, ws[..., 0])
    else:
        cols = patches.reshape(n * oh * ow, c * kh * kw)
        acc = (cols @ ws.transpose(2, 0, 1, 3).reshape(c * kh * kw, -1)).reshape(n, oh, ow, -1)
    acc = acc + bias.astype(np.int64)
    _check_acc(acc)
    return acc


def qconv2d(x: TensorU8, w: TensorU8, bias: np.ndarray, out_q: QuantParams, mode: RequantMode = FLOAT_MULTIPLIER,
            stride: int = 1, padding: str = "same", depthwise: bool = False) -> TensorU8:
    acc = conv_accumulate(x, w, bias, stride, padding, depthwise)
    m = x.qparams.delta * w.qparams.delta / out_q.delta
    return TensorU8(requantize(acc, m, out_q, mode), out_q)


def qdepthwise_conv2d(x: TensorU8, w: TensorU8, bias: np.ndarray, out_q: QuantParams,
                      mode: RequantMode = FLOAT_MULTIPLIER, stride: int = 1, padding: str = "same") -> TensorU8:
    return qconv2d(x, w, bias, out_q, mode, stride, padding, depthwise=True)


def qrelu(x: TensorU8) -> TensorU8:
    return TensorU8(np.maximum(x.data, np.uint8(x.qparams.zero_point)), x.qparams)


def qrelu6(x: TensorU8) -> TensorU8:
    q = x.qparams
    return TensorU8(np.clip(x.data, q.zero_point, quantize_value(6.0, q)).astype(np.uint8), q)


def qglobal_avg_pool(x: TensorU8, out_q: QuantParams, mode: RequantMode = FLOAT_MULTIPLIER) -> TensorU8:
    n, h, w, c = x.data.shape
    acc = (x.data.astype(np.int64) - x.qparams.zero_point).sum(axis=(1, 2), keepdims=True)
    m = x.qparams.delta / (out_q.delta * h * w)
    return TensorU8(requantize(acc, m, out_q, mode), out_q)


def qdense(x: TensorU8, w: TensorU8, bias: np.ndarray, out_q: QuantParams,
           mode: RequantMode = FLOAT_MULTIPLIER) -> TensorU8:
    xs = x.data.reshape(x.data.shape[0], -1).astype(np.int64) - x.qparams.zero_point
    ws = w.data.astype(np.int64) - w.qparams.zero_point
    acc = xs @ ws + bias.astype(np.int64)
    _check_acc(acc)
    m = x.qparams.delta * w.qparams.delta / out_q.delta
    return TensorU8(requantize(acc, m, out_q, mode), out_q)


def run_qlayer(layer, x, mode: RequantMode = FLOAT_MULTIPLIER):
    kind = layer.kind
    if kind in ("conv2d", "depthwise_conv2d"):
        return qconv2d(x, TensorU8(layer.weights, layer.w_qparams), layer.bias, layer.out_qparams, mode,
                       layer.stride, layer.padding, depthwise=kind == "depthwise_conv2d")
    if kind == "dense":
        return qdense(x, TensorU8(layer.weights, layer.w_qparams), layer.bias, layer.out_qparams, mode)
    if kind == "activation":
        return qrelu(x) if layer.act == "relu" else qrelu6(x)
    if kind == "global_avg_pool":
        return qglobal_avg_pool(x, layer.out_qparams, mode)
    if kind == "softmax":
        return softmax(x.qparams.delta * (x.data.astype(np.float64) - x.qparams.zero_point))
    raise ValueError(f"unknown quantized layer kind {kind!r}")


def forward_quantized(qg: QuantizedGraph, x: np.ndarray, mode: RequantMode = FLOAT_MULTIPLIER,
                      trace: bool = False):
    """Run ``qg`` on float images; returns (logits, labels, trace).

    ``logits`` are the dequantized outputs feeding softmax; ``trace`` maps
    layer index to its ``TensorU8`` output (float array for softmax) or is
    ``None``.
    """
    x = np.asarray(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(qg.input_shape[1:]):
        raise ValueError(f"input shape {x.shape} does not match graph input {qg.input_shape}")
    t = TensorU8(quantize_array(x, qg.input_qparams), qg.input_qparams)
    acts = {} if trace else None
    logits = None
    out = t
    for i, layer in enumerate(qg.layers):
        if layer.kind == "softmax":
            logits = out.qparams.delta * (out.data.astype(np.float64) - out.qparams.zero_point)
        out = run_qlayer(layer, out, mode)
        if trace:
            acts[i] = out
    if logits is None:
        logits = out.qparams.delta * (out.data.astype(np.float64) - out.qparams.zero_point)
    return logits, logits.argmax(axis=1), acts


def predict_quantized(qg: QuantizedGraph, images: np.ndarray, mode: RequantMode = FLOAT_MULTIPLIER,
                      batch_size: int = 256) -> np.ndarray:
    preds = [forward_quantized(qg, images[s:s + batch_size], mode)[1] for s in range(0, len(images), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


def accuracy_quantized(qg: QuantizedGraph, images, labels, mode: RequantMode = FLOAT_MULTIPLIER) -> float:
    return float(np.mean(predict_quantized(qg, images, mode) == labels))
