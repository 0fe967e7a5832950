"""Dense NHWC tensors and asymmetric unsigned 8-bit affine quantization.

Float tensors are plain ``numpy.ndarray`` objects of dtype float32 in NHWC
order. Quantized tensors carry their ``QuantParams`` alongside the bytes.

The mapping is ``real = delta * (code - zero_point)``.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass

import numpy as np

QMIN = 0
QMAX = 255


def round_half_away(x):
    """Round to nearest, ties away from zero. Works on scalars and arrays."""
    if np.isscalar(x):
        return float(math.copysign(math.floor(abs(x) + 0.5), x))
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    delta: float
    zero_point: int

    def __post_init__(self):
        if not (math.isfinite(self.delta) and self.delta > 0):
            raise ValueError(f"delta must be positive and finite, got {self.delta!r}")
        if not (QMIN <= int(self.zero_point) <= QMAX) or int(self.zero_point) != self.zero_point:
            raise ValueError(f"zero_point must be an integer in [0, 255], got {self.zero_point!r}")
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "zero_point", int(self.zero_point))

    @property
    def real_min(self) -> float:
        return self.delta * (QMIN - self.zero_point)

    @property
    def real_max(self) -> float:
        return self.delta * (QMAX - self.zero_point)

    def to_dict(self) -> dict:
        return {"delta": self.delta, "zero_point": self.zero_point}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(float(d["delta"]), int(d["zero_point"]))


@dataclass(frozen=True)
class TensorU8:
    data: np.ndarray
    qparams: QuantParams

    def __post_init__(self):
        if self.data.dtype != np.uint8:
            raise TypeError(f"TensorU8 needs uint8 data, got {self.data.dtype}")

    @property
    def shape(self) -> tuple:
        return self.data.shape


def check_shape(shape) -> tuple:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4 or any(d < 0 for d in shape):
        raise ValueError(f"expected 4 non-negative dims (N, H, W, C), got {shape}")
    if math.prod(shape) == 0:
        raise ValueError(f"zero-sized tensor shape {shape}")
    return shape


def quantize_value(x: float, q: QuantParams) -> int:
    code = round_half_away(x / q.delta) + q.zero_point
    return int(min(max(code, QMIN), QMAX))


def dequantize_value(v: int, q: QuantParams) -> float:
    return q.delta * (int(v) - q.zero_point)


def choose_qparams_from_range(min_val: float, max_val: float) -> QuantParams:
    """Affine parameters covering ``[min_val, max_val]`` widened to include 0."""
    min_val, max_val = float(min_val), float(max_val)
    if not (math.isfinite(min_val) and math.isfinite(max_val)):
        raise ValueError(f"corrupted statistics: non-finite range [{min_val}, {max_val}]")
    if min_val > max_val:
        raise ValueError(f"min {min_val} exceeds max {max_val}")
    min_val = min(min_val, 0.0)
    max_val = max(max_val, 0.0)
    if max_val == min_val:
        return QuantParams(1.0, 0)
    # a subnormal range would underflow to a zero step
    delta = max((max_val - min_val) / (QMAX - QMIN), sys.float_info.min)
    zp = round_half_away(-min_val / delta)
    return QuantParams(delta, int(min(max(zp, QMIN), QMAX)))


def quantize_array(x: np.ndarray, q: QuantParams) -> np.ndarray:
    codes = round_half_away(np.asarray(x, dtype=np.float64) / q.delta) + q.zero_point
    return np.clip(codes, QMIN, QMAX).astype(np.uint8)


def dequantize_array(codes: np.ndarray, q: QuantParams) -> np.ndarray:
    return q.delta * (codes.astype(np.float64) - q.zero_point)


def quantize_tensor(t: np.ndarray, q: QuantParams) -> TensorU8:
    return TensorU8(quantize_array(t, q), q)


def dequantize_tensor(t: TensorU8) -> np.ndarray:
    return dequantize_array(t.data, t.qparams).astype(np.float32)
