"""Sequential graph IR for separable-convolution classifiers.

A ``Graph`` is an input shape plus an ordered list of layers. Layers hold
their own numpy parameters; transforms return new graphs and never mutate.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields
from typing import Optional, Union

import numpy as np

BN_EPSILON = 1e-5


class GraphError(ValueError):
    """Structurally invalid graph; carries the offending layer index if known."""

    def __init__(self, message: str, layer: Optional[int] = None):
        self.layer = layer
        prefix = f"layer {layer}: " if layer is not None else ""
        super().__init__(prefix + message)


@dataclass
class Conv2D:
    weights: np.ndarray  # [kh, kw, in, out]
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: str = "same"

    kind = "conv2d"

    @property
    def kernel(self):
        return self.weights.shape[:2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]


@dataclass
class DepthwiseConv2D:
    weights: np.ndarray  # [kh, kw, ch, 1]
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: str = "same"

    kind = "depthwise_conv2d"

    @property
    def kernel(self):
        return self.weights.shape[:2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[2]


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = BN_EPSILON

    kind = "batchnorm"

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def alpha(self) -> np.ndarray:
        """Per-channel scale gamma / sqrt(var + eps), computed in float64."""
        return self.gamma.astype(np.float64) / np.sqrt(self.var.astype(np.float64) + self.eps)


@dataclass
class Activation:
    act: str  # "relu" | "relu6"

    kind = "activation"


@dataclass
class GlobalAvgPool:
    kind = "global_avg_pool"


@dataclass
class Dense:
    weights: np.ndarray  # [in, out]
    bias: Optional[np.ndarray] = None

    kind = "dense"


@dataclass
class Softmax:
    kind = "softmax"


Layer = Union[Conv2D, DepthwiseConv2D, BatchNorm, Activation, GlobalAvgPool, Dense, Softmax]
LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, DepthwiseConv2D, BatchNorm, Activation, GlobalAvgPool, Dense, Softmax)}

# array-valued fields per layer kind, in blob declaration order
TENSOR_FIELDS = {
    "conv2d": ("weights", "bias"),
    "depthwise_conv2d": ("weights", "bias"),
    "batchnorm": ("gamma", "beta", "mean", "var"),
    "dense": ("weights", "bias"),
}


def layer_tensors(layer) -> dict:
    """Named parameter arrays of a layer (missing optional bias omitted)."""
    out = {}
    for name in TENSOR_FIELDS.get(layer.kind, ()):
        arr = getattr(layer, name)
        if arr is not None:
            out[name] = arr
    return out


def layer_params(layer) -> dict:
    """Non-array hyperparameters of a layer."""
    arrays = set(TENSOR_FIELDS.get(layer.kind, ()))
    return {f.name: getattr(layer, f.name) for f in fields(layer) if f.name not in arrays}


@dataclass
class Graph:
    input_shape: tuple  # (N, H, W, C); N is nominal, engines accept any batch
    layers: list
    name: str = "graph"
    seed: Optional[int] = None
    notes: list = field(default_factory=list)

    def copy(self) -> "Graph":
        return copy.deepcopy(self)

    def __len__(self) -> int:
        return len(self.layers)


def conv_out_size(size: int, k: int, stride: int, padding: str) -> int:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        if size < k:
            raise ValueError(f"valid padding needs input {size} >= kernel {k}")
        return (size - k) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def same_padding(size: int, k: int, stride: int) -> tuple:
    """(before, after) padding for TF-style 'same' convolution."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def infer_shapes(g: Graph) -> list:
    """Output shape of each layer; raises ``GraphError`` at the first bad layer."""
    shape = tuple(g.input_shape)
    if len(shape) != 4 or math.prod(shape) == 0:
        raise GraphError(f"input shape must be 4 positive dims, got {shape}")
    shapes = []
    for i, layer in enumerate(g.layers):
        kind = layer.kind
        rank4 = len(shape) == 4
        if kind in ("conv2d", "depthwise_conv2d"):
            if not rank4:
                raise GraphError(f"{kind} needs a rank-4 input, got {shape}", i)
            n, h, w, c = shape
            kh, kw = layer.kernel
            if kind == "conv2d":
                if layer.weights.ndim != 4 or layer.weights.shape[2] != c:
                    raise GraphError(f"conv2d expects {c} input channels, weights {layer.weights.shape}", i)
                cout = layer.weights.shape[3]
            else:
                if layer.weights.ndim != 4 or layer.weights.shape[2:] != (c, 1):
                    raise GraphError(f"depthwise expects weights [kh, kw, {c}, 1], got {layer.weights.shape}", i)
                cout = c
            if layer.bias is not None and layer.bias.shape != (cout,):
                raise GraphError(f"bias shape {layer.bias.shape} != ({cout},)", i)
            try:
                oh = conv_out_size(h, kh, layer.stride, layer.padding)
                ow = conv_out_size(w, kw, layer.stride, layer.padding)
            except ValueError as e:
                raise GraphError(str(e), i) from None
            shape = (n, oh, ow, cout)
        elif kind == "batchnorm":
            c = shape[-1]
            for name in ("gamma", "beta", "mean", "var"):
                if getattr(layer, name).shape != (c,):
                    raise GraphError(f"batchnorm {name} must have {c} entries", i)
            if np.any(layer.var < 0):
                raise GraphError("batchnorm variance must be non-negative", i)
            if not layer.eps > 0:
                raise GraphError("batchnorm epsilon must be positive", i)
        elif kind == "activation":
            if layer.act not in ("relu", "relu6"):
                raise GraphError(f"unknown activation {layer.act!r}", i)
        elif kind == "global_avg_pool":
            if not rank4:
                raise GraphError("global_avg_pool needs a rank-4 input", i)
            shape = (shape[0], 1, 1, shape[3])
        elif kind == "dense":
            n = shape[0]
            flat = math.prod(shape[1:])
            if layer.weights.ndim != 2 or layer.weights.shape[0] != flat:
                raise GraphError(f"dense expects {flat} inputs, weights {layer.weights.shape}", i)
            if layer.bias is not None and layer.bias.shape != (layer.weights.shape[1],):
                raise GraphError("dense bias length mismatch", i)
            shape = (n, layer.weights.shape[1])
        elif kind == "softmax":
            if len(shape) != 2:
                raise GraphError("softmax needs a rank-2 input", i)
        else:
            raise GraphError(f"unknown layer kind {kind!r}", i)
        for name, arr in layer_tensors(layer).items():
            if not np.all(np.isfinite(arr)):
                raise GraphError(f"non-finite values in {name}", i)
        shapes.append(shape)
    if not shapes or len(shapes[-1]) != 2:
        raise GraphError("graph must end in a rank-2 (batch, classes) tensor")
    return shapes


# --- architecture constructors -------------------------------------------------


@dataclass
class ArchSpec:
    input_size: int = 16
    input_channels: int = 1
    num_classes: int = 8
    stem_channels: int = 8
    stem_stride: int = 2
    block_channels: tuple = (16, 16, 32)
    block_strides: tuple = (1, 2, 1)

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        self.block_strides = tuple(int(s) for s in self.block_strides)
        if len(self.block_strides) != len(self.block_channels):
            raise ValueError("block_channels and block_strides must have equal length")
        widths = (self.input_size, self.input_channels, self.num_classes, self.stem_channels) + self.block_channels
        if any(w <= 0 for w in widths):
            raise ValueError(f"all sizes and widths must be positive: {widths}")


def _bn(c: int) -> BatchNorm:
    return BatchNorm(np.ones(c, np.float32), np.zeros(c, np.float32), np.zeros(c, np.float32), np.ones(c, np.float32))


def _stem(spec: ArchSpec) -> list:
    w = np.zeros((3, 3, spec.input_channels, spec.stem_channels), np.float32)
    return [Conv2D(w, np.zeros(spec.stem_channels, np.float32), spec.stem_stride, "same")]


def _head(spec: ArchSpec, channels: int) -> list:
    return [
        GlobalAvgPool(),
        Dense(np.zeros((channels, spec.num_classes), np.float32), np.zeros(spec.num_classes, np.float32)),
        Softmax(),
    ]


def build_baseline_mini(spec: Optional[ArchSpec] = None) -> Graph:
    """V1-style chain: DW -> BN -> ReLU6 -> PW -> BN -> ReLU6 per block.

    Weights are zero placeholders; run ``trainer.init_weights`` before use.
    """
    spec = spec or ArchSpec()
    layers = _stem(spec)
    c = spec.stem_channels
    for cout, stride in zip(spec.block_channels, spec.block_strides):
        layers += [
            DepthwiseConv2D(np.zeros((3, 3, c, 1), np.float32), None, stride, "same"),
            _bn(c),
            Activation("relu6"),
            Conv2D(np.zeros((1, 1, c, cout), np.float32), None, 1, "same"),
            _bn(cout),
            Activation("relu6"),
        ]
        c = cout
    layers += _head(spec, c)
    g = Graph((1, spec.input_size, spec.input_size, spec.input_channels), layers, name="baseline_mini")
    infer_shapes(g)
    return g


def build_friendly_mini(spec: Optional[ArchSpec] = None) -> Graph:
    """Quantization-friendly chain: DW(+bias) -> PW -> BN -> ReLU per block."""
    spec = spec or ArchSpec()
    layers = _stem(spec)
    c = spec.stem_channels
    for cout, stride in zip(spec.block_channels, spec.block_strides):
        layers += [
            DepthwiseConv2D(np.zeros((3, 3, c, 1), np.float32), np.zeros(c, np.float32), stride, "same"),
            Conv2D(np.zeros((1, 1, c, cout), np.float32), None, 1, "same"),
            _bn(cout),
            Activation("relu"),
        ]
        c = cout
    layers += _head(spec, c)
    g = Graph((1, spec.input_size, spec.input_size, spec.input_channels), layers, name="friendly_mini")
    infer_shapes(g)
    return g


def graphs_equal(a: Graph, b: Graph, check_values: bool = True) -> bool:
    """Structural (and optionally bit-level) equality of two graphs."""
    if tuple(a.input_shape) != tuple(b.input_shape) or len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if la.kind != lb.kind or layer_params(la) != layer_params(lb):
            return False
        ta, tb = layer_tensors(la), layer_tensors(lb)
        if ta.keys() != tb.keys():
            return False
        for k in ta:
            if ta[k].shape != tb[k].shape or ta[k].dtype != tb[k].dtype:
                return False
            if check_values and ta[k].tobytes() != tb[k].tobytes():
                return False
    return True
