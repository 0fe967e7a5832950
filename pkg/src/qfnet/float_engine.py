"""Reference floating-point forward pass.

Every kernel keeps the dtype of its input, so the same code runs in float32
(production) and float64 (gradient checks). Convolutions are direct: padded
input patches contracted against the kernel, no FFT.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .ir import Graph, GraphError, same_padding


def pad_input(x: np.ndarray, kh: int, kw: int, stride: int, padding: str, value=0) -> np.ndarray:
    if padding == "valid":
        return x
    ph = same_padding(x.shape[1], kh, stride)
    pw = same_padding(x.shape[2], kw, stride)
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), ph, pw, (0, 0)), constant_values=value)


def extract_patches(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape (N, OH, OW, C, kh, kw) over an already padded input."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray] = None,
           stride: int = 1, padding: str = "same") -> np.ndarray:
    kh, kw, cin, cout = weights.shape
    if x.shape[3] != cin:
        raise ValueError(f"conv2d: input has {x.shape[3]} channels, weights expect {cin}")
    dt = x.dtype
    patches = extract_patches(pad_input(x, kh, kw, stride, padding), kh, kw, stride)
    n, oh, ow = patches.shape[:3]
    # (C, kh, kw) ordering of the patch axis matches weights transposed to [C, kh, kw, out]
    cols = patches.reshape(n * oh * ow, cin * kh * kw)
    wmat = weights.astype(dt, copy=False).transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    out = (cols @ wmat).reshape(n, oh, ow, cout)
    if bias is not None:
        out = out + bias.astype(dt, copy=False)
    return out


def depthwise_conv2d(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray] = None,
                     stride: int = 1, padding: str = "same") -> np.ndarray:
    kh, kw, c, _ = weights.shape
    if x.shape[3] != c:
        raise ValueError(f"depthwise_conv2d: input has {x.shape[3]} channels, weights expect {c}")
    dt = x.dtype
    xp = pad_input(x, kh, kw, stride, padding)
    patches = extract_patches(xp, kh, kw, stride)
    w = weights[..., 0].astype(dt, copy=False)  # [kh, kw, C]
    out = None
    # accumulate kernel-position-major so every channel sees the same summation order
    for i in range(kh):
        for j in range(kw):
            term = patches[..., i, j] * w[i, j]
            out = term if out is None else out + term
    if bias is not None:
        out = out + bias.astype(dt, copy=False)
    return out


def batchnorm_inference(x: np.ndarray, gamma, beta, mean, var, eps: float) -> np.ndarray:
    var = np.asarray(var)
    if np.any(var < 0):
        raise ValueError("batchnorm: negative variance")
    dt = x.dtype
    scale = (np.asarray(gamma, np.float64) / np.sqrt(np.asarray(var, np.float64) + eps)).astype(dt)
    return (x - np.asarray(mean).astype(dt)) * scale + np.asarray(beta).astype(dt)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu6(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0, 6).astype(x.dtype, copy=False)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(1, 2), keepdims=True, dtype=x.dtype)


def dense(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    flat = x.reshape(x.shape[0], -1)
    out = flat @ weights.astype(x.dtype, copy=False)
    if bias is not None:
        out = out + bias.astype(x.dtype, copy=False)
    return out


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def apply_layer(layer, x: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "conv2d":
        return conv2d(x, layer.weights, layer.bias, layer.stride, layer.padding)
    if kind == "depthwise_conv2d":
        return depthwise_conv2d(x, layer.weights, layer.bias, layer.stride, layer.padding)
    if kind == "batchnorm":
        return batchnorm_inference(x, layer.gamma, layer.beta, layer.mean, layer.var, layer.eps)
    if kind == "activation":
        return relu(x) if layer.act == "relu" else relu6(x)
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    if kind == "dense":
        return dense(x, layer.weights, layer.bias)
    if kind == "softmax":
        return softmax(x)
    raise GraphError(f"unknown layer kind {kind!r}")


def forward(g: Graph, x: np.ndarray, trace: bool = False, dtype=np.float32):
    """Run ``g`` on a batch ``x`` of shape (N, H, W, C).

    Returns ``(output, trace)`` where ``trace`` maps layer index to that
    layer's output when requested, else ``None``.
    """
    x = np.asarray(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(g.input_shape[1:]):
        raise ValueError(f"input shape {x.shape} does not match graph input {g.input_shape}")
    x = x.astype(dtype, copy=False)
    acts = {} if trace else None
    for i, layer in enumerate(g.layers):
        x = apply_layer(layer, x)
        if trace:
            acts[i] = x
    return x, acts


def logits_index(g: Graph) -> int:
    """Index of the layer whose output feeds the final softmax (or the last layer)."""
    if g.layers and g.layers[-1].kind == "softmax":
        return len(g.layers) - 2
    return len(g.layers) - 1


def predict(g: Graph, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = []
    for start in range(0, len(images), batch_size):
        out, _ = forward(g, images[start:start + batch_size])
        preds.append(out.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


def accuracy(g: Graph, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(g, images) == labels))

