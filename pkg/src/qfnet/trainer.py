"""Minibatch SGD with momentum for the mini architectures.

Training-mode batch norm uses batch statistics and keeps moving averages
that are written back into the graph for inference. Everything runs on a
single thread, with randomness drawn from named sub-streams of the seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import float_engine as fe
from .ir import Graph, layer_tensors, same_padding
from .synth import Dataset, named_rng

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    weight_decay: float = 1e-4
    seed: int = 0
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate, momentum and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.bn_momentum < 1:
            raise ValueError("bn_momentum must be in [0, 1)")


def init_weights(g: Graph, seed: int) -> Graph:
    """He-normal conv/dense weights, zero biases, identity batch norm."""
    g = g.copy()
    rng = named_rng(seed, "init")
    for layer in g.layers:
        if layer.kind in ("conv2d", "depthwise_conv2d", "dense"):
            w = layer.weights
            if layer.kind == "conv2d":
                fan_in = w.shape[0] * w.shape[1] * w.shape[2]
            elif layer.kind == "depthwise_conv2d":
                fan_in = w.shape[0] * w.shape[1]
            else:
                fan_in = w.shape[0]
            layer.weights = (rng.standard_normal(w.shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
            if layer.bias is not None:
                layer.bias = np.zeros_like(layer.bias, dtype=np.float32)
        elif layer.kind == "batchnorm":
            c = layer.channels
            layer.gamma = np.ones(c, np.float32)
            layer.beta = np.zeros(c, np.float32)
            layer.mean = np.zeros(c, np.float32)
            layer.var = np.ones(c, np.float32)
    g.seed = seed
    return g


def cast_graph(g: Graph, dtype) -> Graph:
    """Copy of ``g`` with every parameter array cast to ``dtype``."""
    g = g.copy()
    for layer in g.layers:
        for name, arr in layer_tensors(layer).items():
            setattr(layer, name, arr.astype(dtype))
    return g


# --- forward/backward ---------------------------------------------------------


def _forward_layer(layer, x):
    """Training-mode forward; returns (output, cache)."""
    kind = layer.kind
    if kind == "conv2d":
        kh, kw, cin, cout = layer.weights.shape
        xp = fe.pad_input(x, kh, kw, layer.stride, layer.padding)
        patches = fe.extract_patches(xp, kh, kw, layer.stride)
        n, oh, ow = patches.shape[:3]
        cols = patches.reshape(n * oh * ow, cin * kh * kw)
        wmat = layer.weights.astype(x.dtype, copy=False).transpose(2, 0, 1, 3).reshape(-1, cout)
        out = (cols @ wmat).reshape(n, oh, ow, cout)
        if layer.bias is not None:
            out = out + layer.bias.astype(x.dtype, copy=False)
        return out, (x.shape, xp.shape, cols, wmat)
    if kind == "depthwise_conv2d":
        kh, kw = layer.kernel
        xp = fe.pad_input(x, kh, kw, layer.stride, layer.padding)
        out = fe.depthwise_conv2d(x, layer.weights, layer.bias, layer.stride, layer.padding)
        return out, (x.shape, xp)
    if kind == "batchnorm":
        mu = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        inv = 1.0 / np.sqrt(var + layer.eps)
        xhat = (x - mu) * inv
        out = xhat * layer.gamma.astype(x.dtype, copy=False) + layer.beta.astype(x.dtype, copy=False)
        return out, (xhat, inv, mu, var)
    if kind == "activation":
        return fe.apply_layer(layer, x), x
    if kind == "global_avg_pool":
        return fe.global_avg_pool(x), x.shape
    if kind == "dense":
        return fe.dense(x, layer.weights, layer.bias), x
    raise ValueError(f"cannot train through layer kind {kind!r}")


def _place(dxp, d, i, j, stride, oh, ow):
    dxp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride, :] += d


def _crop(dxp, x_shape, layer):
    if layer.padding == "valid":
        return dxp[:, :x_shape[1], :x_shape[2], :]
    kh, kw = layer.kernel
    ph = same_padding(x_shape[1], kh, layer.stride)[0]
    pw = same_padding(x_shape[2], kw, layer.stride)[0]
    return dxp[:, ph:ph + x_shape[1], pw:pw + x_shape[2], :]


def _backward_layer(layer, cache, gout):
    """Returns (grad wrt input, dict of parameter grads)."""
    kind = layer.kind
    if kind == "conv2d":
        x_shape, xp_shape, cols, wmat = cache
        kh, kw, cin, cout = layer.weights.shape
        n, oh, ow, _ = gout.shape
        g2 = gout.reshape(-1, cout)
        dw = (cols.T @ g2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        grads = {"weights": dw}
        if layer.bias is not None:
            grads["bias"] = g2.sum(axis=0)
        dcols = (g2 @ wmat.T).reshape(n, oh, ow, cin, kh, kw)
        dxp = np.zeros(xp_shape, gout.dtype)
        for i in range(kh):
            for j in range(kw):
                _place(dxp, dcols[..., i, j], i, j, layer.stride, oh, ow)
        return _crop(dxp, x_shape, layer), grads
    if kind == "depthwise_conv2d":
        x_shape, xp = cache
        kh, kw = layer.kernel
        n, oh, ow, c = gout.shape
        patches = fe.extract_patches(xp, kh, kw, layer.stride)
        w = layer.weights[..., 0].astype(gout.dtype, copy=False)
        dw = np.empty((kh, kw, c, 1), gout.dtype)
        dxp = np.zeros(xp.shape, gout.dtype)
        for i in range(kh):
            for j in range(kw):
                dw[i, j, :, 0] = (gout * patches[..., i, j]).sum(axis=(0, 1, 2))
                _place(dxp, gout * w[i, j], i, j, layer.stride, oh, ow)
        grads = {"weights": dw}
        if layer.bias is not None:
            grads["bias"] = gout.sum(axis=(0, 1, 2))
        return _crop(dxp, x_shape, layer), grads
    if kind == "batchnorm":
        xhat, inv, _, _ = cache
        m = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
        dgamma = (gout * xhat).sum(axis=(0, 1, 2))
        dbeta = gout.sum(axis=(0, 1, 2))
        gamma = layer.gamma.astype(gout.dtype, copy=False)
        dx = (gamma * inv / m) * (m * gout - dbeta - xhat * dgamma)
        return dx, {"gamma": dgamma, "beta": dbeta}
    if kind == "activation":
        x = cache
        if layer.act == "relu":
            return gout * (x > 0), {}
        return gout * ((x > 0) & (x < 6)), {}
    if kind == "global_avg_pool":
        n, h, w, c = cache
        return np.broadcast_to(gout / (h * w), (n, h, w, c)).astype(gout.dtype), {}
    if kind == "dense":
        x = cache
        flat = x.reshape(x.shape[0], -1)
        grads = {"weights": flat.T @ gout}
        if layer.bias is not None:
            grads["bias"] = gout.sum(axis=0)
        dx = (gout @ layer.weights.astype(gout.dtype, copy=False).T).reshape(x.shape)
        return dx, grads
    raise ValueError(f"cannot train through layer kind {kind!r}")


def _trainable_layers(g: Graph) -> list:
    layers = g.layers
    if layers and layers[-1].kind == "softmax":
        layers = layers[:-1]
    return layers


def loss_and_grads(g: Graph, x: np.ndarray, y: np.ndarray, dtype=np.float32, input_grad: bool = False):
    """Cross-entropy of the graph's logits against ``y`` and all parameter gradients.

    Returns ``(loss, grads, batch_stats)`` where ``grads[i]`` maps parameter
    names of layer ``i`` to their gradient and ``batch_stats[i]`` holds
    ``(mean, var)`` for each batch-norm layer. With ``input_grad`` the
    gradient with respect to ``x`` is appended as a fourth element.
    """
    x = np.asarray(x).astype(dtype, copy=False)
    layers = _trainable_layers(g)
    caches = []
    for layer in layers:
        x, cache = _forward_layer(layer, x)
        caches.append(cache)
    logits = x
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), y]))
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss}")
    gout = np.exp(z - lse[:, None])
    gout[np.arange(n), y] -= 1
    gout = (gout / n).astype(dtype)
    grads = [dict() for _ in g.layers]
    batch_stats = {}
    for i in range(len(layers) - 1, -1, -1):
        gout, grads[i] = _backward_layer(layers[i], caches[i], gout)
        if layers[i].kind == "batchnorm":
            batch_stats[i] = (caches[i][2], caches[i][3])
    if input_grad:
        return loss, grads, batch_stats, gout
    return loss, grads, batch_stats


def batch_loss(g: Graph, x: np.ndarray, y: np.ndarray, dtype=np.float64) -> float:
    """Training-mode loss only (batch-statistics BN); used by finite-difference checks."""
    x = np.asarray(x).astype(dtype, copy=False)
    for layer in _trainable_layers(g):
        x, _ = _forward_layer(layer, x)
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def activation_gates(g: Graph, x: np.ndarray, dtype=np.float64) -> list:
    """Training-mode pass-through masks of every activation layer.

    Finite-difference checks use these to reject steps that cross a kink.
    """
    x = np.asarray(x).astype(dtype, copy=False)
    gates = []
    for layer in _trainable_layers(g):
        if layer.kind == "activation":
            gates.append((x > 0) & (x < 6) if layer.act == "relu6" else x > 0)
        x, _ = _forward_layer(layer, x)
    return gates


# --- optimizer ------------------------------------------------------------------


@dataclass
class TrainState:
    graph: Graph
    velocity: list = field(default_factory=list)
    step: int = 0
    epoch: int = 0

    @classmethod
    def start(cls, g: Graph) -> "TrainState":
        g = g.copy()
        velocity = [{k: np.zeros_like(v) for k, v in layer_tensors(l).items()} for l in g.layers]
        return cls(g, velocity)


_DECAYED = {("conv2d", "weights"), ("depthwise_conv2d", "weights"), ("dense", "weights")}


def sgd_step(state: TrainState, grads: list, config: TrainConfig, batch_stats: Optional[dict] = None) -> TrainState:
    """Classical momentum SGD with L2 weight decay on conv/dense kernels, in place."""
    lr = np.float32(config.learning_rate)
    mom = np.float32(config.momentum)
    wd = np.float32(config.weight_decay)
    for i, layer in enumerate(state.graph.layers):
        for name, v in state.velocity[i].items():
            p = getattr(layer, name)
            grad = grads[i].get(name)
            grad = np.zeros_like(p) if grad is None else grad.astype(np.float32, copy=False)
            if (layer.kind, name) in _DECAYED:
                grad = grad + wd * p
            v *= mom
            v += grad
            setattr(layer, name, (p - lr * v).astype(np.float32))
    bm = np.float32(config.bn_momentum)
    for i, (mu, var) in (batch_stats or {}).items():
        layer = state.graph.layers[i]
        layer.mean = (bm * layer.mean + (1 - bm) * mu).astype(np.float32)
        layer.var = (bm * layer.var + (1 - bm) * var).astype(np.float32)
    state.step += 1
    return state


def train(g: Graph, data: Dataset, config: TrainConfig = TrainConfig(), val: Optional[Dataset] = None,
          divergence_threshold: float = 1e3):
    """Train ``g`` on ``data``; returns (inference-ready graph, history).

    ``history`` holds one ``(epoch, mean_loss, val_acc)`` tuple per epoch;
    ``val_acc`` is NaN when no validation set is given.
    """
    if config.batch_size > len(data):
        raise ValueError(f"batch_size {config.batch_size} exceeds training set size {len(data)}")
    state = TrainState.start(g)
    rng = named_rng(config.seed, "shuffle")
    history = []
    images = data.images.astype(np.float32, copy=False)
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order) - config.batch_size + 1, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads, stats = loss_and_grads(state.graph, images[idx], data.labels[idx])
            if loss > divergence_threshold:
                raise TrainingDiverged(f"loss {loss:.3g} at epoch {epoch}, step {state.step}")
            sgd_step(state, grads, config, stats)
            losses.append(loss)
        state.epoch = epoch + 1
        val_acc = fe.accuracy(state.graph, val.images, val.labels) if val is not None else float("nan")
        history.append((epoch + 1, float(np.mean(losses)), val_acc))
        log.info("epoch %d loss %.4f val_acc %.4f", epoch + 1, history[-1][1], val_acc)
    return state.graph, history
