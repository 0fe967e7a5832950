"""Independent reference computations shared by unit and acceptance tests."""

import numpy as np

from qfnet.trainer import activation_gates, batch_loss, cast_graph, loss_and_grads

FD_STEP = 1e-3
# relative error is |a - n| / max(|a|, |n|, floor); the floor keeps coordinates
# whose true gradient is ~0 from dividing noise by noise
FD_FLOOR = 1e-6


def relative_error(a, n, floor=FD_FLOOR):
    return abs(a - n) / max(abs(a), abs(n), floor)


def _same_gates(a, b):
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def _central_difference(g64, x, y, base_gates, perturb, step):
    """(numeric derivative, smooth) for the coordinate ``perturb(delta)`` moves.

    ``smooth`` is False when an activation gate flips anywhere in the
    interval ends, i.e. the difference straddles a ReLU/ReLU6 kink.
    """
    restore = perturb(step)
    lp, gp = batch_loss(g64, x(), y), activation_gates(g64, x())
    restore()
    restore = perturb(-step)
    lm, gm = batch_loss(g64, x(), y), activation_gates(g64, x())
    restore()
    smooth = _same_gates(gp, base_gates) and _same_gates(gm, base_gates)
    return (lp - lm) / (2 * step), smooth


def _run(g64, xs, y, analytic_at, coords, samples, rng, step, max_draws):
    base = activation_gates(g64, xs)
    worst, checked, skipped = 0.0, 0, 0
    while checked < samples:
        if checked + skipped >= max_draws:
            raise RuntimeError(f"only {checked} smooth coordinates in {max_draws} draws")
        arr, idx, analytic = coords(rng)

        def perturb(d, arr=arr, idx=idx):
            orig = arr[idx]
            arr[idx] = orig + d

            def restore():
                arr[idx] = orig
            return restore

        num, smooth = _central_difference(g64, lambda: xs, y, base, perturb, step)
        if not smooth:
            skipped += 1
            continue
        checked += 1
        worst = max(worst, relative_error(analytic_at(analytic), num))
    return worst, skipped


def fd_check(g, x, y, kind, samples=100, seed=0, step=FD_STEP, max_draws=1000):
    """Worst relative error between analytic and central-difference gradients
    over ``samples`` smooth coordinates of the trainable parameters of ``kind`` layers.

    Returns ``(worst, skipped)``; ``skipped`` counts draws rejected for crossing a kink.
    """
    g64 = cast_graph(g, np.float64)
    xs = np.asarray(x, np.float64)
    _, grads, _ = loss_and_grads(g64, xs, y, dtype=np.float64)
    slots = [(i, name) for i, l in enumerate(g64.layers) if l.kind == kind for name in grads[i]]
    if not slots:
        raise ValueError(f"no trainable {kind} layers")
    sizes = np.array([getattr(g64.layers[i], name).size for i, name in slots], np.float64)

    def coords(rng):
        i, name = slots[rng.choice(len(slots), p=sizes / sizes.sum())]
        arr = getattr(g64.layers[i], name)
        idx = np.unravel_index(int(rng.integers(arr.size)), arr.shape)
        return arr, idx, float(grads[i][name][idx])

    return _run(g64, xs, y, float, coords, samples, np.random.default_rng(seed), step, max_draws)


def fd_input_check(g, x, y, samples=100, seed=0, step=FD_STEP, max_draws=1000):
    """The same check for the gradient with respect to the input batch."""
    g64 = cast_graph(g, np.float64)
    xs = np.array(x, np.float64)
    dx = loss_and_grads(g64, xs, y, dtype=np.float64, input_grad=True)[3]

    def coords(rng):
        idx = np.unravel_index(int(rng.integers(xs.size)), xs.shape)
        return xs, idx, float(dx[idx])

    return _run(g64, xs, y, float, coords, samples, np.random.default_rng(seed), step, max_draws)


HIST_FAMILIES = ("gaussian", "laplace", "uniform", "relu_gaussian", "bimodal", "outlier")
UNIMODAL = ("gaussian", "laplace", "uniform", "relu_gaussian")


def random_values(rng, family, n=20_000):
    """Samples from one of a few activation/weight-like distributions."""
    loc, scale = rng.normal(0, 1), rng.uniform(0.1, 3.0)
    if family == "gaussian":
        return rng.normal(loc, scale, n)
    if family == "laplace":
        return rng.laplace(loc, scale, n)
    if family == "uniform":
        return rng.uniform(loc - scale, loc + scale, n)
    if family == "relu_gaussian":
        return np.maximum(rng.normal(loc, scale, n), 0)
    if family == "bimodal":
        half = n // 2
        return np.concatenate([rng.normal(loc, scale, half), rng.normal(loc + rng.uniform(3, 10) * scale, scale, n - half)])
    if family == "outlier":
        v = rng.normal(loc, scale, n)
        k = max(1, int(n * rng.uniform(1e-4, 1e-2)))
        v[:k] = loc + rng.choice([-1, 1]) * rng.uniform(20, 100) * scale
        return v
    raise ValueError(family)


def direct_clip_loss(stats, clip_min, clip_max):
    """(quantization, saturation) by quantizing every bin center literally."""
    from qfnet.tensor import choose_qparams_from_range, dequantize_value, quantize_value

    q = choose_qparams_from_range(clip_min, clip_max)
    quant = sat = 0.0
    for c, w in zip(stats.bin_centers(), stats.counts):
        if w == 0:
            continue
        err = w * (dequantize_value(quantize_value(c, q), q) - c) ** 2
        if c < q.real_min or c > q.real_max:
            sat += err
        else:
            quant += err
    return quant, sat


def random_healthy_graph(seed):
    """A small trained-looking graph: random widths, He weights, random BN statistics, folded."""
    from qfnet.ir import ArchSpec, build_baseline_mini, build_friendly_mini
    from qfnet.trainer import init_weights
    from qfnet.transforms import fold_batchnorm

    rng = np.random.default_rng(seed)
    nblocks = int(rng.integers(1, 4))
    spec = ArchSpec(input_size=int(rng.choice([6, 8, 10])), num_classes=int(rng.integers(2, 6)),
                    stem_channels=int(rng.integers(2, 7)),
                    block_channels=tuple(int(c) for c in rng.integers(2, 9, nblocks)),
                    block_strides=tuple(int(s) for s in rng.integers(1, 3, nblocks)))
    builder = build_baseline_mini if rng.random() < 0.5 else build_friendly_mini
    g = init_weights(builder(spec), seed)
    for layer in g.layers:
        if layer.kind == "batchnorm":
            c = layer.channels
            layer.gamma = rng.uniform(0.5, 1.5, c).astype(np.float32)
            layer.beta = rng.normal(0, 0.3, c).astype(np.float32)
            layer.mean = rng.normal(0, 0.3, c).astype(np.float32)
            layer.var = rng.uniform(0.3, 2.0, c).astype(np.float32)
        elif layer.bias is not None if hasattr(layer, "bias") else False:
            layer.bias = rng.normal(0, 0.1, layer.bias.shape).astype(np.float32)
    return fold_batchnorm(g)[0], spec


def per_layer_oracle_errors(g_float, qg, images, mode=None):
    """Worst |int8 - oracle| / delta_out per quantized layer.

    The oracle runs the float op on the int8 engine's own (dequantized)
    input with dequantized weights and bias, then clamps to the output's
    representable range, which is what any 8-bit output can hold.
    """
    from qfnet import float_engine as fe
    from qfnet.int8_engine import FLOAT_MULTIPLIER, forward_quantized
    from qfnet.tensor import dequantize_array

    mode = mode or FLOAT_MULTIPLIER
    _, _, tr = forward_quantized(qg, images, mode, trace=True)
    prev = dequantize_array(*_codes(qg.input_qparams, images))
    worst = []
    for i, (fl, ql) in enumerate(zip(g_float.layers, qg.layers)):
        out = tr[i]
        if ql.kind == "softmax":
            break
        if ql.kind in ("conv2d", "depthwise_conv2d", "dense"):
            w = dequantize_array(ql.weights, ql.w_qparams)
            b = ql.bias.astype(np.float64) * ql.bias_delta
            if ql.kind == "conv2d":
                ref = fe.conv2d(prev, w, b, ql.stride, ql.padding)
            elif ql.kind == "depthwise_conv2d":
                ref = fe.depthwise_conv2d(prev, w, b, ql.stride, ql.padding)
            else:
                ref = fe.dense(prev, w, b)
        elif ql.kind == "activation":
            ref = fe.relu(prev) if ql.act == "relu" else fe.relu6(prev)
        else:
            ref = fe.global_avg_pool(prev)
        q = out.qparams
        ref = np.clip(ref, q.real_min, q.real_max)
        got = dequantize_array(out.data, q)
        worst.append(float(np.max(np.abs(got - ref)) / q.delta))
        prev = got
    return worst


def _codes(q, x):
    from qfnet.tensor import quantize_array
    return quantize_array(x, q), q
