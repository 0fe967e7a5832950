import numpy as np
import pytest

from qfnet.ir import (ArchSpec, BatchNorm, Conv2D, Dense, GlobalAvgPool, Graph, GraphError, Softmax,
                      build_baseline_mini, build_friendly_mini, graphs_equal, infer_shapes)


def test_stem_conv_same_padding_shape():
    g = Graph((1, 16, 16, 1), [Conv2D(np.zeros((3, 3, 1, 8), np.float32), None, 2, "same"),
                               GlobalAvgPool(), Dense(np.zeros((8, 10), np.float32), None), Softmax()])
    shapes = infer_shapes(g)
    assert shapes[0] == (1, 8, 8, 8)
    assert shapes[1] == (1, 1, 1, 8)
    assert shapes[-1] == (1, 10)


def test_pool_on_4x4x32():
    g = Graph((1, 4, 4, 32), [GlobalAvgPool(), Dense(np.zeros((32, 10), np.float32), None), Softmax()])
    assert infer_shapes(g)[0] == (1, 1, 1, 32)


def test_channel_mismatch_names_layer():
    g = Graph((1, 8, 8, 3), [Conv2D(np.zeros((3, 3, 2, 4), np.float32), None, 1, "same"),
                             GlobalAvgPool(), Dense(np.zeros((4, 2), np.float32), None)])
    with pytest.raises(GraphError) as e:
        infer_shapes(g)
    assert e.value.layer == 0


def test_negative_variance_rejected():
    bn = BatchNorm(np.ones(2, np.float32), np.zeros(2, np.float32), np.zeros(2, np.float32),
                   np.array([1.0, -1.0], np.float32))
    g = Graph((1, 4, 4, 2), [bn, GlobalAvgPool(), Dense(np.zeros((2, 2), np.float32), None)])
    with pytest.raises(GraphError, match="variance"):
        infer_shapes(g)


def test_graph_must_end_rank2():
    g = Graph((1, 4, 4, 2), [GlobalAvgPool()])
    with pytest.raises(GraphError, match="rank-2"):
        infer_shapes(g)


def test_baseline_default_has_22_layers():
    g = build_baseline_mini()
    assert len(g.layers) == 22
    kinds = [l.kind for l in g.layers]
    block = ["depthwise_conv2d", "batchnorm", "activation", "conv2d", "batchnorm", "activation"]
    assert kinds == ["conv2d"] + block * 3 + ["global_avg_pool", "dense", "softmax"]
    assert all(l.bias is None for l in g.layers if l.kind == "depthwise_conv2d")


def test_friendly_blocks_and_no_relu6():
    g = build_friendly_mini()
    kinds = [l.kind for l in g.layers]
    assert kinds[1:-3] == ["depthwise_conv2d", "conv2d", "batchnorm", "activation"] * 3
    assert not any(l.kind == "activation" and l.act == "relu6" for l in g.layers)
    assert all(l.bias is not None for l in g.layers if l.kind == "depthwise_conv2d")


def test_class_count_and_zero_blocks():
    g = build_baseline_mini(ArchSpec(num_classes=2))
    assert g.layers[-2].weights.shape[1] == 2
    g = build_baseline_mini(ArchSpec(block_channels=(), block_strides=()))
    assert [l.kind for l in g.layers] == ["conv2d", "global_avg_pool", "dense", "softmax"]


def test_zero_width_rejected():
    with pytest.raises(ValueError):
        ArchSpec(block_channels=(16, 0, 32))


@pytest.mark.parametrize("spec", [ArchSpec(), ArchSpec(input_size=12, num_classes=3, block_channels=(4, 8),
                                                       block_strides=(2, 2))])
def test_drop_in_replacement_shapes(spec):
    b, f = infer_shapes(build_baseline_mini(spec)), infer_shapes(build_friendly_mini(spec))
    assert b[-1] == f[-1]
    assert build_baseline_mini(spec).input_shape == build_friendly_mini(spec).input_shape


def test_graphs_equal_detects_change(baseline_graph):
    other = baseline_graph.copy()
    assert graphs_equal(baseline_graph, other)
    other.layers[0].weights[0, 0, 0, 0] += 1.0
    assert not graphs_equal(baseline_graph, other)
    assert graphs_equal(baseline_graph, other, check_values=False)
