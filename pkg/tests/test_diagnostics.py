import json
import math

import numpy as np
import pytest

from qfnet.calib import collect_stats
from qfnet.diagnostics import (bn_alpha, dequantized_weights, export_figure_data, layer_degradation,
                               read_figure_data, sqnr_db, weight_channel_sqnr, write_report)
from qfnet.ir import build_baseline_mini
from qfnet.quantize import build_quantized_graph
from qfnet.trainer import init_weights
from qfnet.transforms import fold_batchnorm, inject_dead_channels


def _first_dw(g):
    return next(i for i, l in enumerate(g.layers) if l.kind == "depthwise_conv2d")


def test_injected_channel_alpha_with_classic_epsilon():
    g = init_weights(build_baseline_mini(), 0)
    dw = _first_dw(g)
    g.layers[dw + 1].eps = 1e-3
    rep = next(r for r in bn_alpha(inject_dead_channels(g, dw, [0])) if r.layer == dw + 1)
    assert rep.alpha[0] == pytest.approx(31.62, abs=0.01)
    assert rep.median == pytest.approx(1.0, abs=1e-3)
    assert rep.flagged == [0]


def test_uniform_bn_and_infinite_k_never_flag(baseline_graph):
    g = init_weights(build_baseline_mini(), 0)
    assert all(r.flagged == [] for r in bn_alpha(g))
    g2 = inject_dead_channels(g, _first_dw(g), [1])
    assert all(r.flagged == [] for r in bn_alpha(g2, k=math.inf))


def test_no_bn_layers_gives_empty_list(baseline_graph):
    assert bn_alpha(fold_batchnorm(baseline_graph)[0]) == []


def test_flagging_is_scale_invariant(baseline_graph):
    dw = _first_dw(baseline_graph)
    g = inject_dead_channels(baseline_graph, dw, [2, 5])
    before = [r.flagged for r in bn_alpha(g)]
    for layer in g.layers:
        if layer.kind == "batchnorm":
            layer.gamma = layer.gamma * np.float32(7.5)
    assert [r.flagged for r in bn_alpha(g)] == before
    assert before[0] == [2, 5]


def test_alpha_matches_fold_bit_for_bit(baseline_graph):
    _, rep = fold_batchnorm(baseline_graph)
    alphas = bn_alpha(baseline_graph)
    assert len(alphas) == len(rep.layers)
    for a, f in zip(alphas, rep.layers):
        assert a.layer == f.layer + 1
        assert a.alpha.tobytes() == f.alpha.tobytes()


def test_sqnr_tags():
    w = np.array([[0.5, 0.0], [0.25, 0.0]])
    s = weight_channel_sqnr(w, w.copy(), channel_axis=1)
    assert math.isinf(s[0]) and math.isnan(s[1])
    assert sqnr_db(np.ones(4), np.ones(4) * 1.1) == pytest.approx(20.0)


def test_injected_fold_sqnr_asymmetry(baseline_graph, images):
    dw = _first_dw(baseline_graph)
    g = fold_batchnorm(inject_dead_channels(baseline_graph, dw, [0]))[0]
    qg = build_quantized_graph(g, collect_stats(g, images))
    s = weight_channel_sqnr(g.layers[dw].weights, dequantized_weights(qg.layers[dw]), channel_axis=2)
    assert s[0] > 30
    assert np.nanmax(s[1:]) < 10


def test_degradation_localizes_first_bad_layer(baseline_graph, friendly_graph, images):
    dw = _first_dw(baseline_graph)
    bad = fold_batchnorm(inject_dead_channels(baseline_graph, dw, [0]))[0]
    rep = layer_degradation(bad, build_quantized_graph(bad, collect_stats(bad, images)), images)
    assert rep.first_below is not None and rep.first_below >= dw
    good = fold_batchnorm(friendly_graph)[0]
    rep2 = layer_degradation(good, build_quantized_graph(good, collect_stats(good, images)), images)
    assert rep2.agreement is not None
    assert min(s for i, k, s in rep2.layer_sqnr if k != "softmax") > rep.layer_sqnr[dw][2]


def test_zero_probe_does_not_crash(friendly_graph, images, tmp_path):
    g = fold_batchnorm(friendly_graph)[0]
    qg = build_quantized_graph(g, collect_stats(g, images))
    rep = layer_degradation(g, qg, np.zeros_like(images[:4]), labels=np.zeros(4, np.int64))
    doc = write_report(tmp_path / "r.json", bn_alpha(friendly_graph), rep, "m")
    assert json.loads((tmp_path / "r.json").read_text()) == json.loads(json.dumps(doc))
    assert doc["schema_version"] == 1


def test_figure_csv_round_trip_and_header(baseline_graph, images, tmp_path):
    rep = bn_alpha(baseline_graph)[0]
    export_figure_data(rep, tmp_path / "a.csv")
    header, rows = read_figure_data(tmp_path / "a.csv")
    assert header == ["channel_index", "alpha"]
    assert [a for _, a in rows] == rep.alpha.tolist()
    g = fold_batchnorm(baseline_graph)[0]
    deg = layer_degradation(g, build_quantized_graph(g, collect_stats(g, images)), images)
    export_figure_data(deg, tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "layer,sqnr_db"
    with pytest.raises(TypeError):
        export_figure_data(object(), tmp_path / "x.csv")


def test_healthy_friendly_layers_stay_above_20db(friendly_graph, images):
    g = fold_batchnorm(friendly_graph)[0]
    rep = layer_degradation(g, build_quantized_graph(g, collect_stats(g, images)), images)
    assert rep.first_below is None
    # pointwise convs carry the fused ReLU range and are compared after the ReLU
    assert min(s for _, _, s in rep.layer_sqnr) >= 20
