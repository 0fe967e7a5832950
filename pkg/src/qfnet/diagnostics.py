"""Root-cause diagnostics for per-tensor quantization of separable convolutions.

Reports BN scale outliers, per-channel weight SQNR and per-layer
float-vs-int8 output SQNR. SQNR values are in dB; ``inf`` means an exact
reconstruction and ``nan`` marks a zero-signal channel or tensor.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import float_engine as fe
from .int8_engine import FLOAT_MULTIPLIER, RequantMode, forward_quantized
from .ir import Graph
from .quantize import QuantizedGraph
from .tensor import dequantize_array

REPORT_SCHEMA_VERSION = 1
DEFAULT_FLAG_FACTOR = 10.0
DEFAULT_SQNR_THRESHOLD_DB = 10.0


@dataclass
class AlphaReport:
    layer: int
    alpha: np.ndarray
    median: float
    flagged: list

    def to_dict(self) -> dict:
        return {"layer": self.layer, "alpha": self.alpha.tolist(), "median": self.median, "flagged": self.flagged}


def bn_alpha(g: Graph, k: float = DEFAULT_FLAG_FACTOR) -> list:
    """Per-channel BN scale of every batch-norm layer, flagging channels above ``k`` x median."""
    reports = []
    for i, layer in enumerate(g.layers):
        if layer.kind != "batchnorm":
            continue
        alpha = layer.alpha()
        med = float(np.median(alpha))
        flagged = [] if math.isinf(k) else [int(c) for c in np.flatnonzero(alpha > k * med)]
        reports.append(AlphaReport(i, alpha, med, flagged))
    return reports


def sqnr_db(signal: np.ndarray, approx: np.ndarray) -> float:
    s = np.asarray(signal, np.float64)
    p_sig = float(np.sum(s * s))
    p_err = float(np.sum((s - np.asarray(approx, np.float64)) ** 2))
    if p_sig == 0:
        return math.nan
    if p_err == 0:
        return math.inf
    return 10.0 * math.log10(p_sig / p_err)


def weight_channel_sqnr(float_w: np.ndarray, quant_w: np.ndarray, channel_axis: int = -1) -> np.ndarray:
    """SQNR per output channel between float weights and their dequantized codes."""
    f = np.moveaxis(np.asarray(float_w, np.float64), channel_axis, 0)
    q = np.moveaxis(np.asarray(quant_w, np.float64), channel_axis, 0)
    return np.array([sqnr_db(f[c], q[c]) for c in range(f.shape[0])])


def channel_axis_for(kind: str) -> int:
    return {"conv2d": 3, "depthwise_conv2d": 2, "dense": 1}[kind]


def dequantized_weights(qlayer) -> np.ndarray:
    return dequantize_array(qlayer.weights, qlayer.w_qparams)


def _fmt(x: float):
    """JSON-safe SQNR value."""
    if math.isnan(x):
        return "zero_signal"
    if math.isinf(x):
        return "exact"
    return x


@dataclass
class DegradationReport:
    layer_sqnr: list  # (layer index, kind, sqnr_db)
    weight_sqnr: dict  # layer index -> per-channel sqnr array
    first_below: Optional[int]
    threshold_db: float
    float_top1: Optional[float] = None
    int8_top1: Optional[float] = None
    agreement: Optional[float] = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "layers": [{"layer": i, "kind": k, "sqnr_db": _fmt(s)} for i, k, s in self.layer_sqnr],
            "weights": {str(i): [_fmt(s) for s in v] for i, v in self.weight_sqnr.items()},
            "first_below_threshold": self.first_below,
            "threshold_db": self.threshold_db,
            "float_top1": self.float_top1,
            "int8_top1": self.int8_top1,
            "top1_agreement": self.agreement,
            "notes": self.notes,
        }


def layer_degradation(g_float: Graph, qg: QuantizedGraph, probe, labels: Optional[np.ndarray] = None,
                      threshold_db: float = DEFAULT_SQNR_THRESHOLD_DB,
                      mode: RequantMode = FLOAT_MULTIPLIER) -> DegradationReport:
    """Compare float and int8 traces layer by layer on ``probe`` images (array or Dataset)."""
    if labels is None and hasattr(probe, "labels"):
        labels = probe.labels
    images = getattr(probe, "images", probe)
    if len(g_float.layers) != len(qg.layers):
        raise ValueError("float and quantized graphs must have matching layer lists")
    f_out, f_trace = fe.forward(g_float, images, trace=True)
    _, q_pred, q_trace = forward_quantized(qg, images, mode, trace=True)
    layer_sqnr = []
    first_below = None
    for i, layer in enumerate(g_float.layers):
        ft = f_trace[i]
        qt = q_trace[i]
        nxt = g_float.layers[i + 1] if i + 1 < len(g_float.layers) else None
        if layer.kind in ("conv2d", "depthwise_conv2d", "dense") and nxt is not None and nxt.kind == "activation":
            # the int8 layer carries the fused activation's output range
            ft = f_trace[i + 1]
        approx = qt if isinstance(qt, np.ndarray) else dequantize_array(qt.data, qt.qparams)
        s = sqnr_db(ft, approx)
        layer_sqnr.append((i, layer.kind, s))
        if first_below is None and not math.isnan(s) and s < threshold_db:
            first_below = i
    weight_sqnr = {}
    for i, (fl, ql) in enumerate(zip(g_float.layers, qg.layers)):
        if fl.kind in ("conv2d", "depthwise_conv2d", "dense"):
            weight_sqnr[i] = weight_channel_sqnr(fl.weights, dequantized_weights(ql), channel_axis_for(fl.kind))
    report = DegradationReport(layer_sqnr, weight_sqnr, first_below, threshold_db,
                               notes=["conv/dense layers followed by an activation are compared after it"])
    f_pred = f_out.argmax(axis=1)
    report.agreement = float(np.mean(f_pred == q_pred))
    if labels is not None:
        report.float_top1 = float(np.mean(f_pred == labels))
        report.int8_top1 = float(np.mean(q_pred == labels))
    return report


def export_figure_data(report, path) -> None:
    """CSV of (channel_index, alpha) for an ``AlphaReport`` or (layer, sqnr_db) for a ``DegradationReport``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if isinstance(report, AlphaReport):
            w.writerow(["channel_index", "alpha"])
            for c, a in enumerate(report.alpha):
                w.writerow([c, repr(float(a))])
        elif isinstance(report, DegradationReport):
            w.writerow(["layer", "sqnr_db"])
            for i, _, s in report.layer_sqnr:
                w.writerow([i, repr(float(s))])
        else:
            raise TypeError(f"cannot export {type(report).__name__}")


def read_figure_data(path) -> tuple:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], [(int(r[0]), float(r[1])) for r in rows[1:]]


def write_report(path, alpha_reports: list, degradation: Optional[DegradationReport] = None,
                 model: str = "") -> dict:
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "model": model,
        "bn_alpha": [r.to_dict() for r in alpha_reports],
        "degradation": degradation.to_dict() if degradation is not None else None,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc
