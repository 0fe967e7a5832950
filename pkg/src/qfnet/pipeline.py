"""End-to-end reproduction: data, training, rewrite, calibration, int8 eval, diagnosis, scoring.

Every stage writes its artifacts under the configured output directory,
so each can be rerun on its own through the CLI.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import bench, calib, diagnostics, float_engine as fe, int8_engine, model_io, synth, transforms
from .config import PipelineConfig
from .int8_engine import RequantMode
from .ir import build_baseline_mini, build_friendly_mini
from .quantize import build_quantized_graph
from .trainer import init_weights, train

log = logging.getLogger(__name__)

SUMMARY_VERSION = 1


class StageError(RuntimeError):
    def __init__(self, stage: str, out_dir: Path, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause} (artifacts kept in {out_dir})")


def write_history(history, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_acc"])
        for epoch, loss, acc in history:
            w.writerow([epoch, repr(loss), repr(acc)])


def _quantize(folded, calib_set, tag, out: Path):
    rec = calib.collect_stats(folded, calib_set)
    calib.save_stats(rec, out / "stats" / f"{tag}.bin")
    qg = build_quantized_graph(folded, rec)
    model_io.save_quantized(qg, out / "models" / f"{tag}_int8")
    return qg


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run every stage and return (and write) the JSON summary."""
    out = Path(cfg.out_dir)
    for sub in ("data", "models", "stats", "logs", "diagnostics", "bench"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    mode = RequantMode(cfg.quant.requant_mode)
    timings = {}
    state = {}

    def stage(name):
        def wrap(fn):
            t0 = time.perf_counter()
            try:
                state[name] = fn()
            except Exception as e:
                raise StageError(name, out, e) from e
            timings[name] = time.perf_counter() - t0
            log.info("stage %s done in %.1fs", name, timings[name])
            return state[name]
        return wrap

    @stage("gen-data")
    def _():
        splits = synth.generate(cfg.data)
        synth.save_splits(splits, out / "data")
        return dict(zip(synth.SPLITS, splits))

    data = state["gen-data"]
    train_set, val_set = data["train"], data["val"]

    def fit(arch, builder):
        g = init_weights(builder(cfg.arch), cfg.seed)
        g, hist = train(g, train_set, cfg.train, val=val_set)
        g.name = arch
        model_io.save_graph(g, out / "models" / arch)
        write_history(hist, out / "logs" / f"train_{arch}.csv")
        return g

    baseline = stage("train-baseline")(lambda: fit("baseline", build_baseline_mini))
    friendly = stage("train-friendly")(lambda: fit("friendly", build_friendly_mini))

    @stage("inject-dead")
    def _():
        g = transforms.inject_dead_channels(baseline, cfg.quant.dead_layer, cfg.quant.dead_channels)
        g.name = "baseline_dead"
        model_io.save_graph(g, out / "models" / "baseline_dead")
        return g

    dead = state["inject-dead"]

    @stage("fold-bn")
    def _():
        folded = {}
        for tag, g in (("baseline", baseline), ("baseline_dead", dead), ("friendly", friendly)):
            f, _ = transforms.fold_batchnorm(g)
            model_io.save_graph(f, out / "models" / f"{tag}_folded")
            folded[tag] = f
        return folded

    folded = state["fold-bn"]
    calib_set = train_set.per_class(cfg.calib.per_class)

    @stage("calibrate-quantize")
    def _():
        return {tag: _quantize(f, calib_set, tag, out) for tag, f in folded.items()}

    quantized = state["calibrate-quantize"]

    @stage("eval")
    def _():
        table = {}
        for tag in folded:
            f_acc = fe.accuracy(folded[tag], val_set.images, val_set.labels)
            q_pred = int8_engine.predict_quantized(quantized[tag], val_set.images, mode)
            f_pred = fe.predict(folded[tag], val_set.images)
            table[tag] = {
                "float": f_acc,
                "int8": float(np.mean(q_pred == val_set.labels)),
                "top1_agreement": float(np.mean(q_pred == f_pred)),
            }
        return table

    table = state["eval"]

    @stage("diagnose")
    def _():
        probe = val_set.subset(np.arange(min(len(val_set), 256)))
        res = {}
        for tag, src in (("baseline_dead", dead), ("friendly", friendly)):
            alphas = diagnostics.bn_alpha(src)
            deg = diagnostics.layer_degradation(folded[tag], quantized[tag], probe, mode=mode)
            diagnostics.write_report(out / "diagnostics" / f"{tag}.json", alphas, deg, tag)
            diagnostics.export_figure_data(deg, out / "diagnostics" / f"{tag}_layer_sqnr.csv")
            if alphas:
                diagnostics.export_figure_data(alphas[0], out / "diagnostics" / f"{tag}_alpha.csv")
            res[tag] = {
                "first_layer_below_threshold": deg.first_below,
                "flagged_channels": {str(a.layer): a.flagged for a in alphas if a.flagged},
            }
        return res

    @stage("bench-score")
    def _():
        hold = data["holdout"]
        n = min(cfg.bench.images, len(hold))
        imgs, labs = hold.images[:n], hold.labels[:n]
        scores = {}
        engines = {
            "float": lambda x: int(fe.forward(folded["friendly"], x)[0].argmax()),
            "int8": lambda x: int(int8_engine.forward_quantized(quantized["friendly"], x, mode)[1][0]),
        }
        for name, fn in engines.items():
            run = bench.measure_latency(fn, imgs, labs, cfg.bench.warmup, engine=name)
            bench.save_log(run, out / "bench" / f"friendly_{name}.csv")
            rep = bench.compute_score(run, cfg.bench.budget_ms)
            bench.save_score(rep, out / "bench" / f"friendly_{name}_score.json")
            scores[name] = rep.to_dict()
        return scores

    summary = {
        "summary_version": SUMMARY_VERSION,
        "config": cfg.to_dict(),
        "accuracy": table,
        "table2": {
            "baseline": {"float": table["baseline_dead"]["float"], "int8": table["baseline_dead"]["int8"]},
            "friendly": {"float": table["friendly"]["float"], "int8": table["friendly"]["int8"]},
        },
        "checks": trend_checks(table),
        "diagnostics": state["diagnose"],
        "bench": state["bench-score"],
        "timings_s": timings,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def trend_checks(table: dict) -> dict:
    """The desk-scale float-vs-int8 trends, as booleans with their margins in points."""
    pts = lambda a, b: 100.0 * (a - b)  # noqa: E731
    fr, base, dead = table["friendly"], table["baseline"], table["baseline_dead"]
    return {
        "friendly_int8_gap_pts": pts(fr["float"], fr["int8"]),
        "friendly_int8_within_2pts": abs(pts(fr["float"], fr["int8"])) <= 2.0,
        "dead_baseline_int8_drop_pts": pts(dead["float"], dead["int8"]),
        "dead_baseline_int8_drop_vs_clean_pts": pts(base["float"], dead["int8"]),
        "dead_baseline_drops_20pts": pts(dead["float"], dead["int8"]) >= 20.0,
        "friendly_vs_baseline_float_pts": pts(fr["float"], base["float"]),
        "friendly_float_within_2pts": abs(pts(fr["float"], base["float"])) <= 2.0,
    }


def strip_volatile(summary: dict) -> dict:
    """Summary without wall-clock dependent fields or the output location."""
    out = {k: v for k, v in summary.items() if k not in ("bench", "timings_s")}
    out["config"] = {k: v for k, v in summary["config"].items() if k != "out_dir"}
    return out
