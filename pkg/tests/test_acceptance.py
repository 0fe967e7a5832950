"""Acceptance criteria 1-7 at their stated tolerances.

Each test records one pass/fail line, printed in the terminal summary.
The default pipeline runs once per session and is shared by criteria 2, 4,
6 and 7.
"""

import time
from pathlib import Path

import numpy as np
import pytest

import golden
from _oracles import (HIST_FAMILIES, UNIMODAL, fd_check, fd_input_check, per_layer_oracle_errors,
                      random_healthy_graph, random_values)
from conftest import ACCEPTANCE
from qfnet import float_engine as fe
from qfnet.bench import RunLog, compute_score, load_log, save_log
from qfnet.calib import brute_force_search, collect_stats, greedy_search, load_stats, save_stats, stats_from_values
from qfnet.config import validate_config
from qfnet.diagnostics import dequantized_weights, weight_channel_sqnr
from qfnet.int8_engine import predict_quantized
from qfnet.ir import ArchSpec, build_baseline_mini, build_friendly_mini
from qfnet.model_io import load_graph, load_quantized, quantized_equal, save_graph, save_quantized
from qfnet.pipeline import run_pipeline, strip_volatile
from qfnet.quantize import build_quantized_graph
from qfnet.synth import load_dataset, load_split, save_dataset
from qfnet.trainer import init_weights


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("default_run")
    cfg = validate_config(None, {("pipeline", "out_dir"): str(out)})
    t0 = time.perf_counter()
    summary = run_pipeline(cfg)
    return out, summary, time.perf_counter() - t0


def _synthetic_log(n, correct_fraction, latency_ms):
    k = int(round(correct_fraction * n))
    return RunLog(np.arange(n), np.full(n, latency_ms), np.where(np.arange(n) < k, 0, 1), np.zeros(n))


def test_criterion_1_score_arithmetic():
    t0 = time.perf_counter()
    val = compute_score(_synthetic_log(20000, 0.64705, 28.0)).accuracy_per_time
    hold = compute_score(_synthetic_log(10927, 0.72673, 27.0)).accuracy_per_time
    dt = time.perf_counter() - t0
    ok = abs(val - 1.08e-6) <= 1e-8 and abs(hold - 2.22e-6) <= 1e-8
    record(1, ok, f"validation {val:.4e}/ms, holdout {hold:.4e}/ms ({dt * 1e3:.1f} ms)")


def test_criterion_2_trends(default_run):
    _, summary, secs = default_run
    t = summary["table2"]
    fr_gap = 100 * abs(t["friendly"]["float"] - t["friendly"]["int8"])
    drop = 100 * (t["baseline"]["float"] - t["baseline"]["int8"])
    clean = summary["accuracy"]["baseline"]["float"]
    fl_gap = 100 * abs(t["friendly"]["float"] - clean)
    ok = fr_gap <= 2 and drop >= 20 and fl_gap <= 2 and secs <= 600
    record(2, ok, f"(a) friendly int8 gap {fr_gap:.1f} pts, (b) dead baseline drop {drop:.1f} pts, "
                  f"(c) friendly vs baseline float {fl_gap:.1f} pts, pipeline {secs:.0f} s")


def test_criterion_3_greedy_vs_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, mismatches, unimodal = 1.0, 0, 0
    for i in range(1000):
        family = HIST_FAMILIES[i % len(HIST_FAMILIES)]
        s = stats_from_values(random_values(rng, family, int(rng.integers(500, 20000))))
        g, b = greedy_search(s), brute_force_search(s)
        ratio = g.loss / b.loss if b.loss > 0 else (1.0 if g.loss == 0 else np.inf)
        worst = max(worst, ratio)
        if family in UNIMODAL:
            unimodal += 1
            mismatches += g.loss != b.loss
    dt = time.perf_counter() - t0
    ok = worst <= 1.05 and mismatches == 0 and dt <= 30
    record(3, ok, f"worst greedy/brute loss {worst:.6f}, unimodal mismatches {mismatches}/{unimodal}, {dt:.1f} s")


def test_criterion_4_engine_equivalence(default_run):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        g, spec = random_healthy_graph(seed)
        x = np.random.default_rng(1000 + seed).uniform(0, 1, (16, spec.input_size, spec.input_size, 1))
        x = x.astype(np.float32)
        qg = build_quantized_graph(g, collect_stats(g, x[:8]))
        worst = max(worst, max(per_layer_oracle_errors(g, qg, x)))
    out, _, _ = default_run
    val = load_split(out / "data", "val")
    images = val.images[:1000]
    agree = float(np.mean(fe.predict(load_graph(out / "models" / "friendly_folded"), images)
                          == predict_quantized(load_quantized(out / "models" / "friendly_int8"), images)))
    dt = time.perf_counter() - t0
    ok = worst <= 2.0 and agree >= 0.99 and len(images) == 1000 and dt <= 120
    record(4, ok, f"worst per-layer error {worst:.3f} x delta_out over 100 graphs, "
                  f"friendly top-1 agreement {agree:.3f} on {len(images)} images, {dt:.1f} s")


def test_criterion_5_gradients():
    t0 = time.perf_counter()
    spec = ArchSpec(input_size=8, num_classes=4, stem_channels=4, block_channels=(6, 8), block_strides=(1, 2))
    rng = np.random.default_rng(0)
    x, y = rng.uniform(0, 1, (8, 8, 8, 1)), rng.integers(0, 4, 8)
    base = init_weights(build_baseline_mini(spec), 1)
    for layer in base.layers:  # push a quarter of the ReLU6 inputs past the upper gate
        if layer.kind == "batchnorm":
            layer.gamma[:], layer.beta[:] = 4.0, 3.0
    friendly = init_weights(build_friendly_mini(spec), 1)
    worst, skipped, parts = 0.0, 0, []
    for name, g in (("baseline", base), ("friendly", friendly)):
        for kind in ("conv2d", "depthwise_conv2d", "batchnorm", "dense"):
            if not any(l.kind == kind for l in g.layers):
                continue
            w, s = fd_check(g, x, y, kind, samples=100)
            worst, skipped = max(worst, w), skipped + s
            parts.append(f"{name}/{kind} {w:.1e}")
    w, s = fd_input_check(base, x, y, samples=100)
    worst, skipped = max(worst, w), skipped + s
    dt = time.perf_counter() - t0
    ok = worst <= 1e-3 and dt <= 60
    record(5, ok, f"worst relative error {worst:.1e} (input through ReLU6 gates {w:.1e}; "
                  f"{skipped} kink-crossing draws redrawn), {dt:.1f} s")


def test_criterion_6_fold_semantics(default_run):
    t0 = time.perf_counter()
    out, _, _ = default_run
    x = np.random.default_rng(6).uniform(0, 1, (100, 16, 16, 1)).astype(np.float32)
    worst_rel = 0.0
    for tag in ("baseline", "baseline_dead", "friendly"):
        a = fe.forward(load_graph(out / "models" / tag), x)[0].astype(np.float64)
        b = fe.forward(load_graph(out / "models" / f"{tag}_folded"), x)[0].astype(np.float64)
        worst_rel = max(worst_rel, float(np.max(np.abs(a - b)) / np.max(np.abs(a))))
    cfg = validate_config()
    dw = cfg.quant.dead_layer
    dead = list(cfg.quant.dead_channels)
    folded = load_graph(out / "models" / "baseline_dead_folded")
    w = folded.layers[dw].weights
    healthy = [c for c in range(w.shape[2]) if c not in dead]
    dominance = float(np.abs(w[:, :, dead]).max() / np.abs(w[:, :, healthy]).max())
    qlayer = load_quantized(out / "models" / "baseline_dead_int8").layers[dw]
    sq = weight_channel_sqnr(w, dequantized_weights(qlayer), channel_axis=2)
    healthy_max, injected_min = float(np.nanmax(sq[healthy])), float(np.min(sq[dead]))
    dt = time.perf_counter() - t0
    ok = worst_rel <= 1e-4 and dominance >= 10 and healthy_max < 10 and injected_min > 30 and dt <= 60
    record(6, ok, f"fold logits rel err {worst_rel:.1e}, injected range dominance {dominance:.0f}x, "
                  f"healthy SQNR <= {healthy_max:.1f} dB, injected SQNR >= {injected_min:.1f} dB")


def _files(root: Path):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.parent.name in ("models", "stats", "data", "diagnostics")}


def test_criterion_7_determinism_and_formats(default_run, tmp_path):
    t0 = time.perf_counter()
    problems = []
    small = {("data", "train"): "240", ("data", "val"): "120", ("data", "holdout"): "120",
             ("train", "epochs"): "2", ("bench", "images"): "20", ("bench", "warmup"): "2"}
    runs = []
    for k in ("a", "b"):
        cfg = validate_config(None, {**small, ("pipeline", "seed"): "3", ("pipeline", "out_dir"): str(tmp_path / k)})
        runs.append(strip_volatile(run_pipeline(cfg)))
    if runs[0] != runs[1]:
        problems.append("summaries differ")
    fa, fb = _files(tmp_path / "a"), _files(tmp_path / "b")
    diff = sorted(str(p) for p in fa if fa[p] != fb.get(p))
    if diff or fa.keys() != fb.keys():
        problems.append(f"artifacts differ: {diff}")

    # round trips of everything the default run wrote
    out, _, _ = default_run
    rt = tmp_path / "rt"
    rt.mkdir()
    for tag in ("baseline", "baseline_dead_folded", "friendly"):
        save_graph(load_graph(out / "models" / tag), rt / tag)
        if (rt / f"{tag}.bin").read_bytes() != (out / "models" / f"{tag}.bin").read_bytes():
            problems.append(f"{tag} round trip")
    for tag in ("baseline_dead", "friendly"):
        qg = load_quantized(out / "models" / f"{tag}_int8")
        save_quantized(qg, rt / tag)
        if not quantized_equal(qg, load_quantized(rt / tag)):
            problems.append(f"{tag}_int8 round trip")
        save_stats(load_stats(out / "stats" / f"{tag}.bin"), rt / f"{tag}.stats")
        if (rt / f"{tag}.stats").read_bytes() != (out / "stats" / f"{tag}.bin").read_bytes():
            problems.append(f"{tag} stats round trip")
    save_dataset(load_dataset(out / "data" / "val.bin"), rt / "val.bin")
    if (rt / "val.bin").read_bytes() != (out / "data" / "val.bin").read_bytes():
        problems.append("dataset round trip")
    log = load_log(out / "bench" / "friendly_int8.csv")
    save_log(log, rt / "log.csv")
    if (rt / "log.csv").read_bytes() != (out / "bench" / "friendly_int8.csv").read_bytes():
        problems.append("run log round trip")

    # golden files: rebuild each one and compare against the frozen copy
    gold = tmp_path / "golden"
    golden.write_all(gold)
    for p in sorted(golden.FIXTURES.iterdir()):
        if p.is_file() and (gold / p.name).read_bytes() != p.read_bytes():
            problems.append(f"golden {p.name}")
    dt = time.perf_counter() - t0
    ok = not problems and dt <= 60
    record(7, ok, f"reruns bit-identical, round trips and {len(list(golden.FIXTURES.iterdir()))} golden files ok, "
                  f"{dt:.1f} s" if ok else "; ".join(problems) + f" ({dt:.1f} s)")
