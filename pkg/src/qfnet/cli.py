"""``qfnet`` command line: one subcommand per pipeline stage plus ``pipeline``.

Exit codes: 0 success, 1 usage error, 2 data/model error, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _channels(text: str):
    try:
        return tuple(int(c) for c in text.split(",") if c.strip() != "")
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _print_json(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


# --- subcommands ---------------------------------------------------------------


def cmd_gen_data(a):
    from .synth import GenSpec, generate, save_splits

    spec = GenSpec(seed=a.seed, classes=a.classes, image_size=a.size, train=a.train, val=a.val, holdout=a.holdout)
    splits = generate(spec)
    save_splits(splits, a.out)
    _print_json({d.split: len(d) for d in splits})


def cmd_train(a):
    from .ir import ArchSpec, build_baseline_mini, build_friendly_mini
    from .model_io import save_graph
    from .pipeline import write_history
    from .synth import load_split
    from .trainer import TrainConfig, init_weights, train

    tr = load_split(a.data, "train")
    val_path = Path(a.data) / "val.bin"
    val = load_split(a.data, "val") if val_path.exists() else None
    spec = ArchSpec(input_size=tr.images.shape[1], num_classes=tr.num_classes)
    builder = build_baseline_mini if a.arch == "baseline" else build_friendly_mini
    cfg = TrainConfig(learning_rate=a.lr, batch_size=a.batch_size, epochs=a.epochs, seed=a.seed)
    g, hist = train(init_weights(builder(spec), a.seed), tr, cfg, val=val)
    g.name = a.arch
    save_graph(g, a.out)
    write_history(hist, a.log or f"{a.out}.train.csv")
    if hist:
        _print_json({"epochs": len(hist), "final_loss": hist[-1][1], "val_acc": hist[-1][2]})


def cmd_transform(a):
    from . import transforms
    from .model_io import load_graph, save_graph

    g = load_graph(a.model)
    if a.op == "fold-bn":
        g, _ = transforms.fold_batchnorm(g)
    elif a.op == "make-friendly":
        g = transforms.make_friendly(g)
    else:
        if a.layer is None:
            raise UsageError("inject-dead needs --layer")
        g = transforms.inject_dead_channels(g, a.layer, a.channels or ())
    save_graph(g, a.out)


def cmd_calibrate(a):
    from .calib import collect_stats, save_stats
    from .ir import GraphError
    from .model_io import load_graph
    from .synth import load_split

    g = load_graph(a.model)
    if any(l.kind == "batchnorm" for l in g.layers):
        raise GraphError("calibrate expects a BN-folded model (run `transform --op fold-bn` first)")
    data = load_split(a.data, a.split).per_class(a.per_class)
    rec = collect_stats(g, data)
    save_stats(rec, a.out)
    _print_json({"tensors": len(rec), "images": len(data)})


def cmd_quantize(a):
    from .calib import load_stats
    from .model_io import load_graph, save_quantized
    from .quantize import build_quantized_graph

    qg = build_quantized_graph(load_graph(a.model), load_stats(a.stats))
    save_quantized(qg, a.out)


def _accuracy(model, images, labels, engine, mode):
    from . import float_engine as fe
    from .int8_engine import RequantMode, predict_quantized
    from .quantize import QuantizedGraph

    if isinstance(model, QuantizedGraph):
        if engine == "float":
            raise UsageError("a quantized model needs --engine int8")
        pred = predict_quantized(model, images, RequantMode(mode))
    else:
        if engine == "int8":
            raise UsageError("--engine int8 needs a quantized model")
        pred = fe.predict(model, images)
    return float(np.mean(pred == labels)), pred


def cmd_eval(a):
    from .model_io import load_any
    from .synth import load_split

    model = load_any(a.model)
    d = load_split(a.data, a.split)
    acc, _ = _accuracy(model, d.images, d.labels, a.engine, a.mode)
    _print_json({"model": str(a.model), "split": a.split, "n": len(d), "top1": acc})


def cmd_diagnose(a):
    from . import diagnostics, transforms
    from .model_io import load_graph, load_quantized
    from .synth import load_split

    g = load_graph(a.model)
    alphas = diagnostics.bn_alpha(g, a.flag_factor)
    deg = None
    if a.quantized:
        if not a.data:
            raise UsageError("--quantized needs --data")
        folded = transforms.fold_batchnorm(g)[0] if any(l.kind == "batchnorm" for l in g.layers) else g
        probe = load_split(a.data, a.split)
        probe = probe.subset(np.arange(min(len(probe), a.probe)))
        deg = diagnostics.layer_degradation(folded, load_quantized(a.quantized), probe)
    doc = diagnostics.write_report(a.out, alphas, deg, str(a.model))
    if a.csv:
        csv_dir = Path(a.csv)
        for r in alphas:
            diagnostics.export_figure_data(r, csv_dir / f"alpha_layer{r.layer}.csv")
        if deg is not None:
            diagnostics.export_figure_data(deg, csv_dir / "layer_sqnr.csv")
    _print_json({"bn_layers": len(doc["bn_alpha"]),
                 "flagged": {r.layer: r.flagged for r in alphas if r.flagged},
                 "first_below_threshold": deg.first_below if deg else None})


def cmd_bench(a):
    from . import bench, float_engine as fe
    from .int8_engine import RequantMode, forward_quantized
    from .model_io import load_any
    from .quantize import QuantizedGraph
    from .synth import load_split

    model = load_any(a.model)
    is_q = isinstance(model, QuantizedGraph)
    if is_q != (a.engine == "int8"):
        raise UsageError(f"--engine {a.engine} does not match the model type")
    d = load_split(a.data, a.split)
    n = len(d) if a.limit is None else min(a.limit, len(d))
    mode = RequantMode(a.mode)
    if is_q:
        fn = lambda x: int(forward_quantized(model, x, mode)[1][0])  # noqa: E731
    else:
        fn = lambda x: int(fe.forward(model, x)[0].argmax())  # noqa: E731
    run = bench.measure_latency(fn, d.images[:n], d.labels[:n], a.warmup, engine=a.engine)
    bench.save_log(run, a.log)
    _print_json({"n": n, "avg_latency_ms": float(run.latency_ms.mean())})


def cmd_score(a):
    from . import bench

    rep = bench.compute_score(bench.load_log(a.log), a.budget_ms)
    if a.out:
        bench.save_score(rep, a.out)
    _print_json(rep.to_dict())


def cmd_pipeline(a):
    from .config import validate_config
    from .pipeline import run_pipeline

    overrides = {}
    for item in a.set or []:
        key, sep, val = item.partition("=")
        if not sep or "." not in key:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        section, _, k = key.partition(".")
        overrides[(section.strip(), k.strip())] = val
    if a.seed is not None:
        overrides[("pipeline", "seed")] = str(a.seed)
    if a.out is not None:
        overrides[("pipeline", "out_dir")] = a.out
    cfg = validate_config(a.config, overrides)
    summary = run_pipeline(cfg)
    _print_json({"out_dir": cfg.out_dir, "table2": summary["table2"], "checks": summary["checks"]})


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qfnet", description="Quantization-friendly separable convolution toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="generate the synthetic texture dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--train", type=int, default=2000)
    s.add_argument("--val", type=int, default=1000)
    s.add_argument("--holdout", type=int, default=1000)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a baseline or friendly mini network")
    s.add_argument("--arch", choices=("baseline", "friendly"), required=True)
    s.add_argument("--data", required=True, help="dataset directory from gen-data")
    s.add_argument("--out", required=True, help="output model path (without extension)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--log", help="per-epoch CSV log (default: <out>.train.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("transform", help="rewrite a float model")
    s.add_argument("--model", required=True)
    s.add_argument("--op", choices=("fold-bn", "make-friendly", "inject-dead"), required=True)
    s.add_argument("--layer", type=int, help="depthwise layer index for inject-dead")
    s.add_argument("--channels", type=_channels, help="comma-separated channel indices for inject-dead")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transform)

    s = sub.add_parser("calibrate", help="collect activation/weight statistics")
    s.add_argument("--model", required=True, help="BN-folded float model")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--per-class", type=int, default=1)
    s.add_argument("--out", required=True, help="stats file")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("quantize", help="build an 8-bit model from a folded model and stats")
    s.add_argument("--model", required=True)
    s.add_argument("--stats", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("eval", help="top-1 accuracy of a float or int8 model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--engine", choices=("float", "int8"))
    s.add_argument("--mode", choices=("float_multiplier", "fixed_multiplier"), default="float_multiplier")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("diagnose", help="BN scale outliers and float-vs-int8 degradation")
    s.add_argument("--model", required=True, help="float model (with BN layers for scale analysis)")
    s.add_argument("--quantized", help="int8 model built from this float model")
    s.add_argument("--data")
    s.add_argument("--split", default="val")
    s.add_argument("--probe", type=int, default=256, help="number of probe images")
    s.add_argument("--flag-factor", type=float, default=10.0)
    s.add_argument("--out", required=True, help="JSON report path")
    s.add_argument("--csv", help="directory for plottable CSV files")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("bench", help="per-image latency run, written as a CSV log")
    s.add_argument("--model", required=True)
    s.add_argument("--engine", choices=("float", "int8"), required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="holdout")
    s.add_argument("--limit", type=int)
    s.add_argument("--warmup", type=int, default=10)
    s.add_argument("--mode", choices=("float_multiplier", "fixed_multiplier"), default="float_multiplier")
    s.add_argument("--log", required=True)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("score", help="LPIRC Track-1 metrics from a run log")
    s.add_argument("--log", required=True)
    s.add_argument("--budget-ms", type=float, default=30.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("pipeline", help="run the full reproduction")
    s.add_argument("--config", help="key=value config file with sections")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output directory (default: $QFNET_OUT/seed<N> or runs/seed<N>)")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    from .calib import StatsError
    from .config import ConfigError
    from .ir import GraphError
    from .model_io import ModelFormatError
    from .synth import DatasetFormatError

    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"qfnet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphError, ModelFormatError, StatsError, DatasetFormatError, FileNotFoundError, ValueError) as e:
        print(f"qfnet {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        print(f"qfnet {args.command}: internal error: {e!r}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
