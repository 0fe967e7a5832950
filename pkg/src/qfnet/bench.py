"""Per-image latency measurement and LPIRC Track-1 scoring.

Scoring is a pure function of a ``RunLog``; timing only enters through the
log, so any saved run can be re-scored without rerunning inference.
"""

from __future__ import annotations

import csv
import io
import json
import platform
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

DEFAULT_BUDGET_MS = 30.0
DEFAULT_WARMUP = 10
LOG_COLUMNS = ("index", "latency_ms", "predicted", "truth")


@dataclass
class RunLog:
    index: np.ndarray
    latency_ms: np.ndarray
    predicted: np.ndarray
    truth: np.ndarray
    engine: str = ""
    note: str = ""

    def __post_init__(self):
        self.index = np.asarray(self.index, np.int64)
        self.latency_ms = np.asarray(self.latency_ms, np.float64)
        self.predicted = np.asarray(self.predicted, np.int64)
        self.truth = np.asarray(self.truth, np.int64)
        n = len(self.index)
        if not (len(self.latency_ms) == len(self.predicted) == len(self.truth) == n):
            raise ValueError("RunLog columns must have equal length")

    def __len__(self) -> int:
        return len(self.index)


@dataclass
class ScoreReport:
    n: int
    num_classified: int
    num_correct: int
    test_metric: float
    accuracy_on_classified: float
    accuracy_per_time: float  # per millisecond
    avg_latency_ms: float
    total_time_ms: float
    wall_time_ms: float
    budget_ms: float = DEFAULT_BUDGET_MS

    def to_dict(self) -> dict:
        return asdict(self)


def measure_latency(predict_one: Callable[[np.ndarray], int], images: np.ndarray, labels: np.ndarray,
                    warmup: int = DEFAULT_WARMUP, engine: str = "") -> RunLog:
    """Time ``predict_one`` on each image (batch of 1) in order; warmup runs are not logged."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("empty dataset")
    for i in range(min(warmup, len(images))):
        predict_one(images[i:i + 1])
    lat = np.empty(len(images))
    pred = np.empty(len(images), np.int64)
    for i in range(len(images)):
        x = images[i:i + 1]
        t0 = time.perf_counter_ns()
        p = predict_one(x)
        lat[i] = (time.perf_counter_ns() - t0) / 1e6
        pred[i] = int(p)
    note = f"inference only, batch 1, single thread, warmup {warmup}; {platform.machine()} {platform.python_version()}"
    return RunLog(np.arange(len(images)), lat, pred, labels, engine, note)


def compute_score(log: RunLog, budget_ms_per_image: float = DEFAULT_BUDGET_MS) -> ScoreReport:
    """Track-1 metrics; images count as classified while the running latency total stays within the wall time."""
    n = len(log)
    if n == 0:
        raise ValueError("empty run log")
    wall = budget_ms_per_image * n
    order = np.argsort(log.index, kind="stable")
    lat = log.latency_ms[order]
    correct = (log.predicted == log.truth)[order]
    cum = np.cumsum(lat)
    num_classified = int(np.searchsorted(cum, wall, side="right"))
    num_correct = int(correct[:num_classified].sum())
    total = float(cum[-1])
    test_metric = num_correct / n
    acc_classified = num_correct / num_classified if num_classified else 0.0
    return ScoreReport(
        n=n,
        num_classified=num_classified,
        num_correct=num_correct,
        test_metric=test_metric,
        accuracy_on_classified=acc_classified,
        accuracy_per_time=test_metric / max(total, wall),
        avg_latency_ms=total / n,
        total_time_ms=total,
        wall_time_ms=wall,
        budget_ms=budget_ms_per_image,
    )


def save_log(log: RunLog, path) -> None:
    buf = io.StringIO()
    buf.write(f"# engine: {log.engine}\n# note: {log.note}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in zip(log.index.tolist(), log.latency_ms.tolist(), log.predicted.tolist(), log.truth.tolist()):
        w.writerow([row[0], repr(row[1]), row[2], row[3]])
    Path(path).write_text(buf.getvalue())


def load_log(path) -> RunLog:
    meta = {}
    rows = []
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh]
    body = []
    for ln in lines:
        if ln.startswith("#"):
            key, _, val = ln[1:].strip().partition(":")
            meta[key.strip()] = val.strip()
        else:
            body.append(ln)
    reader = csv.reader(body)
    header = next(reader, None)
    if header is None or tuple(header) != LOG_COLUMNS:
        raise ValueError(f"{path}: expected columns {LOG_COLUMNS}, got {header}")
    for r in reader:
        rows.append((int(r[0]), float(r[1]), int(r[2]), int(r[3])))
    cols = list(zip(*rows)) if rows else [(), (), (), ()]
    return RunLog(*cols, engine=meta.get("engine", ""), note=meta.get("note", ""))


def save_score(report: ScoreReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
