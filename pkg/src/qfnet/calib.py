"""Calibration statistics and step-size/offset search.

Each quantizable tensor (graph input, every layer output, every weight
tensor) gets a ``TensorStats``: exact min/max plus a 2048-bin histogram
over that range. The search scores a clip range by the squared error of
every histogram bin center after quantize/dequantize and splits that error
into an in-range part (rounding) and an out-of-range part (saturation).
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import float_engine as fe
from .ir import Graph
from .tensor import QMAX, QMIN, QuantParams, choose_qparams_from_range, round_half_away

NUM_BINS = 2048
GRID_POSITIONS = 64


class StatsError(ValueError):
    pass


@dataclass
class TensorStats:
    min: float
    max: float
    counts: np.ndarray  # int64, NUM_BINS entries over [min, max]
    sample_count: int

    def __post_init__(self):
        self.min, self.max = float(self.min), float(self.max)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.sample_count = int(self.sample_count)
        if self.min > self.max:
            raise StatsError(f"min {self.min} > max {self.max}")
        if int(self.counts.sum()) != self.sample_count:
            raise StatsError("histogram counts do not sum to sample_count")

    @property
    def bin_width(self) -> float:
        return (self.max - self.min) / len(self.counts)

    def bin_centers(self) -> np.ndarray:
        return self.min + (np.arange(len(self.counts)) + 0.5) * self.bin_width

    @property
    def degenerate(self) -> bool:
        return self.max == self.min or np.count_nonzero(self.counts) <= 1

    def merge(self, other: "TensorStats") -> "TensorStats":
        """Sum of two histograms gathered over the same range."""
        if (self.min, self.max, len(self.counts)) != (other.min, other.max, len(other.counts)):
            raise StatsError("can only merge histograms over an identical range")
        return TensorStats(self.min, self.max, self.counts + other.counts, self.sample_count + other.sample_count)

    def __eq__(self, other):
        return (isinstance(other, TensorStats) and self.min == other.min and self.max == other.max
                and self.sample_count == other.sample_count and np.array_equal(self.counts, other.counts))


def histogram(values: np.ndarray, lo: float, hi: float, nbins: int = NUM_BINS) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if hi == lo:
        idx = np.zeros(v.shape, np.int64)
    else:
        scale = nbins / (hi - lo)
        # a subnormal width overflows the scale; dividing first stays finite
        t = (v - lo) * scale if math.isfinite(scale) else (v - lo) / (hi - lo) * nbins
        idx = np.floor(t).astype(np.int64)
    idx = np.clip(idx, 0, nbins - 1)
    return np.bincount(idx, minlength=nbins).astype(np.int64)


def stats_from_values(values: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None) -> TensorStats:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise StatsError("no values")
    if not np.all(np.isfinite(v)):
        raise StatsError("non-finite values in tensor")
    lo = float(v.min()) if lo is None else lo
    hi = float(v.max()) if hi is None else hi
    return TensorStats(lo, hi, histogram(v, lo, hi), v.size)


def input_key() -> str:
    return "input"


def output_key(i: int) -> str:
    return f"layer{i}/out"


def weight_key(i: int) -> str:
    return f"layer{i}/weights"


@dataclass
class CalibrationRecord:
    stats: dict = field(default_factory=dict)

    def __getitem__(self, key) -> TensorStats:
        try:
            return self.stats[key]
        except KeyError:
            raise StatsError(f"missing calibration stats for tensor {key!r}") from None

    def __contains__(self, key) -> bool:
        return key in self.stats

    def __len__(self) -> int:
        return len(self.stats)

    def keys(self):
        return self.stats.keys()

    def merge(self, other: "CalibrationRecord") -> "CalibrationRecord":
        if self.stats.keys() != other.stats.keys():
            raise StatsError("records cover different tensors")
        return CalibrationRecord({k: self.stats[k].merge(other.stats[k]) for k in self.stats})

    def ranges(self) -> dict:
        return {k: (s.min, s.max) for k, s in self.stats.items()}

    def __eq__(self, other):
        return isinstance(other, CalibrationRecord) and self.stats == other.stats


def _activation_tensors(g: Graph, images: np.ndarray, batch_size: int):
    """Yield dicts key -> activation array, one per batch."""
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size].astype(np.float32)
        _, trace = fe.forward(g, x, trace=True)
        acts = {input_key(): x}
        acts.update({output_key(i): t for i, t in trace.items()})
        yield acts


def collect_ranges(g: Graph, images: np.ndarray, batch_size: int = 64) -> dict:
    """Pass 1: exact global min/max of the input and every layer output."""
    ranges = {}
    for acts in _activation_tensors(g, images, batch_size):
        for k, a in acts.items():
            lo, hi = float(a.min()), float(a.max())
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise StatsError(f"non-finite activations in {k}")
            if k in ranges:
                lo, hi = min(lo, ranges[k][0]), max(hi, ranges[k][1])
            ranges[k] = (lo, hi)
    return ranges


def collect_stats(g: Graph, images, ranges: Optional[dict] = None, batch_size: int = 64) -> CalibrationRecord:
    """Two-pass calibration of ``g`` over ``images`` (array or ``Dataset``).

    Pass 1 finds global min/max per activation tensor (skipped when
    ``ranges`` is given, e.g. to merge partial records); pass 2 fills
    histograms over those ranges. Weight stats come from the weights.
    """
    images = getattr(images, "images", images)
    if len(images) == 0:
        raise StatsError("empty calibration set")
    if ranges is None:
        ranges = collect_ranges(g, images, batch_size)
    counts = {k: np.zeros(NUM_BINS, np.int64) for k in ranges}
    totals = dict.fromkeys(ranges, 0)
    for acts in _activation_tensors(g, images, batch_size):
        for k, a in acts.items():
            counts[k] += histogram(a, *ranges[k])
            totals[k] += a.size
    rec = {k: TensorStats(ranges[k][0], ranges[k][1], counts[k], totals[k]) for k in ranges}
    for i, layer in enumerate(g.layers):
        if layer.kind in ("conv2d", "depthwise_conv2d", "dense"):
            rec[weight_key(i)] = stats_from_values(layer.weights)
    return CalibrationRecord(rec)


# --- clip loss and search ---------------------------------------------------------


@dataclass(frozen=True)
class ClipLoss:
    quantization: float
    saturation: float

    @property
    def total(self) -> float:
        return self.quantization + self.saturation


def _qparams_arrays(cmins: np.ndarray, cmaxs: np.ndarray):
    """Vectorized ``choose_qparams_from_range``; returns (delta, zero_point) arrays."""
    lo = np.minimum(cmins, 0.0)
    hi = np.maximum(cmaxs, 0.0)
    span = hi - lo
    degenerate = span == 0
    delta = np.where(degenerate, 1.0, span / (QMAX - QMIN))
    zp = np.clip(round_half_away(-lo / delta), QMIN, QMAX)
    return delta, np.where(degenerate, 0.0, zp)


class _BinMass:
    """Occupied bin centers (ascending), their counts and prefix sums for the saturation tails."""

    def __init__(self, stats: TensorStats):
        nz = stats.counts > 0
        self.centers = stats.bin_centers()[nz]
        self.weights = stats.counts[nz].astype(np.float64)
        zero = np.zeros(1)
        self.w = np.concatenate([zero, np.cumsum(self.weights)])
        self.wc = np.concatenate([zero, np.cumsum(self.weights * self.centers)])
        self.wcc = np.concatenate([zero, np.cumsum(self.weights * self.centers ** 2)])
        pad = -len(self.centers) % _CHUNK
        self.centers_pad = np.concatenate([self.centers, np.zeros(pad)])
        self.weights_pad = np.concatenate([self.weights, np.zeros(pad)])

    def _tails(self, lo, hi, a, b):
        """w*(c - lo)^2 summed over centers [0, a) plus w*(c - hi)^2 over [b, end)."""
        below = self.wcc[a] - 2 * lo * self.wc[a] + lo * lo * self.w[a]
        above = ((self.wcc[-1] - self.wcc[b]) - 2 * hi * (self.wc[-1] - self.wc[b])
                 + hi * hi * (self.w[-1] - self.w[b]))
        return np.maximum(below, 0.0) + np.maximum(above, 0.0)

    def span(self, lo, hi):
        """Index range of the centers inside [lo, hi]."""
        return np.searchsorted(self.centers, lo, side="left"), np.searchsorted(self.centers, hi, side="right")


_ROWS_PER_BLOCK = 8
_CHUNK = 64


def _loss_terms(mass: _BinMass, delta: np.ndarray, zp: np.ndarray):
    """Quantization and saturation loss for each (delta, zp) row.

    With the continuous code u = c / delta + zp, a center's error is
    delta^2 * (u - clip(round(u), 0, 255))^2; the tie direction of the
    rounding does not change it. Saturated centers (outside the real range)
    form a prefix and a suffix of the sorted centers, so their error comes
    from prefix sums. In-range centers are summed per fixed chunk of bins
    and the chunk sums are added in order, so a row's loss does not depend
    on which other rows it is evaluated with. Rows are processed in blocks
    of similar spans to keep the evaluated window small.
    """
    delta = np.asarray(delta, np.float64)
    zp = np.asarray(zp, np.float64)
    # clip ranges widened to include zero often share parameters; evaluate each distinct pair once
    pairs, inverse = np.unique(np.stack([delta, zp], axis=1), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    if len(pairs) < len(delta):
        q, s = _loss_terms(mass, pairs[:, 0], pairs[:, 1])
        return q[inverse], s[inverse]
    lo, hi = delta * (QMIN - zp), delta * (QMAX - zp)
    a, b = mass.span(lo, hi)
    sat = mass._tails(lo, hi, a, b)
    inner = np.zeros(len(delta))
    order = np.lexsort((b, a))
    for s in range(0, len(order), _ROWS_PER_BLOCK):
        rows = order[s:s + _ROWS_PER_BLOCK]
        i = a[rows].min() // _CHUNK * _CHUNK
        j = -(-b[rows].max() // _CHUNK) * _CHUNK
        if j <= i:
            continue
        u = mass.centers_pad[i:j] * (1.0 / delta[rows])[:, None] + zp[rows, None]
        r = np.clip(np.rint(u), QMIN, QMAX)
        e = (u - r) ** 2 * mass.weights_pad[i:j]
        idx = np.arange(i, j)
        e = np.where((idx >= a[rows, None]) & (idx < b[rows, None]), e, 0.0)
        parts = np.ascontiguousarray(e).reshape(len(rows), -1, _CHUNK).sum(axis=2)
        # sequential sum: chunks outside a row's span are exact zeros and leave it unchanged
        inner[rows] = np.cumsum(parts, axis=1)[:, -1]
    return inner * delta ** 2, sat


def loss_for_clip(stats: TensorStats, clip_min: float, clip_max: float) -> ClipLoss:
    """Histogram-weighted squared error of quantizing with the range [clip_min, clip_max]."""
    if not clip_min < clip_max:
        raise StatsError(f"degenerate clip range [{clip_min}, {clip_max}]")
    q = choose_qparams_from_range(clip_min, clip_max)
    quant, sat = _loss_terms(_BinMass(stats), np.array([q.delta]), np.array([float(q.zero_point)]))
    return ClipLoss(float(quant[0]), float(sat[0]))


def clip_grid(stats: TensorStats, positions: int = GRID_POSITIONS):
    """Candidate lower clips (walking up from min) and upper clips (walking down from max)."""
    step = (stats.max - stats.min) / positions
    k = np.arange(positions)
    return stats.min + k * step, stats.max - k * step


@dataclass(frozen=True)
class SearchResult:
    qparams: QuantParams
    clip_min: float
    clip_max: float
    loss: float
    evaluations: int


class _GridLoss:
    """Memoized loss over the clip grid; index (j, k) is valid when j + k < positions."""

    def __init__(self, stats: TensorStats, positions: int):
        self.positions = positions
        self.cmins, self.cmaxs = clip_grid(stats, positions)
        self.mass = _BinMass(stats)
        self.cache = np.full((positions, positions), np.nan)

    def many(self, js, ks) -> np.ndarray:
        js, ks = np.asarray(js, np.int64), np.asarray(ks, np.int64)
        todo = np.isnan(self.cache[js, ks])
        if todo.any():
            tj, tk = js[todo], ks[todo]
            delta, zp = _qparams_arrays(self.cmins[tj], self.cmaxs[tk])
            q, s = _loss_terms(self.mass, delta, zp)
            self.cache[tj, tk] = q + s
        return self.cache[js, ks]

    def result(self, j, k) -> SearchResult:
        lo, hi = float(self.cmins[j]), float(self.cmaxs[k])
        evaluations = int(np.count_nonzero(~np.isnan(self.cache)))
        return SearchResult(choose_qparams_from_range(lo, hi), lo, hi, float(self.cache[j, k]), evaluations)


def _fallback(stats: TensorStats) -> SearchResult:
    q = choose_qparams_from_range(stats.min, stats.max)
    return SearchResult(q, stats.min, stats.max, 0.0, 0)


_JOINT_STEPS = [(dj, dk) for dj in (-1, 0, 1) for dk in (-1, 0, 1) if dj and dk]


def greedy_search(stats: TensorStats, positions: int = GRID_POSITIONS, joint: bool = True) -> SearchResult:
    """Coordinate descent over the clip grid, alternating upper and lower end.

    Each sweep line-searches one end with the other held fixed and moves
    only on a strict improvement. When neither end can improve alone and
    ``joint`` is set, the four moves shifting both ends by one grid step are
    tried too; zero-point rounding makes the loss surface ripple, and these
    diagonal steps escape ripple minima that single-end moves cannot.
    The search ends when no allowed move lowers the loss.
    """
    if stats.degenerate:
        return _fallback(stats)
    grid = _GridLoss(stats, positions)
    j = k = 0
    best = grid.many([0], [0])[0]
    while True:
        moved = False
        ks = np.arange(positions - j)
        losses = grid.many(np.full(len(ks), j), ks)
        kb = int(np.argmin(losses))
        if losses[kb] < best:
            k, best, moved = kb, losses[kb], True
        js = np.arange(positions - k)
        losses = grid.many(js, np.full(len(js), k))
        jb = int(np.argmin(losses))
        if losses[jb] < best:
            j, best, moved = jb, losses[jb], True
        if not moved and joint:
            cand = [(j + dj, k + dk) for dj, dk in _JOINT_STEPS
                    if j + dj >= 0 and k + dk >= 0 and j + dj + k + dk < positions]
            if cand:
                losses = grid.many([c[0] for c in cand], [c[1] for c in cand])
                n = int(np.argmin(losses))
                if losses[n] < best:
                    (j, k), best, moved = cand[n], losses[n], True
        if not moved:
            return grid.result(j, k)


def brute_force_search(stats: TensorStats, positions: int = GRID_POSITIONS) -> SearchResult:
    """Exhaustive minimum of the clip loss over every valid grid pair."""
    if stats.degenerate:
        return _fallback(stats)
    grid = _GridLoss(stats, positions)
    js, ks = np.nonzero(np.add.outer(np.arange(positions), np.arange(positions)) < positions)
    losses = grid.many(js, ks)
    n = int(np.argmin(losses))
    return grid.result(int(js[n]), int(ks[n]))


def greedy_search_qparams(stats: TensorStats) -> QuantParams:
    return greedy_search(stats).qparams


def brute_force_qparams(stats: TensorStats) -> QuantParams:
    return brute_force_search(stats).qparams


# --- stats file --------------------------------------------------------------------

STATS_MAGIC = b"QFST"
STATS_VERSION = 1


def save_stats(rec: CalibrationRecord, path) -> None:
    parts = [struct.pack("<4sII", STATS_MAGIC, STATS_VERSION, len(rec.stats))]
    for key in sorted(rec.stats):
        s = rec.stats[key]
        name = key.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<ddQI", s.min, s.max, s.sample_count, len(s.counts)))
        parts.append(s.counts.astype("<u8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_stats(path) -> CalibrationRecord:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise StatsError(f"{path}: truncated stats file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    magic, version, count = struct.unpack_from("<4sII", body)
    if magic != STATS_MAGIC:
        raise StatsError(f"{path}: bad magic {magic!r}")
    if version != STATS_VERSION:
        raise StatsError(f"{path}: unsupported stats version {version}")
    if zlib.crc32(body) != crc:
        raise StatsError(f"{path}: checksum mismatch")
    off = 12
    stats = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, off)
            off += 2
            key = body[off:off + n].decode("utf-8")
            off += n
            lo, hi, total, nbins = struct.unpack_from("<ddQI", body, off)
            off += 28
            counts = np.frombuffer(body, "<u8", nbins, off).astype(np.int64)
            off += 8 * nbins
            stats[key] = TensorStats(lo, hi, counts, total)
    except (struct.error, ValueError) as e:
        raise StatsError(f"{path}: corrupt stats file ({e})") from None
    if off != len(body):
        raise StatsError(f"{path}: trailing bytes in stats file")
    return CalibrationRecord(stats)
