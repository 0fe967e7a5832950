"""
Searching the clip range
========================

Calibration keeps a 2048-bin histogram per tensor. The clip range trades
rounding error inside the range against saturation error outside it. The
greedy search walks a 64-step grid from both ends; brute force scores every
grid pair.
"""

import numpy as np

from qfnet.calib import brute_force_search, greedy_search, loss_for_clip, stats_from_values

rng = np.random.default_rng(0)
samples = {
    "gaussian": rng.normal(0, 1, 50_000),
    "laplace": rng.laplace(0, 1, 50_000),
    "relu": np.maximum(rng.normal(0.5, 1, 50_000), 0),
    "bimodal": np.concatenate([rng.normal(-3, 0.5, 25_000), rng.normal(2, 1, 25_000)]),
}

# %%
for name, x in samples.items():
    s = stats_from_values(x)
    g, b = greedy_search(s), brute_force_search(s)
    full = loss_for_clip(s, s.min, s.max).total
    print(f"{name:9s} range [{s.min:6.2f}, {s.max:5.2f}]  greedy [{g.clip_min:6.2f}, {g.clip_max:5.2f}]"
          f"  loss {g.loss:.3g} vs full range {full:.3g}  brute {b.loss:.3g}"
          f"  ({g.evaluations} vs {b.evaluations} evaluations)")

# %%
# Squared error is tolerant of rare outliers: a 0.1% cluster far away is
# still kept, a one-in-a-million point only pulls the range partway out.
for frac in (1e-3, 1e-6):
    n = 1_000_000
    x = rng.normal(0, 1, n)
    x[: max(1, int(frac * n))] = 100.0
    g = greedy_search(stats_from_values(x))
    print(f"outlier mass {frac:g}: clip max {g.clip_max:.1f}")
