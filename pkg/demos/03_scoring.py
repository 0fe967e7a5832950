"""
Scoring a run
=============

An image counts only if the running latency total is still inside the wall
time of 30 ms per image. The score divides the in-time accuracy by the
larger of the total inference time and the wall time, in ms.
"""

import numpy as np

from qfnet.bench import RunLog, compute_score


def log_of(n, correct, latency):
    k = round(correct * n)
    return RunLog(np.arange(n), np.full(n, latency), np.arange(n) >= k, np.zeros(n))


for n, acc, ms in ((20000, 0.64705, 28.0), (10927, 0.72673, 27.0)):
    r = compute_score(log_of(n, acc, ms))
    print(f"N={n}: test metric {r.test_metric:.5f}, accuracy per ms {r.accuracy_per_time:.3e}")

# %%
# Too slow: at 60 ms per image only the first half fits in the wall time.
r = compute_score(log_of(1000, 0.9, 60.0))
print(f"classified {r.num_classified}/{r.n}, test metric {r.test_metric:.3f}")
