"""
Forward-chaining splits with a horizon, purge and embargo
=========================================================

Each test block only sees training rows that end before it, with a gap of
``horizon + purge + embargo`` rows in between. The overlap check confirms
that no training row falls inside the gap.
"""
from __future__ import annotations

import numpy as np

from leakguard import Dataset, TimeParams, make_split_plan, overlap_check

rng = np.random.default_rng(0)
n = 120
ds = Dataset.from_arrays(
    {"x": rng.normal(size=n), "y": (rng.random(n) < 0.5).astype(float), "t": np.arange(n, dtype=float)},
    outcome="y", predictors=["x"], positive_class="1", time="t",
)

plan = make_split_plan(ds, "time_series", v=5, time_params=TimeParams(horizon=2, purge=3, embargo=1))
for f in plan.folds:
    print(f"fold {f.fold}: train rows 0-{f.train.max()}, test rows {f.test.min()}-{f.test.max()}, "
          f"gap {f.test.min() - f.train.max() - 1}")

# Every fold passes the leakage checks for this mode.
print(overlap_check(plan, ds))
