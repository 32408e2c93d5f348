from __future__ import annotations

import numpy as np
import pytest

from leakguard.data import Column, Dataset, RoleMap, TaskKind


def make_dataset(n_subjects=40, rows_per_subject=3, p=3, seed=1, signal=0.0, n_batches=4, time=False):
    """Small grouped binary dataset: subject, batch, outcome and x1..xp."""
    rng = np.random.default_rng(seed)
    n = n_subjects * rows_per_subject
    subject = np.repeat([f"S{i + 1}" for i in range(n_subjects)], rows_per_subject)
    batch = rng.choice([f"B{i + 1}" for i in range(n_batches)], size=n)
    X = rng.normal(size=(n, p))
    eta = signal * X[:, 0]
    y = rng.random(n) < 1.0 / (1.0 + np.exp(-eta))
    y[0], y[1] = True, False
    cols = [
        Column.categorical("subject", subject),
        Column.categorical("batch", batch),
        Column.categorical("outcome", np.where(y, "case", "control"), levels=["control", "case"]),
    ]
    cols += [Column(f"x{j + 1}", "numeric", X[:, j]) for j in range(p)]
    roles = dict(outcome="outcome", predictors=tuple(f"x{j + 1}" for j in range(p)), positive_class="case",
                 subject="subject", batch="batch")
    if time:
        cols.append(Column("t", "numeric", np.arange(n, dtype=float)))
        roles["time"] = "t"
    return Dataset({c.name: c for c in cols}, RoleMap(**roles), TaskKind.BINARY)


@pytest.fixture
def toy():
    return make_dataset()
