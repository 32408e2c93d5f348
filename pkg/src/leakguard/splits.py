"""Leakage-aware resampling plans.

Rows that share a dependence unit (subject, batch, study) never straddle a
train/test boundary; time-ordered plans only train on rows that precede the
test block. Plans are immutable, hashable by fold membership, and can be
stored compactly as one fold-id vector per repeat.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from .data import Dataset, TaskKind

MODES = ("subject_grouped", "batch_blocked", "study_loocv", "time_series", "combined")
GROUPED_MODES = ("subject_grouped", "batch_blocked", "study_loocv", "combined")

_ROLE_FOR_MODE = {"subject_grouped": "subject", "batch_blocked": "batch", "study_loocv": "study"}


class SplitError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Fold:
    repeat: int
    fold: int
    train: np.ndarray
    test: np.ndarray
    skipped: bool = False

    def __post_init__(self):
        for name in ("train", "test"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_train(self) -> int:
        return int(self.train.size)

    @property
    def n_test(self) -> int:
        return int(self.test.size)


@dataclass(frozen=True)
class TimeParams:
    """Row-count windows for time-ordered plans."""

    horizon: int = 0
    purge: int = 0
    embargo: int = 0

    @property
    def gap(self) -> int:
        return self.horizon + self.purge + self.embargo

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "purge": self.purge, "embargo": self.embargo}


@dataclass(frozen=True, eq=False)
class SplitPlan:
    mode: str
    v: int
    repeats: int
    n_rows: int
    seed: int
    folds_explicit: tuple[Fold, ...] | None = None
    compact: np.ndarray | None = None
    group_cols: tuple[str, ...] = ()
    time_col: str | None = None
    outcome: str | None = None
    stratified: bool = False
    nested: bool = False
    inner_v: int | None = None
    inner: dict = field(default_factory=dict)
    time_params: TimeParams = TimeParams()
    data_hash: str | None = None
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise SplitError(f"unknown split mode {self.mode!r}")
        if (self.folds_explicit is None) == (self.compact is None):
            raise SplitError("a plan holds either explicit folds or a compact fold vector")
        if self.compact is not None:
            c = np.asarray(self.compact, dtype=np.int32)
            if c.shape != (self.repeats, self.n_rows):
                raise SplitError("compact fold vector must have shape (repeats, n_rows)")
            c.setflags(write=False)
            object.__setattr__(self, "compact", c)

    @property
    def is_compact(self) -> bool:
        return self.compact is not None

    @property
    def folds(self) -> tuple[Fold, ...]:
        if self.folds_explicit is not None:
            return self.folds_explicit
        return _folds_from_compact(self.compact, self.v)

    def __iter__(self) -> Iterator[Fold]:
        return iter(self.folds)

    def __len__(self):
        return len(self.folds)

    @cached_property
    def hash(self) -> str:
        return plan_hash(self)

    def summary(self) -> str:
        lines = [
            f"SplitPlan (mode = {self.mode}, v = {self.v}, repeats = {self.repeats})",
            f"Stratified: {self.stratified} | Nested: {self.nested}",
            "  repeat fold n_train n_test",
        ]
        for f in self.folds:
            lines.append(f"  {f.repeat:>6} {f.fold:>4} {f.n_train:>7} {f.n_test:>6}" + ("  (skipped)" if f.skipped else ""))
        lines.append(f"Total folds: {len(self.folds)} | Hash: {self.hash}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "v": self.v,
            "repeats": self.repeats,
            "seed": self.seed,
            "hash": self.hash,
            "n_rows": self.n_rows,
            "data_hash": self.data_hash,
            "group_cols": list(self.group_cols),
            "time_col": self.time_col,
            "outcome": self.outcome,
            "stratified": self.stratified,
            "nested": self.nested,
            "inner_v": self.inner_v,
            "time_params": self.time_params.to_dict(),
            "notes": list(self.notes),
            "folds": [_fold_dict(f) for f in self.folds],
        }
        if self.is_compact:
            d["compact"] = self.compact.tolist()
        if self.inner:
            d["inner"] = [
                {"repeat": r, "fold": k, "inner": [_fold_dict(f) for f in folds]}
                for (r, k), folds in sorted(self.inner.items())
            ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        compact = d.get("compact")
        folds = None
        if compact is None:
            folds = tuple(_fold_from_dict(f) for f in d["folds"])
        inner = {}
        for item in d.get("inner", []):
            inner[(item["repeat"], item["fold"])] = tuple(_fold_from_dict(f) for f in item["inner"])
        plan = cls(
            mode=d["mode"],
            v=d["v"],
            repeats=d["repeats"],
            n_rows=d["n_rows"],
            seed=d["seed"],
            folds_explicit=folds,
            compact=None if compact is None else np.asarray(compact),
            group_cols=tuple(d.get("group_cols", ())),
            time_col=d.get("time_col"),
            outcome=d.get("outcome"),
            stratified=d.get("stratified", False),
            nested=d.get("nested", False),
            inner_v=d.get("inner_v"),
            inner=inner,
            time_params=TimeParams(**d.get("time_params", {})),
            data_hash=d.get("data_hash"),
            notes=tuple(d.get("notes", ())),
        )
        if "hash" in d and d["hash"] != plan.hash:
            raise SplitError(f"stored plan hash {d['hash']} does not match its folds ({plan.hash})")
        return plan


def _fold_dict(f: Fold) -> dict:
    return {
        "repeat": f.repeat,
        "fold": f.fold,
        "train": f.train.tolist(),
        "test": f.test.tolist(),
        "skipped": f.skipped,
    }


def _fold_from_dict(d: dict) -> Fold:
    return Fold(d["repeat"], d["fold"], np.asarray(d["train"]), np.asarray(d["test"]), d.get("skipped", False))


def plan_hash(plan: SplitPlan) -> str:
    """First 12 hex chars of SHA-256 over the canonical plan serialization."""
    folds = sorted(plan.folds, key=lambda f: (f.repeat, f.fold))
    canon = {
        "mode": plan.mode,
        "v": plan.v,
        "repeats": plan.repeats,
        "seed": plan.seed,
        "folds": [[f.repeat, f.fold, np.sort(f.train).tolist(), np.sort(f.test).tolist()] for f in folds],
    }
    blob = json.dumps(canon, separators=(",", ":"), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _folds_from_compact(compact: np.ndarray, v: int) -> tuple[Fold, ...]:
    folds = []
    rows = np.arange(compact.shape[1])
    for r, vec in enumerate(compact, start=1):
        for k in range(1, v + 1):
            test = rows[vec == k]
            train = rows[(vec != k) & (vec > 0)]
            folds.append(Fold(r, k, train, test, skipped=train.size == 0))
    return tuple(folds)


def expand_compact(plan: SplitPlan) -> SplitPlan:
    """Plan with explicit fold index lists."""
    if not plan.is_compact:
        return plan
    return replace(plan, folds_explicit=_folds_from_compact(plan.compact, plan.v), compact=None)


def to_compact(plan: SplitPlan) -> SplitPlan:
    """Plan storing one fold-id vector per repeat (0 = never tested)."""
    if plan.is_compact:
        return plan
    if plan.mode == "time_series":
        raise SplitError("compact storage needs partition folds; time_series trains on a prefix only")
    vec = np.zeros((plan.repeats, plan.n_rows), dtype=np.int32)
    for f in plan.folds:
        if np.any(vec[f.repeat - 1, f.test] != 0):
            raise SplitError("test sets overlap within a repeat; cannot compact")
        vec[f.repeat - 1, f.test] = f.fold
    for f in plan.folds:
        expected = np.flatnonzero((vec[f.repeat - 1] != f.fold) & (vec[f.repeat - 1] > 0))
        if not np.array_equal(np.sort(f.train), expected):
            raise SplitError("training sets are not complements of test sets; cannot compact")
    return replace(plan, folds_explicit=None, compact=vec)


# -- group assignment ---------------------------------------------------------


def _imbalance(pos, size, target):
    with np.errstate(invalid="ignore", divide="ignore"):
        prev = np.where(size > 0, pos / np.maximum(size, 1), target)
    return np.max(np.abs(prev - target)), np.sum((prev - target) ** 2)


def assign_groups(
    group_sizes: np.ndarray,
    group_pos: np.ndarray,
    v: int,
    rng: np.random.Generator,
    stratify: bool,
) -> np.ndarray:
    """Assign groups to ``v`` folds; returns the 0-based fold of each group.

    Groups are placed largest first into the currently smallest fold. With
    ``stratify`` the order within equal sizes follows positive counts and
    ties between equally small folds go to the one that keeps fold
    prevalence closest to the overall prevalence; a swap pass between
    equal-size groups then reduces the worst fold deviation further.
    """
    g = group_sizes.size
    fold_size = np.zeros(v)
    fold_pos = np.zeros(v)
    target = group_pos.sum() / group_sizes.sum()
    jitter = rng.permutation(g)
    if stratify:
        order = np.lexsort((jitter, -group_pos / np.maximum(group_sizes, 1), -group_sizes))
    else:
        order = np.lexsort((jitter, -group_sizes))
    fold_rank = rng.permutation(v)
    out = np.empty(g, dtype=np.int64)
    for gi in order:
        smallest = fold_size.min()
        cand = np.flatnonzero(fold_size == smallest)
        if stratify and cand.size > 1:
            after = (fold_pos[cand] + group_pos[gi]) / (fold_size[cand] + group_sizes[gi])
            # deviation of the fold after adding, relative to what it adds to an empty fold
            dev = np.abs(after - target)
            best = cand[np.lexsort((fold_rank[cand], np.round(dev, 12)))[0]]
        else:
            best = cand[np.argmin(fold_rank[cand])]
        out[gi] = best
        fold_size[best] += group_sizes[gi]
        fold_pos[best] += group_pos[gi]
    if stratify:
        out = _swap_refine(out, group_sizes, group_pos, v, target)
    return out


def _swap_refine(assign, sizes, pos, v, target, max_passes=200):
    fold_size = np.bincount(assign, weights=sizes, minlength=v)
    fold_pos = np.bincount(assign, weights=pos, minlength=v)
    current = _imbalance(fold_pos, fold_size, target)
    for _ in range(max_passes):
        best = None
        for a in range(sizes.size):
            same = np.flatnonzero((sizes == sizes[a]) & (assign != assign[a]) & (pos != pos[a]))
            for b in same[same > a]:
                fa, fb = assign[a], assign[b]
                d = pos[b] - pos[a]
                fold_pos[fa] += d
                fold_pos[fb] -= d
                score = _imbalance(fold_pos, fold_size, target)
                fold_pos[fa] -= d
                fold_pos[fb] += d
                if score < current and (best is None or score < best[0]):
                    best = (score, a, b)
        if best is None:
            break
        score, a, b = best
        fa, fb = assign[a], assign[b]
        d = pos[b] - pos[a]
        fold_pos[fa] += d
        fold_pos[fb] -= d
        assign[a], assign[b] = fb, fa
        current = score
    return assign


def _partition_folds(row_group, group_fold, v, repeat, rows=None):
    rows = np.arange(row_group.size) if rows is None else rows
    fold_of_row = group_fold[row_group]
    folds = []
    for k in range(v):
        test = rows[fold_of_row == k]
        train = rows[fold_of_row != k]
        folds.append(Fold(repeat, k + 1, train, test, skipped=train.size == 0))
    return folds


def _union_groups(codes: Sequence[np.ndarray]) -> np.ndarray:
    """Connected components of rows linked by any shared grouping level."""
    n = codes[0].size
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for c in codes:
        first = {}
        for i, level in enumerate(c):
            j = first.setdefault(level, i)
            if j != i:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(n)])
    _, dense = np.unique(roots, return_inverse=True)
    return dense


def _strat_target(ds: Dataset, rows: np.ndarray) -> np.ndarray:
    y = ds.y[rows]
    if ds.task == TaskKind.REGRESSION:
        return (y > np.median(y)).astype(float)
    return y


def _grouped_repeat(row_group, ypos, v, rng, stratify, repeat, rows=None):
    ngroups = row_group.max() + 1
    sizes = np.bincount(row_group, minlength=ngroups).astype(float)
    pos = np.bincount(row_group, weights=ypos, minlength=ngroups)
    group_fold = assign_groups(sizes, pos, v, rng, stratify)
    return _partition_folds(row_group, group_fold, v, repeat, rows)


def _time_folds(order: np.ndarray, t: np.ndarray, v: int, tp: TimeParams, repeat: int = 1) -> list[Fold]:
    n = order.size
    m = int(np.ceil(n * v / (v + 1)))
    if m < v:
        raise SplitError(f"time_series needs at least {v + 1} rows for v={v}")
    blocks = np.array_split(np.arange(n - m, n), v)
    folds = []
    for k, blk in enumerate(blocks, start=1):
        start = int(blk[0])
        test = order[blk]
        cut = start - tp.gap
        train = order[: max(cut, 0)]
        # rows tied in time with the test block may not train
        train = train[t[train] < t[test].min()]
        folds.append(Fold(repeat, k, np.sort(train), np.sort(test), skipped=train.size == 0))
    return folds


def make_split_plan(
    ds: Dataset,
    mode: str = "subject_grouped",
    v: int = 5,
    repeats: int = 1,
    stratify: bool = False,
    nested: bool = False,
    inner_v: int = 3,
    compact: bool = False,
    seed: int = 1,
    time_params: TimeParams | None = None,
    group: str | None = None,
    constraints: Sequence[str] | None = None,
) -> SplitPlan:
    """Build a resampling plan for ``ds``.

    Parameters
    ----------
    mode : str
        ``subject_grouped``, ``batch_blocked``, ``study_loocv``,
        ``time_series`` or ``combined``.
    v, repeats : int
        Folds per repeat and number of repeats. ``study_loocv`` uses one fold
        per study and a single repeat; ``time_series`` is deterministic and
        also uses a single repeat.
    group : str, optional
        Grouping column; defaults to the role column matching ``mode``.
    constraints : sequence of str, optional
        For ``combined``: grouping columns that must all be respected.
    time_params : TimeParams, optional
        Horizon/purge/embargo windows (rows) for ``time_series``.
    """
    if mode not in MODES:
        raise SplitError(f"unknown split mode {mode!r}")
    if v < 2 and mode != "study_loocv":
        raise SplitError("v must be at least 2")
    if repeats < 1:
        raise SplitError("repeats must be >= 1")
    tp = time_params or TimeParams()
    notes: list[str] = []
    n = ds.n_rows
    rows = np.arange(n)
    group_cols: tuple[str, ...] = ()
    time_col = None
    folds: list[Fold] = []

    if mode == "time_series":
        time_col = group or ds.roles.time
        if time_col is None:
            raise SplitError("time_series mode needs a time column")
        ds_t = ds if time_col == ds.roles.time else replace(ds, roles=replace(ds.roles, time=time_col))
        order, ties = ds_t.time_order()
        if ties:
            notes.append("time ties ordered by row insertion order")
        if repeats > 1:
            notes.append("time_series plans are deterministic; repeats set to 1")
        repeats = 1
        folds = _time_folds(order, ds.columns[time_col].values, v, tp)
    else:
        if mode == "combined":
            cols = list(constraints or [])
            if not cols:
                cols = [c for c in (ds.roles.subject, ds.roles.batch, ds.roles.study) if c]
            if not cols:
                raise SplitError("combined mode needs at least one grouping constraint")
            group_cols = tuple(cols)
            row_group = _union_groups([ds.group_codes(c) for c in cols])
        else:
            col = group or getattr(ds.roles, _ROLE_FOR_MODE[mode])
            if col is None:
                raise SplitError(f"{mode} mode needs a {_ROLE_FOR_MODE[mode]} column")
            if col not in ds.columns:
                raise SplitError(f"grouping column {col!r} not found")
            group_cols = (col,)
            row_group = ds.group_codes(col)
        ngroups = int(row_group.max()) + 1
        ypos = _strat_target(ds, rows)
        if mode == "study_loocv":
            if ngroups < 2:
                raise SplitError("study_loocv needs at least 2 studies")
            if repeats > 1:
                notes.append("study_loocv holds out each study once; repeats set to 1")
            v, repeats = ngroups, 1
            folds = _partition_folds(row_group, np.arange(ngroups), v, 1)
        else:
            if v > ngroups:
                raise SplitError(f"v={v} exceeds the number of groups ({ngroups})")
            for r in range(1, repeats + 1):
                rng = np.random.default_rng([seed, r])
                folds.extend(_grouped_repeat(row_group, ypos, v, rng, stratify, r))

    inner = {}
    if nested:
        inner = _inner_folds(ds, mode, folds, group_cols, time_col, inner_v, seed, stratify, tp, notes)

    plan = SplitPlan(
        mode=mode,
        v=v,
        repeats=repeats,
        n_rows=n,
        seed=seed,
        folds_explicit=tuple(folds),
        group_cols=group_cols,
        time_col=time_col,
        outcome=ds.roles.outcome,
        stratified=stratify,
        nested=nested,
        inner_v=inner_v if nested else None,
        inner=inner,
        time_params=tp,
        data_hash=ds.content_hash(),
        notes=tuple(notes),
    )
    return to_compact(plan) if compact else plan


def _inner_folds(ds, mode, folds, group_cols, time_col, inner_v, seed, stratify, tp, notes):
    inner = {}
    for f in folds:
        rows = f.train
        if rows.size == 0:
            continue
        if mode == "time_series":
            t = ds.columns[time_col].values
            order = rows[np.argsort(t[rows], kind="stable")]
            sub = _time_folds(order, t, inner_v, tp, repeat=1)
            inner[(f.repeat, f.fold)] = tuple(sub)
            continue
        if len(group_cols) > 1:
            codes = _union_groups([ds.group_codes(c)[rows] for c in group_cols])
        else:
            _, codes = np.unique(ds.group_codes(group_cols[0])[rows], return_inverse=True)
        k = min(inner_v, int(codes.max()) + 1)
        if k < inner_v:
            notes.append(f"outer fold {f.repeat}.{f.fold}: inner v reduced to {k} (too few groups)")
        if k < 2:
            continue
        rng = np.random.default_rng([seed, f.repeat, f.fold, 7])
        sub = _grouped_repeat(codes, _strat_target(ds, rows), k, rng, stratify, 1, rows=rows)
        inner[(f.repeat, f.fold)] = tuple(sub)
    return inner


# -- checks ---------------------------------------------------------------------


@dataclass
class OverlapReport:
    group_straddles: list[dict] = field(default_factory=list)
    time_violations: list[dict] = field(default_factory=list)
    row_overlaps: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.group_straddles or self.time_violations or self.row_overlaps)

    @property
    def n_violations(self) -> int:
        return len(self.group_straddles) + len(self.time_violations) + len(self.row_overlaps)

    def to_dict(self) -> dict:
        return {
            "group_straddles": self.group_straddles,
            "time_violations": self.time_violations,
            "row_overlaps": self.row_overlaps,
        }


def overlap_check(plan: SplitPlan, ds: Dataset, group_cols: Sequence[str] | None = None) -> OverlapReport:
    """List grouping straddles, time-order violations and train/test row overlaps."""
    rep = OverlapReport()
    cols = list(plan.group_cols if group_cols is None else group_cols)
    labels = {c: (ds.group_codes(c), ds.group_labels(c)) for c in cols}
    tcol = plan.time_col
    for f in plan.folds:
        both = np.intersect1d(f.train, f.test)
        if both.size:
            rep.row_overlaps.append({"repeat": f.repeat, "fold": f.fold, "rows": both.tolist()})
        for c, (codes, names) in labels.items():
            shared = np.intersect1d(codes[f.train], codes[f.test])
            for g in shared:
                rep.group_straddles.append({"repeat": f.repeat, "fold": f.fold, "column": c, "group": names[g]})
        if tcol is not None and f.train.size and f.test.size:
            t = ds.columns[tcol].values
            if t[f.train].max() >= t[f.test].min():
                late = f.train[t[f.train] >= t[f.test].min()]
                rep.time_violations.append({"repeat": f.repeat, "fold": f.fold, "rows": late.tolist()})
    return rep
