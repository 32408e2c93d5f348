"""Columnar datasets with role annotations, and CSV ingestion.

A :class:`Dataset` is an immutable bundle of typed columns plus a
:class:`RoleMap` that says which column is the outcome, which columns carry
dependence structure (subject, batch, study, time) and which are predictors.

Missing values use a dedicated marker per column kind: ``NaN`` for numeric
columns and :data:`MISSING_CODE` for categorical codes.
"""
from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MISSING_CODE = -1
DEFAULT_NA_TOKENS = ("", "NA")

NUMERIC = "numeric"
CATEGORICAL = "categorical"


class DataError(ValueError):
    """Raised for datasets that violate the role/shape contract."""


class TaskKind(str, Enum):
    BINARY = "binary_classification"
    REGRESSION = "regression"


@dataclass(frozen=True, eq=False)
class Column:
    """One typed column.

    Numeric values are float64 with ``NaN`` for missing. Categorical values
    are integer codes into ``levels`` with :data:`MISSING_CODE` for missing.
    """

    name: str
    kind: str
    values: np.ndarray
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind == NUMERIC:
            vals = np.asarray(self.values, dtype=np.float64)
        elif self.kind == CATEGORICAL:
            vals = np.asarray(self.values, dtype=np.int64)
            if vals.size and (vals.max() >= len(self.levels) or vals.min() < MISSING_CODE):
                raise DataError(f"column {self.name!r}: code out of range of its levels")
        else:
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "levels", tuple(str(lv) for lv in self.levels))

    def __len__(self):
        return len(self.values)

    @property
    def missing(self) -> np.ndarray:
        if self.kind == NUMERIC:
            return np.isnan(self.values)
        return self.values == MISSING_CODE

    def as_strings(self) -> list[str | None]:
        if self.kind == CATEGORICAL:
            return [None if c == MISSING_CODE else self.levels[c] for c in self.values]
        return [None if np.isnan(v) else repr(float(v)) for v in self.values]

    def equals(self, other: "Column") -> bool:
        if self.name != other.name or self.kind != other.kind or self.levels != other.levels:
            return False
        if self.kind == NUMERIC:
            return bool(np.array_equal(self.values, other.values, equal_nan=True))
        return bool(np.array_equal(self.values, other.values))

    @classmethod
    def categorical(cls, name: str, raw: Sequence, levels: Sequence[str] | None = None) -> "Column":
        """Build a categorical column from raw labels (``None``/NaN = missing).

        Levels default to first-appearance order.
        """
        labels = [None if _is_missing_scalar(v) else str(v) for v in raw]
        if levels is None:
            levels = list(dict.fromkeys(lb for lb in labels if lb is not None))
        index = {lv: i for i, lv in enumerate(levels)}
        try:
            codes = [MISSING_CODE if lb is None else index[lb] for lb in labels]
        except KeyError as exc:
            raise DataError(f"column {name!r}: value {exc.args[0]!r} not among levels") from None
        return cls(name, CATEGORICAL, np.asarray(codes, dtype=np.int64), tuple(levels))


def _is_missing_scalar(v) -> bool:
    if v is None:
        return True
    try:
        return bool(np.isnan(v))
    except TypeError:
        return False


@dataclass(frozen=True)
class RoleMap:
    outcome: str
    predictors: tuple[str, ...] = ()
    positive_class: str | None = None
    subject: str | None = None
    batch: str | None = None
    study: str | None = None
    time: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "predictors", tuple(self.predictors))

    @property
    def role_columns(self) -> dict[str, str]:
        out = {}
        for role in ("subject", "batch", "study", "time"):
            name = getattr(self, role)
            if name is not None:
                out[role] = name
        return out

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "predictors": list(self.predictors),
            "positive_class": self.positive_class,
            "subject": self.subject,
            "batch": self.batch,
            "study": self.study,
            "time": self.time,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RoleMap":
        return cls(**{k: (tuple(v) if k == "predictors" else v) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of equal-length columns with role annotations."""

    columns: Mapping[str, Column]
    roles: RoleMap
    task: TaskKind = TaskKind.BINARY
    notes: tuple[str, ...] = field(default=())

    def __post_init__(self):
        cols = dict(self.columns)
        object.__setattr__(self, "columns", cols)
        lengths = {len(c) for c in cols.values()}
        if len(lengths) > 1:
            raise DataError(f"columns have unequal lengths: {sorted(lengths)}")
        r = self.roles
        if r.outcome not in cols:
            raise DataError(f"outcome column {r.outcome!r} not found")
        if not r.predictors:
            raise DataError("at least one predictor is required")
        if r.outcome in r.predictors:
            raise DataError("outcome listed among predictors")
        for role, name in r.role_columns.items():
            if name not in cols:
                raise DataError(f"{role} column {name!r} not found")
            if name in r.predictors:
                raise DataError(f"{role} column {name!r} is also a predictor")
        missing = [p for p in r.predictors if p not in cols]
        if missing:
            raise DataError(f"predictor columns not found: {missing}")
        if r.time is not None and cols[r.time].kind != NUMERIC:
            raise DataError(f"time column {r.time!r} must be numeric")
        if self.n_rows < 2:
            raise DataError("a dataset needs at least 2 rows")
        out = cols[r.outcome]
        if out.missing.any():
            raise DataError(f"outcome column {r.outcome!r} has missing values")
        if self.task == TaskKind.BINARY:
            if out.kind != CATEGORICAL or len(out.levels) != 2:
                raise DataError("binary task needs a categorical outcome with exactly two levels")
            if len(np.unique(out.values)) < 2:
                raise DataError("binary outcome has fewer than 2 observed levels")
            if r.positive_class not in out.levels:
                raise DataError(f"positive class {r.positive_class!r} not among {out.levels}")
        elif out.kind != NUMERIC:
            raise DataError("regression task needs a numeric outcome")

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values())))

    @property
    def predictors(self) -> tuple[str, ...]:
        return self.roles.predictors

    def __getitem__(self, name: str) -> Column:
        return self.columns[name]

    @property
    def y(self) -> np.ndarray:
        """Outcome as float: 1.0/0.0 (positive/other) for binary tasks."""
        out = self.columns[self.roles.outcome]
        if self.task == TaskKind.BINARY:
            pos = out.levels.index(self.roles.positive_class)
            return (out.values == pos).astype(np.float64)
        return np.asarray(out.values, dtype=np.float64)

    def group_codes(self, name: str) -> np.ndarray:
        """Dense 0..G-1 codes of a grouping column in first-appearance order."""
        col = self.columns[name]
        if col.missing.any():
            raise DataError(f"grouping column {name!r} has missing values")
        _, first, inverse = np.unique(col.values, return_index=True, return_inverse=True)
        order = np.argsort(np.argsort(first, kind="stable"), kind="stable")
        return order[inverse]

    def group_labels(self, name: str) -> list[str]:
        """Labels of :meth:`group_codes`, index-aligned."""
        col = self.columns[name]
        codes = self.group_codes(name)
        labels: list[str] = [""] * (codes.max() + 1)
        strings = col.as_strings()
        for i, c in enumerate(codes):
            if not labels[c]:
                labels[c] = _pretty(strings[i])
        return labels

    def time_order(self) -> tuple[np.ndarray, bool]:
        """Row order by time, ties broken by insertion order; flag if ties exist."""
        t = self.columns[self.roles.time].values
        if np.isnan(t).any():
            raise DataError("time column has missing values")
        order = np.argsort(t, kind="stable")
        ties = bool(np.any(np.diff(t[order]) == 0))
        return order, ties

    def with_columns(self, new: Iterable[Column], as_predictors: bool = True) -> "Dataset":
        cols = dict(self.columns)
        preds = list(self.roles.predictors)
        for c in new:
            cols[c.name] = c
            if as_predictors and c.name not in preds:
                preds.append(c.name)
        return replace(self, columns=cols, roles=replace(self.roles, predictors=tuple(preds)))

    def with_predictors(self, predictors: Sequence[str]) -> "Dataset":
        return replace(self, roles=replace(self.roles, predictors=tuple(predictors)))

    def with_outcome(self, y: np.ndarray) -> "Dataset":
        """Copy with the outcome replaced (binary: 1.0 marks the positive class)."""
        out = self.columns[self.roles.outcome]
        y = np.asarray(y)
        if self.task == TaskKind.BINARY:
            pos = out.levels.index(self.roles.positive_class)
            codes = np.where(y > 0.5, pos, 1 - pos)
            col = Column(out.name, CATEGORICAL, codes, out.levels)
        else:
            col = Column(out.name, NUMERIC, y.astype(np.float64))
        cols = dict(self.columns)
        cols[out.name] = col
        return replace(self, columns=cols)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.task.value.encode())
        for name, col in self.columns.items():
            h.update(name.encode())
            h.update(col.kind.encode())
            h.update("\x1f".join(col.levels).encode())
            h.update(np.ascontiguousarray(col.values).tobytes())
        h.update(repr(self.roles.to_dict()).encode())
        return h.hexdigest()[:12]

    def equals(self, other: "Dataset") -> bool:
        return (
            self.roles == other.roles
            and self.task == other.task
            and list(self.columns) == list(other.columns)
            and all(self.columns[k].equals(other.columns[k]) for k in self.columns)
        )

    @classmethod
    def from_arrays(
        cls,
        data: Mapping[str, Sequence],
        outcome: str,
        predictors: Sequence[str] | None = None,
        positive_class: str | None = None,
        subject: str | None = None,
        batch: str | None = None,
        study: str | None = None,
        time: str | None = None,
        task: TaskKind | str | None = None,
    ) -> "Dataset":
        """Build a Dataset from in-memory arrays.

        Float/int arrays become numeric columns, everything else categorical.
        Grouping-role columns are kept as given. A 0/1 numeric outcome (or one
        with ``positive_class`` set) is treated as a binary label.
        """
        cols: dict[str, Column] = {}
        for name, raw in data.items():
            arr = np.asarray(raw)
            if name == outcome:
                continue
            if arr.dtype.kind in "fiub":
                cols[name] = Column(name, NUMERIC, arr.astype(np.float64))
            else:
                cols[name] = Column.categorical(name, list(arr))
        out_col, task, positive_class = _outcome_column(outcome, data[outcome], positive_class, task)
        cols = {name: (out_col if name == outcome else cols[name]) for name in data}
        role_names = {subject, batch, study, time, outcome} - {None}
        if predictors is None:
            predictors = [n for n in data if n not in role_names]
        roles = RoleMap(
            outcome=outcome,
            predictors=tuple(predictors),
            positive_class=positive_class,
            subject=subject,
            batch=batch,
            study=study,
            time=time,
        )
        return cls(cols, roles, task)


def _pretty(s: str | None) -> str:
    if s is None:
        return "NA"
    try:
        f = float(s)
    except ValueError:
        return s
    return str(int(f)) if f.is_integer() else s


def _outcome_column(name, raw, positive_class, task):
    arr = np.asarray(raw)
    if task is not None:
        task = TaskKind(task)
    numeric = arr.dtype.kind in "fiub"
    if numeric:
        vals = arr.astype(np.float64)
        if np.isnan(vals).any():
            raise DataError(f"outcome column {name!r} has missing values")
        binary_like = set(np.unique(vals)) <= {0.0, 1.0}
        if task is None:
            task = TaskKind.BINARY if (binary_like or positive_class is not None) else TaskKind.REGRESSION
        if task == TaskKind.REGRESSION:
            return Column(name, NUMERIC, vals), task, None
        labels = [_pretty(repr(float(v))) for v in vals]
        levels = sorted(set(labels), key=lambda s: float(s))
    else:
        labels = [None if _is_missing_scalar(v) else str(v) for v in arr]
        if any(lb is None for lb in labels):
            raise DataError(f"outcome column {name!r} has missing values")
        levels = list(dict.fromkeys(labels))
        if task is None:
            task = TaskKind.BINARY
        if task == TaskKind.REGRESSION:
            raise DataError("regression task needs a numeric outcome")
    if len(levels) < 2:
        raise DataError(f"outcome column {name!r} has fewer than 2 levels")
    if len(levels) > 2:
        raise DataError(f"outcome column {name!r} has {len(levels)} levels; only binary tasks are supported")
    positive_class = _default_positive(levels, positive_class)
    return Column.categorical(name, labels, levels), task, positive_class


def _default_positive(levels: Sequence[str], positive_class: str | None) -> str:
    if positive_class is not None:
        if str(positive_class) not in levels:
            raise DataError(f"positive class {positive_class!r} not among outcome levels {list(levels)}")
        return str(positive_class)
    if set(levels) == {"0", "1"}:
        return "1"
    warnings.warn(f"positive class not given; using second level {levels[1]!r}", stacklevel=3)
    return levels[1]


def _parse_float(token: str) -> float | None:
    try:
        return float(token)
    except ValueError:
        return None


def load_csv(
    path: str | Path,
    roles: RoleMap,
    delimiter: str = ",",
    na_tokens: Sequence[str] = DEFAULT_NA_TOKENS,
    has_header: bool = True,
    numeric: Sequence[str] = (),
    categorical: Sequence[str] = (),
    task: TaskKind | str | None = None,
) -> Dataset:
    """Read a CSV file into a :class:`Dataset`.

    Column kinds are inferred: a column is numeric when every non-missing
    cell parses as a float, categorical otherwise. ``numeric`` forces a
    column numeric (unparseable cells become missing) and ``categorical``
    forces it categorical. Grouping-role columns are always categorical.
    If ``roles.predictors`` is empty, every non-role column is a predictor.
    """
    path = Path(path)
    na = set(na_tokens)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    if not rows:
        raise DataError(f"{path}: empty file")
    if has_header:
        header, body = rows[0], rows[1:]
    else:
        header = [f"V{i + 1}" for i in range(len(rows[0]))]
        body = rows
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names")
    width = len(header)
    for lineno, row in enumerate(body, start=2 if has_header else 1):
        if len(row) != width:
            raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
    if roles.outcome not in header:
        raise DataError(f"{path}: outcome column {roles.outcome!r} not in header")

    force_cat = set(categorical) | {c for c in (roles.subject, roles.batch, roles.study) if c}
    force_num = set(numeric) | ({roles.time} if roles.time else set())
    data: dict[str, object] = {}
    for j, name in enumerate(header):
        cells = [row[j] for row in body]
        if name == roles.outcome:
            if any(c in na for c in cells):
                raise DataError(f"outcome column {name!r} has missing values")
            parsed = [_parse_float(c) for c in cells]
            is_num = all(p is not None for p in parsed) and name not in force_cat
            data[name] = np.asarray(parsed, dtype=np.float64) if is_num else np.asarray(cells, dtype=object)
            continue
        parsed = [None if c in na else _parse_float(c) for c in cells]
        unparseable = any(p is None and c not in na for p, c in zip(parsed, cells))
        if name in force_cat or (unparseable and name not in force_num):
            labels = [None if c in na else c for c in cells]
            data[name] = Column.categorical(name, labels)
        else:
            data[name] = Column(name, NUMERIC, np.asarray([np.nan if p is None else p for p in parsed]))

    role_names = {roles.subject, roles.batch, roles.study, roles.time, roles.outcome} - {None}
    predictors = roles.predictors or tuple(h for h in header if h not in role_names)
    out_col, task, positive = _outcome_column(roles.outcome, data[roles.outcome], roles.positive_class, task)
    cols = {name: (out_col if name == roles.outcome else data[name]) for name in header}
    return Dataset(cols, replace(roles, predictors=tuple(predictors), positive_class=positive), task)


def write_csv(ds: Dataset, path: str | Path, delimiter: str = ",", na_token: str = "") -> None:
    """Write ``ds`` so that :func:`load_csv` with the same roles reads it back identically."""
    names = list(ds.columns)
    strings = [ds.columns[n].as_strings() for n in names]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(names)
        for i in range(ds.n_rows):
            w.writerow([na_token if col[i] is None else col[i] for col in strings])


def column_matrix(ds: Dataset, cols: Sequence[str]) -> np.ndarray:
    """Numeric ``n x k`` matrix of the named columns, missing kept as NaN."""
    out = np.empty((ds.n_rows, len(cols)), dtype=np.float64)
    for j, name in enumerate(cols):
        col = ds.columns[name]
        if col.kind != NUMERIC:
            raise DataError(f"column {name!r} is categorical; a numeric column is required")
        out[:, j] = col.values
    return out
