"""Train-fold-only preprocessing.

Every statistic (medians, moments, kept features, loadings, category
levels) is estimated from training rows and then applied unchanged to any
other rows.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import CATEGORICAL, MISSING_CODE, Dataset

MAD_SCALE = 1.4826

STEP_KINDS = (
    "impute_median",
    "normalize_zscore",
    "normalize_robust",
    "filter_variance",
    "filter_iqr",
    "select_ttest",
    "select_lasso",
    "project_pca",
)
# canonical stage of each step: impute -> normalize -> filter -> select/project
_STAGE = {
    "impute_median": 0,
    "normalize_zscore": 1,
    "normalize_robust": 1,
    "filter_variance": 2,
    "filter_iqr": 2,
    "select_ttest": 3,
    "select_lasso": 3,
    "project_pca": 3,
}


class PreprocError(ValueError):
    pass


@dataclass(frozen=True)
class Step:
    kind: str
    param: float | None = None

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise PreprocError(f"unknown preprocessing step {self.kind!r}")

    def label(self) -> str:
        return self.kind if self.param is None else f"{self.kind}({self.param:g})"


@dataclass(frozen=True)
class PreprocSpec:
    """Ordered preprocessing steps; each kind appears at most once."""

    steps: tuple[Step, ...] = ()

    def __post_init__(self):
        kinds = [s.kind for s in self.steps]
        if len(set(kinds)) != len(kinds):
            raise PreprocError("each preprocessing step may appear only once")
        if sum(k.startswith("normalize") for k in kinds) > 1:
            raise PreprocError("choose one normalization")
        if "impute_median" in kinds:
            imp = kinds.index("impute_median")
            for i, k in enumerate(kinds):
                if _STAGE[k] == 3 and i < imp:
                    raise PreprocError(f"{k} must come after imputation")

    @classmethod
    def parse(cls, text: str | None) -> "PreprocSpec":
        """Parse ``impute=median,normalize=zscore,filter=variance:0.01,select=ttest:100``.

        Steps are placed in the canonical order impute, normalize, filter,
        select/project. ``none`` or an empty string gives no steps.
        """
        if text is None or text.strip().lower() in ("", "none"):
            return cls(())
        steps = []
        for item in text.split(","):
            item = item.strip()
            if not item:
                continue
            if "=" not in item:
                raise PreprocError(f"expected key=value, got {item!r}")
            key, val = (s.strip().lower() for s in item.split("=", 1))
            name, _, arg = val.partition(":")
            kind = {
                ("impute", "median"): "impute_median",
                ("normalize", "zscore"): "normalize_zscore",
                ("normalize", "robust"): "normalize_robust",
                ("filter", "variance"): "filter_variance",
                ("filter", "iqr"): "filter_iqr",
                ("select", "ttest"): "select_ttest",
                ("select", "lasso"): "select_lasso",
                ("select", "pca"): "project_pca",
                ("project", "pca"): "project_pca",
            }.get((key, name))
            if kind is None:
                raise PreprocError(f"unknown preprocessing option {item!r}")
            param = None
            if arg:
                try:
                    param = float(arg)
                except ValueError:
                    raise PreprocError(f"bad numeric argument in {item!r}") from None
            elif kind in ("select_ttest", "project_pca"):
                raise PreprocError(f"{kind} needs a count, e.g. {key}={name}:10")
            elif kind in ("filter_variance", "filter_iqr"):
                param = 0.0
            steps.append(Step(kind, param))
        steps.sort(key=lambda s: _STAGE[s.kind])
        return cls(tuple(steps))

    def to_string(self) -> str:
        names = {
            "impute_median": "impute=median",
            "normalize_zscore": "normalize=zscore",
            "normalize_robust": "normalize=robust",
            "filter_variance": "filter=variance",
            "filter_iqr": "filter=iqr",
            "select_ttest": "select=ttest",
            "select_lasso": "select=lasso",
            "project_pca": "project=pca",
        }
        parts = []
        for s in self.steps:
            p = names[s.kind]
            if s.param is not None:
                p += f":{s.param:g}"
            parts.append(p)
        return ",".join(parts) or "none"

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(s.kind for s in self.steps)


# -- categorical encoding ---------------------------------------------------


@dataclass(frozen=True)
class Encoder:
    """Dummy coding of predictors with levels seen in the training rows.

    Numeric columns pass through. A categorical column with training levels
    ``L1..Lk`` becomes ``k - 1`` indicators (``L1`` is the reference). A
    missing category gives NaN indicators; a level unseen in training gives
    all-zero indicators and a warning.
    """

    columns: tuple[str, ...]
    levels: dict = field(default_factory=dict)

    @property
    def feature_names(self) -> list[str]:
        out = []
        for c in self.columns:
            if c in self.levels:
                out.extend(f"{c}={lv}" for lv in self.levels[c][1:])
            else:
                out.append(c)
        return out

    def transform(self, ds: Dataset, rows: np.ndarray | None = None) -> tuple[np.ndarray, list[str]]:
        rows = np.arange(ds.n_rows) if rows is None else np.asarray(rows)
        blocks = []
        notes = []
        for c in self.columns:
            col = ds.columns[c]
            if c not in self.levels:
                if col.kind == CATEGORICAL:
                    raise PreprocError(f"column {c!r} was numeric when the encoder was fitted")
                blocks.append(col.values[rows][:, None].astype(np.float64))
                continue
            labels = np.array([None if v == MISSING_CODE else col.levels[v] for v in col.values[rows]], dtype=object)
            lv = self.levels[c]
            block = np.zeros((rows.size, max(len(lv) - 1, 0)))
            for j, level in enumerate(lv[1:]):
                block[:, j] = labels == level
            miss = labels == None  # noqa: E711 - elementwise on object array
            block[miss] = np.nan
            unseen = ~miss & ~np.isin(labels, np.array(lv, dtype=object))
            if unseen.any():
                names = sorted(set(labels[unseen]))
                notes.append(f"column {c!r}: unseen level(s) {names} coded as the reference level")
            blocks.append(block)
        X = np.hstack(blocks) if blocks else np.empty((rows.size, 0))
        return X, notes


def fit_encoder(ds: Dataset, rows: np.ndarray | None = None, columns: Sequence[str] | None = None) -> Encoder:
    rows = np.arange(ds.n_rows) if rows is None else np.asarray(rows)
    columns = tuple(ds.predictors if columns is None else columns)
    levels = {}
    for c in columns:
        col = ds.columns[c]
        if col.kind == CATEGORICAL:
            seen = np.unique(col.values[rows])
            seen = seen[seen != MISSING_CODE]
            levels[c] = tuple(col.levels[i] for i in sorted(seen))
    return Encoder(columns, levels)


# -- fitted steps -----------------------------------------------------------


@dataclass
class FittedPreproc:
    spec: PreprocSpec
    input_names: list[str]
    output_names: list[str]
    params: list[dict]
    warnings: list[str] = field(default_factory=list)

    @property
    def n_features_in(self) -> int:
        return len(self.input_names)

    @property
    def n_features_out(self) -> int:
        return len(self.output_names)

    def transform(self, X) -> np.ndarray:
        return apply_preproc(self, X)

    def fingerprint(self) -> str:
        """Digest of all fitted parameters (bit-exact)."""
        h = hashlib.sha256()
        h.update(json.dumps([self.spec.to_string(), self.input_names, self.output_names]).encode())
        for p in self.params:
            for k in sorted(p):
                h.update(k.encode())
                v = p[k]
                if isinstance(v, np.ndarray):
                    h.update(np.ascontiguousarray(v).tobytes())
                else:
                    h.update(repr(v).encode())
        return h.hexdigest()[:12]

    def to_dict(self) -> dict:
        def enc(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            return v

        return {
            "spec": self.spec.to_string(),
            "input_names": self.input_names,
            "output_names": self.output_names,
            "params": [{k: enc(v) for k, v in p.items()} for p in self.params],
            "warnings": self.warnings,
        }


def _nanmedian(X):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmedian(X, axis=0)


def welch_t(X, y) -> np.ndarray:
    """Welch two-sample t statistic per column (class 1 minus class 0)."""
    a = X[y > 0.5]
    b = X[y <= 0.5]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise PreprocError("t-test selection needs at least 2 training rows per class")
    va = a.var(axis=0, ddof=1) / a.shape[0]
    vb = b.var(axis=0, ddof=1) / b.shape[0]
    se = np.sqrt(va + vb)
    diff = a.mean(axis=0) - b.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, diff / np.where(se > 0, se, 1.0), 0.0)
    return t


def _abs_corr(X, y):
    xc = X - X.mean(axis=0)
    yc = y - y.mean()
    den = np.sqrt((xc * xc).sum(axis=0) * (yc @ yc))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, np.abs(xc.T @ yc) / np.where(den > 0, den, 1.0), 0.0)


def _top_k(score, k):
    # stable ordering: larger score first, then column order
    order = np.lexsort((np.arange(score.size), -score))
    return np.sort(order[:k])


def fit_preproc(
    spec: PreprocSpec,
    X_train,
    y_train=None,
    feature_names: Sequence[str] | None = None,
    binary: bool = True,
    seed: int = 0,
) -> FittedPreproc:
    """Estimate every step on the training rows only.

    Parameters
    ----------
    spec : PreprocSpec
    X_train : (n, p) array
        Training predictors; NaN marks missing.
    y_train : (n,) array, optional
        Needed by supervised selection steps.
    binary : bool
        Outcome type, used by the supervised steps.
    seed : int
        Seeds the internal CV of lasso selection.
    """
    X = np.array(X_train, dtype=np.float64, copy=True)
    if X.ndim != 2 or X.shape[0] == 0:
        raise PreprocError("training matrix must be 2-D and non-empty")
    names = list(feature_names) if feature_names is not None else [f"x{j + 1}" for j in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise PreprocError("feature_names length does not match the matrix")
    input_names = list(names)
    y = None if y_train is None else np.asarray(y_train, dtype=np.float64)
    params = []
    notes: list[str] = []
    for step in spec.steps:
        p, X, names = _fit_step(step, X, y, names, binary, seed, notes)
        params.append(p)
    return FittedPreproc(spec, input_names, names, params, notes)


def _fit_step(step, X, y, names, binary, seed, notes):
    kind = step.kind
    if kind == "impute_median":
        med = _nanmedian(X)
        allmiss = np.isnan(med)
        if allmiss.any():
            notes.append(f"{int(allmiss.sum())} column(s) entirely missing in training; imputed with 0")
            med = np.where(allmiss, 0.0, med)
        p = {"kind": kind, "median": med}
        return p, _apply_step(p, X), names
    if kind == "normalize_zscore":
        center = X.mean(axis=0)
        scale = X.std(axis=0, ddof=1) if X.shape[0] > 1 else np.zeros(X.shape[1])
        zero = ~(scale > 0)
        if zero.any():
            notes.append(f"{int(zero.sum())} zero-variance column(s) centered only")
        p = {"kind": kind, "center": center, "scale": np.where(zero, 1.0, scale)}
        return p, _apply_step(p, X), names
    if kind == "normalize_robust":
        center = np.median(X, axis=0)
        scale = MAD_SCALE * np.median(np.abs(X - center), axis=0)
        zero = ~(scale > 0)
        if zero.any():
            notes.append(f"{int(zero.sum())} zero-MAD column(s) centered only")
        p = {"kind": kind, "center": center, "scale": np.where(zero, 1.0, scale)}
        return p, _apply_step(p, X), names
    if kind in ("filter_variance", "filter_iqr"):
        thr = 0.0 if step.param is None else step.param
        if kind == "filter_variance":
            spread = X.var(axis=0, ddof=1) if X.shape[0] > 1 else np.zeros(X.shape[1])
        else:
            q75, q25 = np.percentile(X, [75, 25], axis=0)
            spread = q75 - q25
        keep = np.flatnonzero(spread > thr)
        if keep.size == 0:
            raise PreprocError(f"{kind} removed every feature")
        p = {"kind": kind, "keep": keep}
        return p, X[:, keep], [names[j] for j in keep]
    if kind == "select_ttest":
        if y is None:
            raise PreprocError("select_ttest needs the training outcome")
        k = int(step.param)
        if k < 1:
            raise PreprocError("select_ttest needs k >= 1")
        if k >= X.shape[1]:
            if k > X.shape[1]:
                notes.append(f"select_ttest k={k} exceeds {X.shape[1]} features; all kept")
            keep = np.arange(X.shape[1])
        else:
            score = np.abs(welch_t(X, y)) if binary else _abs_corr(X, y)
            keep = _top_k(np.nan_to_num(score), k)
        p = {"kind": kind, "keep": keep}
        return p, X[:, keep], [names[j] for j in keep]
    if kind == "select_lasso":
        if y is None:
            raise PreprocError("select_lasso needs the training outcome")
        from .learners import fit_elastic_net

        fam = "binomial" if binary else "gaussian"
        fit = fit_elastic_net(
            X, y, alpha=1.0, lam=step.param, family=fam, cv_folds=3, rng=np.random.default_rng(seed)
        )
        keep = np.flatnonzero(fit.coef != 0)
        if keep.size == 0:
            notes.append("select_lasso kept no features; the strongest single feature is kept")
            score = np.abs(welch_t(X, y)) if binary else _abs_corr(X, y)
            keep = _top_k(np.nan_to_num(score), 1)
        p = {"kind": kind, "keep": keep, "lambda": float(fit.lam)}
        return p, X[:, keep], [names[j] for j in keep]
    if kind == "project_pca":
        m = int(step.param)
        if m < 1:
            raise PreprocError("project_pca needs m >= 1")
        center = X.mean(axis=0)
        _, _, vt = np.linalg.svd(X - center, full_matrices=False)
        if m > vt.shape[0]:
            notes.append(f"project_pca m={m} exceeds rank bound {vt.shape[0]}; using {vt.shape[0]}")
            m = vt.shape[0]
        load = vt[:m].T.copy()
        # sign convention: largest-magnitude loading positive
        flip = np.sign(load[np.argmax(np.abs(load), axis=0), np.arange(m)])
        load *= np.where(flip == 0, 1.0, flip)
        p = {"kind": kind, "center": center, "loadings": load}
        return p, _apply_step(p, X), [f"PC{j + 1}" for j in range(m)]
    raise PreprocError(f"unknown step {kind!r}")  # pragma: no cover


def _apply_step(p: dict, X: np.ndarray) -> np.ndarray:
    kind = p["kind"]
    if kind == "impute_median":
        miss = np.isnan(X)
        if miss.any():
            X = X.copy()
            X[miss] = np.broadcast_to(p["median"], X.shape)[miss]
        return X
    if kind in ("normalize_zscore", "normalize_robust"):
        return (X - p["center"]) / p["scale"]
    if kind == "project_pca":
        return (X - p["center"]) @ p["loadings"]
    return X[:, p["keep"]]


def apply_preproc(fp: FittedPreproc, X_any) -> np.ndarray:
    """Apply fitted steps to any rows; no statistic of ``X_any`` is used."""
    X = np.asarray(X_any, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != fp.n_features_in:
        raise PreprocError(f"expected {fp.n_features_in} input columns, got {X.shape[-1] if X.ndim else 0}")
    for p in fp.params:
        X = _apply_step(p, X)
    return np.array(X, dtype=np.float64, copy=True)
