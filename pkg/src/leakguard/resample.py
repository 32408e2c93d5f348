"""Cross-validated fitting with guarded preprocessing, and nested tuning."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from .data import Dataset, TaskKind
from .learners import LearnerSpec, _standardize, fit_learner, lambda_max
from .metrics import (
    HIGHER_IS_BETTER,
    METRIC_RANGE,
    canonical_metric,
    metric_suite,
    valid_metrics,
)
from .preprocess import Encoder, FittedPreproc, PreprocSpec, apply_preproc, fit_encoder, fit_preproc
from .splits import Fold, SplitPlan

log = logging.getLogger(__name__)

SUCCESS, SKIPPED, FAILED = "success", "skipped", "failed"


class ResampleError(RuntimeError):
    pass


class PlanMismatchError(ValueError):
    """The split plan was built for different data."""


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("LEAKGUARD_WORKERS", "1")))
    except ValueError:
        return 1


def t_interval(mean: float, sd: float, n: int, bounds=(-np.inf, np.inf)) -> tuple[float, float]:
    """mean +/- t(0.975, n-1) sd / sqrt(n), clipped to ``bounds``."""
    if n < 2 or not np.isfinite(sd):
        return float("nan"), float("nan")
    half = stats.t.ppf(0.975, n - 1) * sd / np.sqrt(n)
    lo, hi = bounds
    return float(max(mean - half, lo)), float(min(mean + half, hi))


@dataclass
class FoldRecord:
    repeat: int
    fold: int
    status: str
    metrics: dict = field(default_factory=dict)
    n_train: int = 0
    n_test: int = 0
    test_rows: np.ndarray | None = None
    predictions: np.ndarray | None = None
    features_final: int = 0
    preproc_hash: str | None = None
    intercept: float | None = None
    coef: np.ndarray | None = None
    lam: float | None = None
    message: str = ""
    warnings: list[str] = field(default_factory=list)

    def to_dict(self, with_predictions: bool = False) -> dict:
        d = {
            "repeat": self.repeat,
            "fold": self.fold,
            "status": self.status,
            "metrics": self.metrics,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "features_final": self.features_final,
            "preproc_hash": self.preproc_hash,
            "lambda": self.lam,
            "message": self.message,
            "warnings": self.warnings,
        }
        if with_predictions and self.predictions is not None:
            d["test_rows"] = self.test_rows.tolist()
            d["predictions"] = self.predictions.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FoldRecord":
        rows = d.get("test_rows")
        pred = d.get("predictions")
        return cls(
            repeat=int(d["repeat"]),
            fold=int(d["fold"]),
            status=d["status"],
            metrics={k: (float("nan") if v is None else float(v)) for k, v in d["metrics"].items()},
            n_train=int(d["n_train"]),
            n_test=int(d["n_test"]),
            test_rows=None if rows is None else np.asarray(rows, dtype=np.int64),
            predictions=None if pred is None else np.asarray(pred, dtype=np.float64),
            features_final=int(d.get("features_final", 0)),
            preproc_hash=d.get("preproc_hash"),
            lam=d.get("lambda"),
            message=d.get("message", ""),
            warnings=list(d.get("warnings", [])),
        )


@dataclass
class FitResult:
    task: TaskKind
    outcome: str
    positive_class: str | None
    learner: LearnerSpec
    preprocess: PreprocSpec
    metric_names: tuple[str, ...]
    folds: list[FoldRecord]
    plan_hash: str
    plan_mode: str
    seed: int
    guarded: bool = True
    n_rows: int = 0
    data_hash: str | None = None
    refit_payload: dict | None = None

    @property
    def status_counts(self) -> dict:
        out = {SUCCESS: 0, SKIPPED: 0, FAILED: 0}
        for f in self.folds:
            out[f.status] += 1
        return out

    @property
    def successful(self) -> list[FoldRecord]:
        return [f for f in self.folds if f.status == SUCCESS]

    def fold_metric(self, name: str) -> np.ndarray:
        name = canonical_metric(name)
        return np.array([f.metrics[name] for f in self.successful])

    def aggregate(self) -> dict:
        """Unweighted mean, sd and t interval across successful folds."""
        out = {}
        for name in self.metric_names:
            vals = self.fold_metric(name)
            n = vals.size
            mean = float(vals.mean()) if n else float("nan")
            sd = float(vals.std(ddof=1)) if n > 1 else float("nan")
            lo, hi = t_interval(mean, sd, n, METRIC_RANGE[name])
            out[name] = {"mean": mean, "sd": sd, "ci_lo": lo, "ci_hi": hi, "n_folds": n}
        return out

    def oof_predictions(self, repeat: int = 1) -> np.ndarray:
        """Out-of-fold predictions of one repeat (NaN where a row was never scored)."""
        out = np.full(self.n_rows, np.nan)
        for f in self.folds:
            if f.repeat == repeat and f.predictions is not None:
                out[f.test_rows] = f.predictions
        return out

    def summary(self) -> str:
        c = self.status_counts
        lines = [
            f"Fit ({'guarded' if self.guarded else 'leaky'}) | learner {self.learner.label} | plan {self.plan_hash}",
            f"Folds: {c[SUCCESS]} success, {c[SKIPPED]} skipped, {c[FAILED]} failed",
            "  metric        mean      sd   ci_lo   ci_hi",
        ]
        for name, a in self.aggregate().items():
            lines.append(f"  {name:<10} {a['mean']:7.4f} {a['sd']:7.4f} {a['ci_lo']:7.4f} {a['ci_hi']:7.4f}")
        return "\n".join(lines)

    def to_dict(self, with_predictions: bool = False) -> dict:
        return {
            "task": self.task.value,
            "outcome": self.outcome,
            "positive_class": self.positive_class,
            "learner": self.learner.to_dict(),
            "learner_label": self.learner.label,
            "preprocess": self.preprocess.to_string(),
            "metrics": list(self.metric_names),
            "guarded": self.guarded,
            "plan_hash": self.plan_hash,
            "plan_mode": self.plan_mode,
            "seed": self.seed,
            "n_rows": self.n_rows,
            "data_hash": self.data_hash,
            "status": self.status_counts,
            "aggregate": self.aggregate(),
            "folds": [f.to_dict(with_predictions) for f in self.folds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        """Rebuild a fit from its JSON form; refit data is not stored there."""
        return cls(
            task=TaskKind(d["task"]),
            outcome=d["outcome"],
            positive_class=d.get("positive_class"),
            learner=LearnerSpec.from_dict(d["learner"]),
            preprocess=PreprocSpec.parse(d["preprocess"]),
            metric_names=tuple(d["metrics"]),
            folds=[FoldRecord.from_dict(f) for f in d["folds"]],
            plan_hash=d["plan_hash"],
            plan_mode=d["plan_mode"],
            seed=int(d["seed"]),
            guarded=bool(d["guarded"]),
            n_rows=int(d["n_rows"]),
            data_hash=d.get("data_hash"),
        )

    @property
    def has_predictions(self) -> bool:
        return all(f.predictions is not None for f in self.successful)


# -- core fold routine ------------------------------------------------------


@dataclass(frozen=True)
class _Design:
    """Encoder + fitted preprocessing for one training set."""

    encoder: Encoder
    preproc: FittedPreproc

    def transform(self, ds: Dataset, rows) -> tuple[np.ndarray, list[str]]:
        X, notes = self.encoder.transform(ds, rows)
        return apply_preproc(self.preproc, X), notes


def fit_design(ds: Dataset, rows: np.ndarray, spec: PreprocSpec, seed: int = 0) -> _Design:
    """Fit encoding and preprocessing on ``rows`` only."""
    enc = fit_encoder(ds, rows)
    X, _ = enc.transform(ds, rows)
    fp = fit_preproc(
        spec, X, ds.y[rows], enc.feature_names, binary=ds.task == TaskKind.BINARY, seed=seed
    )
    return _Design(enc, fp)


def _check_task(ds: Dataset, learner: LearnerSpec):
    if ds.task == TaskKind.BINARY and not learner.is_binary:
        raise ResampleError(f"learner {learner.label} does not fit a binary outcome")
    if ds.task == TaskKind.REGRESSION and learner.is_binary:
        raise ResampleError(f"learner {learner.label} needs a binary outcome")


def run_fold(
    ds: Dataset,
    fold: Fold,
    learner: LearnerSpec,
    preprocess: PreprocSpec,
    metric_names: Sequence[str],
    seed: int,
    guard_design: _Design | None = None,
    threshold: float = 0.5,
) -> FoldRecord:
    """Preprocess, fit and score one fold.

    ``guard_design`` replaces the per-fold preprocessing with a design fitted
    elsewhere (the leaky comparator fits it on every row).
    """
    rec = FoldRecord(fold.repeat, fold.fold, SUCCESS, n_train=fold.n_train, n_test=fold.n_test)
    rec.test_rows = fold.test
    if fold.skipped or fold.n_train == 0:
        rec.status, rec.message = SKIPPED, "empty training set"
        return rec
    y = ds.y
    try:
        design = guard_design or fit_design(ds, fold.train, preprocess, seed)
        Xtr, w1 = design.transform(ds, fold.train)
        Xte, w2 = design.transform(ds, fold.test)
        rec.warnings.extend(design.preproc.warnings + w1 + w2)
        if np.isnan(Xtr).any() or np.isnan(Xte).any():
            raise ResampleError("missing predictor values remain; add impute=median")
        rng = np.random.default_rng([seed, fold.repeat, fold.fold])
        model = fit_learner(learner, Xtr, y[fold.train], rng)
        rec.warnings.extend(model.warnings)
        pred = model.predict(Xte)
    except Exception as exc:  # learner/preprocessing failure is recorded, not fatal
        rec.status, rec.message = FAILED, f"{type(exc).__name__}: {exc}"
        return rec
    rec.predictions = pred
    rec.features_final = design.preproc.n_features_out
    rec.preproc_hash = design.preproc.fingerprint()
    rec.intercept, rec.coef, rec.lam = model.intercept, model.coef, model.lam
    vals = metric_suite(ds.task, pred, y[fold.test], metric_names, threshold)
    rec.metrics = {m.name: m.value for m in vals}
    missing = [m for m in metric_names if m not in rec.metrics]
    if missing:
        rec.status = SKIPPED
        rec.message = f"metric(s) {missing} undefined on this test set"
    return rec


def _resolve_metrics(ds: Dataset, metrics) -> tuple[str, ...]:
    if metrics is None:
        return ("auc",) if ds.task == TaskKind.BINARY else ("rmse",)
    if isinstance(metrics, str):
        metrics = [metrics]
    names = tuple(canonical_metric(m) for m in metrics)
    bad = [m for m in names if m not in valid_metrics(ds.task)]
    if bad:
        raise ResampleError(f"metric(s) {bad} not valid for {ds.task.value}")
    return names


def _check_plan(ds: Dataset, plan: SplitPlan):
    current = ds.content_hash()
    if plan.n_rows != ds.n_rows:
        raise PlanMismatchError(
            f"stale plan {plan.hash} (data {plan.data_hash}, {plan.n_rows} rows) does not match "
            f"data {current} ({ds.n_rows} rows); rebuild the plan"
        )
    if plan.data_hash is not None and plan.data_hash != current:
        raise PlanMismatchError(
            f"stale plan {plan.hash} was built on data {plan.data_hash}, current data is {current}; rebuild the plan"
        )


def fit_resample(
    ds: Dataset,
    plan: SplitPlan,
    learner: LearnerSpec | None = None,
    preprocess: PreprocSpec | str | None = None,
    metrics=None,
    seed: int = 1,
    store_refit_data: bool = True,
    guarded: bool = True,
    n_jobs: int | None = None,
    threshold: float = 0.5,
    check_data: bool = True,
) -> FitResult:
    """Fit and score ``learner`` on every fold of ``plan``.

    With ``guarded=True`` (default) encoding and preprocessing are estimated
    on each training fold. ``guarded=False`` estimates them once on all rows,
    reproducing the common leaky workflow for comparison.
    """
    learner = learner or LearnerSpec()
    if not isinstance(preprocess, PreprocSpec):
        preprocess = PreprocSpec.parse(preprocess)
    _check_task(ds, learner)
    names = _resolve_metrics(ds, metrics)
    if check_data:
        _check_plan(ds, plan)
    elif plan.n_rows != ds.n_rows:
        raise ResampleError(f"plan covers {plan.n_rows} rows but the data has {ds.n_rows}")
    shared = None if guarded else fit_design(ds, np.arange(ds.n_rows), preprocess, seed)
    folds = plan.folds
    n_jobs = default_workers() if n_jobs is None else n_jobs
    if n_jobs > 1 and len(folds) > 1:
        records = Parallel(n_jobs=n_jobs)(
            delayed(run_fold)(ds, f, learner, preprocess, names, seed, shared, threshold) for f in folds
        )
    else:
        records = [run_fold(ds, f, learner, preprocess, names, seed, shared, threshold) for f in folds]
    if not any(r.status == SUCCESS for r in records):
        msgs = sorted({r.message for r in records if r.message})
        raise ResampleError("no fold succeeded: " + "; ".join(msgs[:3]))
    payload = None
    if store_refit_data:
        payload = {"dataset": ds, "learner": learner, "preprocess": preprocess, "plan": plan}
    return FitResult(
        task=ds.task,
        outcome=ds.roles.outcome,
        positive_class=ds.roles.positive_class,
        learner=learner,
        preprocess=preprocess,
        metric_names=names,
        folds=list(records),
        plan_hash=plan.hash,
        plan_mode=plan.mode,
        seed=seed,
        guarded=guarded,
        n_rows=ds.n_rows,
        data_hash=ds.content_hash(),
        refit_payload=payload,
    )


@dataclass(frozen=True)
class RepeatSummary:
    repeats: np.ndarray
    values: np.ndarray
    n_test: np.ndarray
    dropped: tuple[int, ...] = ()


def aggregate_repeats(fr: FitResult, metric: str | None = None) -> RepeatSummary:
    """Test-size-weighted mean of successful folds per repeat."""
    metric = canonical_metric(metric or fr.metric_names[0])
    sums: dict[int, float] = {}
    weights: dict[int, int] = {}
    all_repeats = sorted({f.repeat for f in fr.folds})
    for f in fr.folds:
        if f.status != SUCCESS or metric not in f.metrics:
            continue
        sums[f.repeat] = sums.get(f.repeat, 0.0) + f.n_test * f.metrics[metric]
        weights[f.repeat] = weights.get(f.repeat, 0) + f.n_test
    kept = [r for r in all_repeats if weights.get(r, 0) > 0]
    dropped = tuple(r for r in all_repeats if r not in kept)
    if dropped:
        log.warning("repeats %s have no successful folds and are dropped", list(dropped))
    return RepeatSummary(
        np.array(kept, dtype=np.int64),
        np.array([sums[r] / weights[r] for r in kept]),
        np.array([weights[r] for r in kept], dtype=np.int64),
        dropped,
    )


# -- nested tuning ----------------------------------------------------------

SELECTIONS = ("best", "one_std_err")


def candidate_grid(learner: LearnerSpec, X: np.ndarray, y: np.ndarray, size: int) -> np.ndarray:
    """``size`` log-spaced penalties from lambda_max down three decades (descending)."""
    if size < 1:
        raise ResampleError("grid must have at least one candidate")
    Xs, _, _, active = _standardize(X)
    alpha = learner.alpha if learner.kind == "logistic_elastic_net" else 0.0
    yy = y if learner.is_binary else y - y.mean()
    lmax = lambda_max(Xs[:, active], yy, alpha) if active.any() else 1.0
    if not lmax > 0:
        lmax = 1.0
    if size == 1:
        return np.array([lmax * 0.1])
    return np.geomspace(lmax, lmax * 1e-3, size)


@dataclass
class TuneFold:
    repeat: int
    fold: int
    candidates: np.ndarray
    inner_mean: np.ndarray
    inner_sd: np.ndarray
    n_inner: int
    selected: float
    outer: FoldRecord

    def to_dict(self) -> dict:
        return {
            "repeat": self.repeat,
            "fold": self.fold,
            "candidates": self.candidates.tolist(),
            "inner_mean": self.inner_mean.tolist(),
            "inner_sd": self.inner_sd.tolist(),
            "n_inner": self.n_inner,
            "selected": self.selected,
            "outer": self.outer.to_dict(),
        }


@dataclass
class TuneResult:
    folds: list[TuneFold]
    selection: str
    metric_names: tuple[str, ...]
    learner: LearnerSpec
    preprocess: PreprocSpec
    plan_hash: str
    final_lambda: float | None = None
    final_model: object | None = None

    @property
    def outer_records(self) -> list[FoldRecord]:
        return [f.outer for f in self.folds]

    @property
    def selected(self) -> list[float]:
        return [f.selected for f in self.folds]

    def aggregate(self) -> dict:
        out = {}
        for name in self.metric_names:
            vals = np.array([r.metrics[name] for r in self.outer_records if r.status == SUCCESS])
            n = vals.size
            mean = float(vals.mean()) if n else float("nan")
            sd = float(vals.std(ddof=1)) if n > 1 else float("nan")
            lo, hi = t_interval(mean, sd, n, METRIC_RANGE[name])
            out[name] = {"mean": mean, "sd": sd, "ci_lo": lo, "ci_hi": hi, "n_folds": n}
        return out

    def summary(self) -> str:
        lines = [f"Nested tuning ({self.selection}) | learner {self.learner.label} | plan {self.plan_hash}"]
        for name, a in self.aggregate().items():
            lines.append(f"  outer {name}: mean {a['mean']:.4f} sd {a['sd']:.4f} [{a['ci_lo']:.4f}, {a['ci_hi']:.4f}]")
        lines.append("  selected penalty per outer fold: " + ", ".join(f"{s:.4g}" for s in self.selected))
        if self.final_lambda is not None:
            lines.append(f"  final penalty (median): {self.final_lambda:.4g}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "selection": self.selection,
            "metrics": list(self.metric_names),
            "learner": self.learner.to_dict(),
            "preprocess": self.preprocess.to_string(),
            "plan_hash": self.plan_hash,
            "aggregate": self.aggregate(),
            "final_lambda": self.final_lambda,
            "folds": [f.to_dict() for f in self.folds],
        }


def select_candidate(candidates, mean, sd, n_inner, metric, rule) -> int:
    """Index of the chosen candidate; ``candidates`` are penalties, larger = more regularized."""
    sign = 1.0 if HIGHER_IS_BETTER[metric] else -1.0
    score = sign * np.asarray(mean, dtype=float)
    if not np.isfinite(score).any():
        raise ResampleError("no candidate could be evaluated on the inner folds")
    best = int(np.nanargmax(score))
    if rule == "best":
        return best
    se = sd[best] / np.sqrt(n_inner) if n_inner > 1 and np.isfinite(sd[best]) else 0.0
    ok = np.flatnonzero(score >= score[best] - se)
    return int(ok[np.argmax(np.asarray(candidates)[ok])])


def tune_resample(
    ds: Dataset,
    plan: SplitPlan,
    learner: LearnerSpec | None = None,
    preprocess: PreprocSpec | str | None = None,
    grid: int | Sequence[float] = 5,
    metrics=None,
    selection: str = "one_std_err",
    refit: bool = True,
    seed: int = 1,
) -> TuneResult:
    """Nested CV over the penalty of an elastic-net or ridge learner.

    Candidates are evaluated only on the inner folds of each outer training
    set; the chosen penalty is refit on the outer training set and scored on
    the outer test set. With ``refit`` the final model uses the median of the
    per-fold selections and all rows.
    """
    learner = learner or LearnerSpec("logistic_elastic_net")
    if learner.kind not in ("logistic_elastic_net", "linear_ridge"):
        raise ResampleError(f"learner {learner.label} has no tunable penalty")
    if selection not in SELECTIONS:
        raise ResampleError(f"selection must be one of {SELECTIONS}")
    if not plan.nested or not plan.inner:
        raise ResampleError("tuning needs a nested plan (make_split_plan(..., nested=True))")
    if not isinstance(preprocess, PreprocSpec):
        preprocess = PreprocSpec.parse(preprocess)
    _check_task(ds, learner)
    _check_plan(ds, plan)
    names = _resolve_metrics(ds, metrics)
    metric = names[0]
    if not isinstance(grid, int):
        grid = np.sort(np.asarray(grid, dtype=float))[::-1]
        if grid.size == 0:
            raise ResampleError("empty grid")
    y = ds.y
    out = []
    for fold in plan.folds:
        inner = plan.inner.get((fold.repeat, fold.fold), ())
        if fold.skipped or not inner:
            rec = FoldRecord(fold.repeat, fold.fold, SKIPPED, n_train=fold.n_train, n_test=fold.n_test,
                             message="no inner folds")
            out.append(TuneFold(fold.repeat, fold.fold, np.zeros(0), np.zeros(0), np.zeros(0), 0, float("nan"), rec))
            continue
        if isinstance(grid, int):
            design = fit_design(ds, fold.train, preprocess, seed)
            Xtr, _ = design.transform(ds, fold.train)
            cands = candidate_grid(learner, np.nan_to_num(Xtr), y[fold.train], grid)
        else:
            cands = grid
        scores = np.full((len(inner), cands.size), np.nan)
        for i, f_in in enumerate(inner):
            for j, lam in enumerate(cands):
                rec = run_fold(ds, f_in, learner.with_lambda(lam), preprocess, (metric,), seed)
                if rec.status == SUCCESS:
                    scores[i, j] = rec.metrics[metric]
        good = np.isfinite(scores).all(axis=1)
        n_inner = int(good.sum())
        if n_inner == 0:
            rec = FoldRecord(fold.repeat, fold.fold, FAILED, n_train=fold.n_train, n_test=fold.n_test,
                             message="every inner fold failed")
            out.append(TuneFold(fold.repeat, fold.fold, cands, np.full(cands.size, np.nan),
                                np.full(cands.size, np.nan), 0, float("nan"), rec))
            continue
        mean = scores[good].mean(axis=0)
        sd = scores[good].std(axis=0, ddof=1) if n_inner > 1 else np.full(cands.size, np.nan)
        k = select_candidate(cands, mean, sd, n_inner, metric, selection)
        lam = float(cands[k])
        rec = run_fold(ds, fold, learner.with_lambda(lam), preprocess, names, seed)
        out.append(TuneFold(fold.repeat, fold.fold, cands, mean, sd, n_inner, lam, rec))
    res = TuneResult(out, selection, names, learner, preprocess, plan.hash)
    chosen = [f.selected for f in out if np.isfinite(f.selected)]
    if not chosen:
        raise ResampleError("no outer fold produced a selection")
    res.final_lambda = float(np.median(chosen))
    if refit:
        rows = np.arange(ds.n_rows)
        design = fit_design(ds, rows, preprocess, seed)
        X, _ = design.transform(ds, rows)
        res.final_model = fit_learner(learner.with_lambda(res.final_lambda), X, y, np.random.default_rng(seed))
    return res


def refit_with(fr: FitResult, ds: Dataset | None = None, **changes) -> FitResult:
    """Re-run a stored fit, optionally on modified data or settings."""
    if fr.refit_payload is None:
        raise ResampleError("this fit was run with store_refit_data=False")
    p = fr.refit_payload
    kwargs = dict(learner=p["learner"], preprocess=p["preprocess"], metrics=fr.metric_names,
                  seed=fr.seed, guarded=fr.guarded, store_refit_data=False)
    kwargs.update(changes)
    data = p["dataset"] if ds is None else ds
    return fit_resample(data, p["plan"], check_data=ds is None, **kwargs)


__all__ = [
    "FoldRecord",
    "PlanMismatchError",
    "ResampleError",
    "FitResult",
    "RepeatSummary",
    "TuneFold",
    "TuneResult",
    "aggregate_repeats",
    "candidate_grid",
    "fit_design",
    "fit_resample",
    "refit_with",
    "run_fold",
    "select_candidate",
    "t_interval",
    "tune_resample",
]
