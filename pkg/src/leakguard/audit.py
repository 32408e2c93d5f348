"""Post hoc leakage diagnostics for a cross-validated fit."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.stats import rankdata

from .data import CATEGORICAL, NUMERIC, Dataset, TaskKind
from .learners import fit_logistic_irls
from .metrics import HIGHER_IS_BETTER, UndefinedMetric, auc, canonical_metric, compute_metric
from .resample import SUCCESS, FitResult, ResampleError, fit_resample
from .splits import SplitPlan, overlap_check

log = logging.getLogger(__name__)

MECHANISMS = ("subject_overlap", "batch_confounded", "preprocessing_leak", "target_leakage")


class AuditError(ValueError):
    pass


def phipson_smyth(b: int, B: int) -> float:
    """Monte Carlo p-value (b + 1) / (B + 1)."""
    return (b + 1.0) / (B + 1.0)


# -- permutation gap --------------------------------------------------------


@dataclass(frozen=True)
class PermutationConfig:
    B: int = 200
    perm_refit: str | bool = "auto"
    perm_stratify: bool = False
    return_perm: bool = True
    metric: str | None = None
    seed: int = 1
    scope: str = "within_fold"

    def __post_init__(self):
        if self.scope not in ("within_fold", "global"):
            raise AuditError("scope must be 'within_fold' or 'global'")
        if self.B < 1:
            raise AuditError("B must be >= 1")
        if self.perm_refit not in ("auto", True, False):
            raise AuditError("perm_refit must be 'auto', True or False")


@dataclass
class PermGapResult:
    metric: str
    observed: float
    perm_mean: float
    perm_sd: float
    gap: float
    p_value: float
    method: str
    B: int
    stratified: bool
    draws: np.ndarray | None = None
    message: str = ""

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("metric", "observed", "perm_mean", "perm_sd", "gap", "p_value", "method", "B", "stratified", "message")}
        if self.draws is not None:
            d["draws"] = self.draws.tolist()
        return d


def group_permutation(codes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row permutation that moves whole groups onto groups of the same size.

    Returns ``idx`` such that ``y[idx]`` gives every group the label vector
    of another group with the same row count.
    """
    n = codes.size
    order = np.argsort(codes, kind="stable")
    sizes = np.bincount(codes)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    idx = np.arange(n)
    for size in np.unique(sizes):
        if size == 0:
            continue
        gs = np.flatnonzero(sizes == size)
        target = rng.permutation(gs)
        for g_to, g_from in zip(gs, target):
            idx[order[starts[g_to]:starts[g_to] + size]] = order[starts[g_from]:starts[g_from] + size]
    return idx


def _fold_auc_batch(pred: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """AUC of fixed scores against each row of a label matrix (NaN if undefined)."""
    r = rankdata(pred)
    n1 = labels.sum(axis=1)
    n0 = labels.shape[1] - n1
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (labels @ r - n1 * (n1 + 1) / 2.0) / (n1 * n0)
    out[(n1 == 0) | (n0 == 0)] = np.nan
    return out


def _mean_fold_metric(records, y, metric, threshold=0.5) -> float:
    vals = []
    for r in records:
        try:
            vals.append(compute_metric(metric, r.predictions, y[r.test_rows], threshold))
        except UndefinedMetric:
            continue
    return float(np.mean(vals)) if vals else float("nan")


def perm_gap(
    fit: FitResult,
    cfg: PermutationConfig = PermutationConfig(),
    ds: Dataset | None = None,
    groups: np.ndarray | None = None,
) -> PermGapResult:
    """Observed mean fold metric versus its label-permutation distribution.

    ``fixed_predictions`` shuffles the labels against stored out-of-fold
    predictions; ``refit`` re-runs the whole fit under each shuffled outcome.
    Fixed-prediction draws shuffle labels within each test fold by default
    (``scope="within_fold"``), keeping every fold's class counts; ``global``
    shuffles across all rows. With ``perm_stratify`` whole groups
    (``groups`` codes, or the plan's grouping column) exchange labels among
    groups of equal size.
    """
    metric = canonical_metric(cfg.metric or fit.metric_names[0])
    payload = fit.refit_payload
    ds = ds if ds is not None else (payload or {}).get("dataset")
    message = ""
    if cfg.perm_refit is True and payload is None:
        raise AuditError("refit permutation needs stored refit data; rerun fit_resample with store_refit_data=True")
    refit = cfg.perm_refit is True or (cfg.perm_refit == "auto" and payload is not None)
    if cfg.perm_refit == "auto" and payload is None:
        message = "no refit data stored; using fixed-prediction permutations"
        log.info(message)
    if ds is None:
        raise AuditError("the dataset is needed to recover the outcome labels")
    y = ds.y
    records = [r for r in fit.folds if r.status == SUCCESS]
    if not records:
        raise AuditError("no successful folds to audit")
    if not refit and any(metric not in r.metrics for r in records):
        raise AuditError(f"metric {metric!r} was not computed in this fit")

    if cfg.perm_stratify and groups is None:
        plan = payload["plan"] if payload else None
        cols = plan.group_cols if plan is not None else ()
        if not cols:
            for c in (ds.roles.subject, ds.roles.batch, ds.roles.study):
                if c:
                    cols = (c,)
                    break
        if cols:
            groups = ds.group_codes(cols[0])
    rng = np.random.default_rng([cfg.seed, 104729])

    def draw_index():
        if cfg.perm_stratify and groups is not None:
            return group_permutation(np.asarray(groups), rng)
        return rng.permutation(y.size)

    if refit:
        perms = np.stack([draw_index() for _ in range(cfg.B)])
        observed = float(np.mean([r.metrics[metric] for r in records])) if all(
            metric in r.metrics for r in records) else _mean_fold_metric(records, y, metric)
        draws = np.empty(cfg.B)
        for b in range(cfg.B):
            try:
                fr = fit_resample(ds.with_outcome(y[perms[b]]), payload["plan"], payload["learner"],
                                  payload["preprocess"], metrics=[metric], seed=fit.seed,
                                  store_refit_data=False, guarded=fit.guarded, check_data=False, n_jobs=1)
                draws[b] = fr.aggregate()[metric]["mean"]
            except ResampleError:
                draws[b] = np.nan
        method = "refit"
    else:
        observed = float(np.mean([r.metrics[metric] for r in records]))
        if cfg.scope == "within_fold" and cfg.perm_stratify and groups is not None:
            Ys = []
            for r in records:
                yt = y[r.test_rows]
                _, codes = np.unique(np.asarray(groups)[r.test_rows], return_inverse=True)
                Ys.append(np.stack([yt[group_permutation(codes, rng)] for _ in range(cfg.B)]))
        elif cfg.scope == "within_fold":
            # shuffle each test fold's own labels: per-fold class counts stay fixed
            Ys = [rng.permuted(np.broadcast_to(y[r.test_rows], (cfg.B, r.n_test)), axis=1) for r in records]
        else:
            Yall = y[np.stack([draw_index() for _ in range(cfg.B)])]
            Ys = [Yall[:, r.test_rows] for r in records]
        if metric == "auc":
            per_fold = np.stack([_fold_auc_batch(r.predictions, Yf) for r, Yf in zip(records, Ys)], axis=1)
            with np.errstate(invalid="ignore"):
                draws = np.nanmean(per_fold, axis=1) if per_fold.size else np.full(cfg.B, np.nan)
        else:
            draws = np.array([
                np.nanmean([_safe_metric(metric, r.predictions, Yf[b]) for r, Yf in zip(records, Ys)])
                for b in range(cfg.B)
            ])
        method = "fixed_predictions" if cfg.scope == "within_fold" else "fixed_predictions_global"
    valid = np.isfinite(draws)
    if not valid.any():
        raise AuditError("no permutation draw produced a defined metric")
    d = draws[valid]
    sign = 1.0 if HIGHER_IS_BETTER[metric] else -1.0
    b = int(np.sum(sign * d >= sign * observed - 1e-12))
    perm_mean = float(d.mean())
    return PermGapResult(
        metric=metric,
        observed=observed,
        perm_mean=perm_mean,
        perm_sd=float(d.std(ddof=1)) if d.size > 1 else 0.0,
        gap=observed - perm_mean,
        p_value=phipson_smyth(b, d.size),
        method=method,
        B=int(d.size),
        stratified=bool(cfg.perm_stratify and groups is not None),
        draws=draws if cfg.return_perm else None,
        message=message,
    )


def _safe_metric(metric, pred, truth):
    try:
        return compute_metric(metric, pred, truth)
    except UndefinedMetric:
        return np.nan


# -- fold association -------------------------------------------------------


@dataclass
class Association:
    column: str
    repeat: int
    chi2: float | None
    df: int | None
    p_value: float | None
    cramers_v: float | None
    table: list
    levels: list
    design: bool = False
    note: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def cramers_v(chi2: float, n: int, r: int, c: int) -> float:
    m = min(r, c) - 1
    if m <= 0 or n == 0:
        return float("nan")
    return float(min(1.0, np.sqrt(chi2 / (n * m))))


def _levels_of(ds: Dataset, col: str, n_bins: int = 4) -> tuple[np.ndarray, list[str]]:
    c = ds.columns[col]
    if c.kind == CATEGORICAL:
        return c.values, list(c.levels)
    v = c.values
    uniq = np.unique(v[~np.isnan(v)])
    if uniq.size <= 10:
        codes = np.full(v.size, -1)
        ok = ~np.isnan(v)
        codes[ok] = np.searchsorted(uniq, v[ok])
        return codes, [f"{u:g}" for u in uniq]
    edges = np.nanquantile(v, np.linspace(0, 1, n_bins + 1)[1:-1])
    codes = np.where(np.isnan(v), -1, np.searchsorted(edges, v, side="right"))
    return codes, [f"q{k + 1}" for k in range(n_bins)]


def _nested_in(codes: np.ndarray, unit: np.ndarray) -> bool:
    """True when ``codes`` is constant within every level of ``unit``."""
    first = np.full(unit.max() + 1, -2, dtype=np.int64)
    first[unit] = codes
    return bool(np.all(first[unit] == codes))


def fold_association(plan: SplitPlan, ds: Dataset, cols: Sequence[str]) -> list[Association]:
    """Chi-square test of test-fold assignment against each column, per repeat.

    Rows are counted, except when the column is constant within the plan's
    single grouping unit (e.g. batch recorded per subject): then each unit
    is counted once, since its rows move between folds together and a
    row-level table would overstate the evidence.
    """
    out = []
    unit = None
    if len(plan.group_cols) == 1 and plan.group_cols[0] in ds.columns:
        unit = ds.group_codes(plan.group_cols[0])
    for col in cols:
        if col not in ds.columns:
            raise AuditError(f"column {col!r} not found")
        codes, levels = _levels_of(ds, col)
        design = col in plan.group_cols
        per_unit = unit is not None and not design and _nested_in(codes, unit)
        if per_unit:
            _, first_row = np.unique(unit, return_index=True)
            keep = np.zeros(ds.n_rows, dtype=bool)
            keep[first_row] = True
        for r in range(1, plan.repeats + 1):
            folds = [f for f in plan.folds if f.repeat == r]
            table = np.zeros((len(folds), len(levels)), dtype=np.int64)
            for i, f in enumerate(folds):
                rows = f.test[keep[f.test]] if per_unit else f.test
                c = codes[rows]
                c = c[c >= 0]
                table[i] = np.bincount(c, minlength=len(levels))
            keep_r = table.sum(axis=1) > 0
            keep_c = table.sum(axis=0) > 0
            t = table[keep_r][:, keep_c]
            note = "expected by design" if design else (f"counted per {plan.group_cols[0]}" if per_unit else "")
            if t.shape[0] < 2 or t.shape[1] < 2:
                out.append(Association(col, r, None, None, None, None, table.tolist(), levels, design,
                                       "association undefined (single level or single fold)"))
                continue
            chi2, p, df, _ = stats.chi2_contingency(t, correction=False)
            v = cramers_v(chi2, int(t.sum()), *t.shape)
            out.append(Association(col, r, float(chi2), int(df), float(p), v, table.tolist(), levels, design, note))
    return out


# -- target scans -----------------------------------------------------------


@dataclass
class UnivariateScan:
    names: list[str]
    scores: np.ndarray
    threshold: float
    notes: list[str] = field(default_factory=list)
    unscanned: list[str] = field(default_factory=list)

    @property
    def flags(self) -> np.ndarray:
        return self.scores >= self.threshold

    @property
    def flagged(self) -> list[str]:
        return [n for n, f in zip(self.names, self.flags) if f]

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "features": [{"name": n, "score": float(s), "flagged": bool(s >= self.threshold)}
                         for n, s in zip(self.names, self.scores)],
            "n_flagged": len(self.flagged),
            "notes": self.notes,
            "unscanned": self.unscanned,
        }


def target_scan_univariate(X, y, names: Sequence[str] | None = None, threshold: float = 0.9) -> UnivariateScan:
    """Rescaled AUC ``|AUC - 0.5| * 2`` of each column against a binary outcome."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(X.shape[1])]
    scores = np.zeros(X.shape[1])
    notes = []
    for j in range(X.shape[1]):
        x = X[:, j]
        ok = ~np.isnan(x)
        if np.ptp(x[ok]) == 0 if ok.any() else True:
            notes.append(f"{names[j]}: constant or empty; score 0")
            continue
        try:
            scores[j] = abs(auc(x[ok], y[ok]) - 0.5) * 2.0
        except UndefinedMetric:
            notes.append(f"{names[j]}: one outcome class among observed rows; score 0")
    return UnivariateScan(names, scores, threshold, notes)


@dataclass
class MultivariateScan:
    available: bool
    statistic: float | None = None
    p_value: float | None = None
    n_pc: int | None = None
    B_perm: int | None = None
    reason: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _kfold_ids(y, k, rng):
    """Class-stratified random fold ids."""
    ids = np.empty(y.size, dtype=np.int64)
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        ids[rng.permutation(idx)] = np.arange(idx.size) % k
    return ids


def target_scan_multivariate(
    X,
    y,
    n_pc: int | None = None,
    inner_folds: int = 5,
    B_perm: int = 200,
    seed: int = 1,
    min_features: int = 5,
    fold_ids: np.ndarray | None = None,
) -> MultivariateScan:
    """Cross-validated AUC of a logistic GLM on train-fold principal components.

    PCA (after train-fold standardization) does not involve the outcome, so
    the component scores per fold are computed once and reused by every
    label permutation; only the GLM is refit per draw.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if p < min_features:
        return MultivariateScan(False, reason=f"too few predictors ({p} < {min_features}) for a principal-component model")
    k_pc = n_pc if n_pc is not None else min(10, p, n // 10)
    if k_pc < 1:
        return MultivariateScan(False, reason="too few rows for a principal-component model")
    rng = np.random.default_rng([seed, 7919])
    ids = fold_ids if fold_ids is not None else _kfold_ids(y, inner_folds, rng)
    parts = []
    for f in np.unique(ids):
        tr, te = np.flatnonzero(ids != f), np.flatnonzero(ids == f)
        Xtr = X[tr]
        mu = np.nanmean(Xtr, axis=0)
        mu = np.where(np.isnan(mu), 0.0, mu)
        Xtr = np.where(np.isnan(Xtr), mu, Xtr)
        Xte = np.where(np.isnan(X[te]), mu, X[te])
        sd = Xtr.std(axis=0, ddof=1)
        sd = np.where(sd > 0, sd, 1.0)
        Ztr, Zte = (Xtr - mu) / sd, (Xte - mu) / sd
        _, _, vt = np.linalg.svd(Ztr, full_matrices=False)
        L = vt[:k_pc].T
        parts.append((tr, te, Ztr @ L, Zte @ L))

    def cv_auc(labels):
        pred = np.empty(n)
        for tr, te, Str, Ste in parts:
            yt = labels[tr]
            if yt.min() == yt.max():
                pred[te] = yt[0]
                continue
            m = fit_logistic_irls(Str, yt, max_iter=25, tol=1e-6)
            pred[te] = m.decision_function(Ste)
        try:
            return auc(pred, labels)
        except UndefinedMetric:
            return np.nan

    observed = cv_auc(y)
    draws = np.array([cv_auc(y[rng.permutation(n)]) for _ in range(B_perm)])
    d = draws[np.isfinite(draws)]
    b = int(np.sum(d >= observed - 1e-12))
    return MultivariateScan(True, float(observed), phipson_smyth(b, d.size), k_pc, int(d.size))


# -- duplicates ---------------------------------------------------------------


@dataclass
class DuplicateResult:
    pairs: list[tuple[int, int, float]]
    cross_fold_pairs: list[tuple[int, int, float]]
    threshold: float
    excluded_rows: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        def fmt(ps):
            return [{"row_a": a, "row_b": b, "similarity": s} for a, b, s in ps]

        return {
            "threshold": self.threshold,
            "pairs": fmt(self.pairs),
            "cross_fold_pairs": fmt(self.cross_fold_pairs),
            "excluded_rows": self.excluded_rows,
        }


def duplicate_scan(X, plan: SplitPlan | None = None, threshold: float = 0.995, block: int = 2048) -> DuplicateResult:
    """Row pairs with cosine similarity >= ``threshold`` on globally z-scored columns.

    The z-scoring and mean imputation exist only for this similarity and
    never feed a model. Rows with zero norm after scaling are excluded.
    """
    if not 0 < threshold <= 1:
        raise AuditError("threshold must lie in (0, 1]")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    mu = np.nanmean(X, axis=0) if n else np.zeros(X.shape[1])
    mu = np.where(np.isnan(mu), 0.0, mu)
    Z = np.where(np.isnan(X), mu, X) - mu
    sd = Z.std(axis=0)
    Z = np.where(sd > 0, Z / np.where(sd > 0, sd, 1.0), 0.0)
    norm = np.linalg.norm(Z, axis=1)
    good = np.flatnonzero(norm > 1e-12)
    excluded = np.flatnonzero(norm <= 1e-12).tolist()
    U = Z[good] / norm[good, None]
    pairs = []
    for s in range(0, good.size, block):
        S = U[s:s + block] @ U.T
        ii, jj = np.nonzero(S >= threshold - 1e-12)
        for i, j in zip(ii, jj):
            a, b = good[s + i], good[j]
            if a < b:
                pairs.append((int(a), int(b), float(min(S[i, j], 1.0))))
    pairs.sort()
    cross = []
    if plan is not None and pairs:
        sides = np.zeros((len(plan.folds), n), dtype=np.int8)
        for k, f in enumerate(plan.folds):
            sides[k, f.train] = 1
            sides[k, f.test] = 2
        for a, b, s in pairs:
            if np.any(sides[:, a] * sides[:, b] == 2):
                cross.append((a, b, s))
    return DuplicateResult(pairs, cross, threshold, excluded)


# -- mechanism roll-up ----------------------------------------------------------


@dataclass
class MechanismAssessment:
    flagged: dict
    evidence: dict

    def to_dict(self) -> dict:
        return {m: {"flagged": self.flagged[m], "evidence": self.evidence[m]} for m in MECHANISMS}


def assess_mechanisms(
    plan: SplitPlan | None,
    ds: Dataset | None,
    guarded: bool,
    associations: Sequence[Association] = (),
    univariate: UnivariateScan | None = None,
    multivariate: MultivariateScan | None = None,
    alpha_assoc: float = 0.01,
    alpha_multi: float = 0.01,
) -> MechanismAssessment:
    flagged, evidence = {}, {}

    subj = ds.roles.subject if ds is not None else None
    if plan is None or ds is None or subj is None:
        flagged["subject_overlap"] = False
        evidence["subject_overlap"] = "not assessed: no subject column"
    else:
        codes = ds.group_codes(subj)
        if np.bincount(codes).max() < 2:
            flagged["subject_overlap"] = False
            evidence["subject_overlap"] = "OK: no repeated subjects"
        else:
            rep = overlap_check(plan, ds, [subj])
            n_bad = len({(s["repeat"], s["fold"]) for s in rep.group_straddles})
            flagged["subject_overlap"] = n_bad > 0
            evidence["subject_overlap"] = (
                f"{len(rep.group_straddles)} subject straddle(s) across {n_bad} fold(s)" if n_bad
                else f"OK: {plan.mode.replace('_', '-')} splits keep subjects intact"
            )

    hits = [a for a in associations if not a.design and a.p_value is not None and a.p_value < alpha_assoc]
    flagged["batch_confounded"] = bool(hits)
    if hits:
        a = min(hits, key=lambda h: h.p_value)
        evidence["batch_confounded"] = f"fold assignment associated with {a.column} (p = {a.p_value:.3g})"
    elif associations:
        evidence["batch_confounded"] = f"OK: no fold association with p < {alpha_assoc:g}"
    else:
        evidence["batch_confounded"] = "not assessed: no metadata columns"

    flagged["preprocessing_leak"] = not guarded
    evidence["preprocessing_leak"] = (
        "OK: preprocessing estimated within training folds" if guarded
        else "preprocessing estimated on all rows before splitting"
    )

    uni = univariate.flagged if univariate is not None else []
    multi_hit = multivariate is not None and multivariate.available and multivariate.p_value < alpha_multi
    flagged["target_leakage"] = bool(uni) or multi_hit
    parts = []
    if uni:
        parts.append(f"{len(uni)} feature(s) with score >= {univariate.threshold:g}: {', '.join(uni[:5])}")
    if multi_hit:
        parts.append(f"multivariate scan p = {multivariate.p_value:.3g}")
    if not parts:
        parts.append("OK: no feature crosses the target-scan thresholds" if univariate is not None
                     else "not assessed: no reference features")
    evidence["target_leakage"] = "; ".join(parts)
    return MechanismAssessment(flagged, evidence)


# -- full audit ----------------------------------------------------------------


@dataclass
class LeakAudit:
    permutation: PermGapResult
    associations: list[Association]
    univariate: UnivariateScan | None
    multivariate: MultivariateScan | None
    duplicates: DuplicateResult | None
    mechanisms: MechanismAssessment
    config: dict
    plan_hash: str
    overview: dict

    def to_dict(self) -> dict:
        return {
            "overview": self.overview,
            "permutation": self.permutation.to_dict(),
            "associations": [a.to_dict() for a in self.associations],
            "target_scan": {
                "univariate": None if self.univariate is None else self.univariate.to_dict(),
                "multivariate": None if self.multivariate is None else self.multivariate.to_dict(),
            },
            "duplicates": None if self.duplicates is None else self.duplicates.to_dict(),
            "mechanisms": self.mechanisms.to_dict(),
            "config": self.config,
            "plan_hash": self.plan_hash,
        }

    def summary(self) -> str:
        p = self.permutation
        lines = [
            f"Leakage audit | plan {self.plan_hash}",
            f"Permutation ({p.method}, B = {p.B}): observed {p.observed:.4f}, perm mean {p.perm_mean:.4f}, "
            f"sd {p.perm_sd:.4f}, p = {p.p_value:.4g}",
            f"Gap: {p.gap:.4f} (larger gap = stronger non-random signal)",
        ]
        for a in self.associations:
            if a.chi2 is None:
                lines.append(f"{a.column} (repeat {a.repeat}): {a.note}")
            else:
                tag = f" [{a.note}]" if a.note else ""
                lines.append(f"{a.column} (repeat {a.repeat}): Chi^2 = {a.chi2:.3f} (df = {a.df}), "
                             f"p = {a.p_value:.4f}, V = {a.cramers_v:.3f}{tag}")
        if self.univariate is not None:
            lines.append(f"Univariate target scan: flagged (score >= {self.univariate.threshold:g}): "
                         f"{len(self.univariate.flagged)}")
        if self.multivariate is not None:
            m = self.multivariate
            lines.append(f"Multivariate target scan: p = {m.p_value:.4f}" if m.available
                         else f"Multivariate target scan: not available ({m.reason})")
        if self.duplicates is not None:
            d = self.duplicates
            lines.append("No near-duplicates detected." if not d.pairs else
                         f"Near-duplicates: {len(d.pairs)} pair(s), {len(d.cross_fold_pairs)} across train/test")
        lines.append("Mechanism Risk Assessment")
        for m in MECHANISMS:
            lines.append(f"  {m:<20} {str(self.mechanisms.flagged[m]).upper():<6} {self.mechanisms.evidence[m]}")
        return "\n".join(lines)


def audit_fit(
    fit: FitResult,
    ds: Dataset | None = None,
    perm: PermutationConfig = PermutationConfig(),
    batch_cols: Sequence[str] | None = None,
    x_ref: Sequence[str] | np.ndarray | None = None,
    target_threshold: float = 0.9,
    dup_threshold: float = 0.995,
    multivariate: bool = True,
    B_multi: int = 200,
    plan: SplitPlan | None = None,
) -> LeakAudit:
    """Run every diagnostic on ``fit`` and roll them up per mechanism."""
    payload = fit.refit_payload or {}
    ds = ds if ds is not None else payload.get("dataset")
    plan = plan if plan is not None else payload.get("plan")
    if ds is None:
        raise AuditError("the dataset is needed for an audit")
    pg = perm_gap(fit, perm, ds)
    if batch_cols is None:
        batch_cols = [c for c in (ds.roles.batch, ds.roles.study) if c]
    assoc = fold_association(plan, ds, batch_cols) if plan is not None and batch_cols else []

    if isinstance(x_ref, np.ndarray):
        Xr = np.asarray(x_ref, dtype=np.float64)
        names = [f"x{j + 1}" for j in range(Xr.shape[1])]
        unscanned = []
    else:
        cols = list(ds.predictors if x_ref is None else x_ref)
        names = [c for c in cols if ds.columns[c].kind == NUMERIC]
        unscanned = [c for c in cols if ds.columns[c].kind != NUMERIC]
        Xr = np.column_stack([ds.columns[c].values for c in names]) if names else np.empty((ds.n_rows, 0))
    uni = multi = None
    if ds.task == TaskKind.BINARY and Xr.shape[1]:
        uni = target_scan_univariate(Xr, ds.y, names, target_threshold)
        uni.unscanned = unscanned
        if multivariate:
            multi = target_scan_multivariate(Xr, ds.y, B_perm=B_multi, seed=perm.seed)
    dups = duplicate_scan(Xr, plan, dup_threshold) if Xr.shape[1] else None
    mech = assess_mechanisms(plan, ds, fit.guarded, assoc, uni, multi)
    feats = [r.features_final for r in fit.folds if r.status == SUCCESS]
    overview = {
        "task": ds.task.value,
        "outcome": ds.roles.outcome,
        "learner": fit.learner.label,
        "preprocess": fit.preprocess.to_string(),
        "guarded": fit.guarded,
        "folds": fit.status_counts,
        "features_final": int(np.median(feats)) if feats else 0,
        "plan_mode": fit.plan_mode,
    }
    config = {
        "B": perm.B,
        "perm_refit": perm.perm_refit,
        "perm_stratify": perm.perm_stratify,
        "metric": pg.metric,
        "seed": perm.seed,
        "target_threshold": target_threshold,
        "dup_threshold": dup_threshold,
        "B_multi": B_multi,
        "alpha_association": 0.01,
        "alpha_multivariate": 0.01,
    }
    return LeakAudit(pg, assoc, uni, multi, dups, mech, config, fit.plan_hash, overview)
