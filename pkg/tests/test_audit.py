from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from leakguard.audit import (
    AuditError,
    PermutationConfig,
    assess_mechanisms,
    audit_fit,
    cramers_v,
    duplicate_scan,
    fold_association,
    perm_gap,
    phipson_smyth,
    target_scan_multivariate,
    target_scan_univariate,
)
from leakguard.data import Column, Dataset, RoleMap
from leakguard.learners import LearnerSpec
from leakguard.resample import fit_resample
from leakguard.splits import Fold, SplitPlan, make_split_plan

from conftest import make_dataset


def test_phipson_smyth_floor():
    assert phipson_smyth(0, 500) == pytest.approx(1 / 501)
    assert phipson_smyth(500, 500) == 1.0


def test_cramers_v_perfect_table():
    chi2 = chi2_contingency(np.array([[10, 0], [0, 10]]), correction=False)[0]
    assert chi2 == pytest.approx(20.0)
    assert cramers_v(chi2, 20, 2, 2) == pytest.approx(1.0)


def _fit(ds, mode="subject_grouped", repeats=1, learner=None, guarded=True):
    plan = make_split_plan(ds, mode, v=5, repeats=repeats, seed=1)
    fr = fit_resample(ds, plan, learner or LearnerSpec("logistic_glm"), "impute=median,normalize=zscore",
                      guarded=guarded)
    return fr, plan


def test_perm_gap_identities():
    ds = make_dataset(signal=2.0)
    fr, _ = _fit(ds)
    res = perm_gap(fr, PermutationConfig(B=60, perm_refit=False, seed=3))
    assert res.method == "fixed_predictions"
    assert res.gap == res.observed - res.perm_mean
    assert res.perm_mean == float(np.mean(res.draws))
    assert res.perm_sd == float(np.std(res.draws, ddof=1))
    assert 1 / 61 <= res.p_value <= 1
    assert res.p_value == pytest.approx(1 / 61)


def test_perm_gap_refit_and_auto():
    ds = make_dataset(n_subjects=20, signal=2.0)
    fr, _ = _fit(ds)
    r = perm_gap(fr, PermutationConfig(B=10, perm_refit="auto", seed=1))
    assert r.method == "refit"
    fr.refit_payload = None
    r2 = perm_gap(fr, PermutationConfig(B=10, perm_refit="auto", seed=1), ds)
    assert r2.method.startswith("fixed_predictions") and r2.message
    with pytest.raises(AuditError):
        perm_gap(fr, PermutationConfig(B=10, perm_refit=True), ds)


def test_perm_gap_reproducible():
    ds = make_dataset(signal=0.5)
    fr, _ = _fit(ds)
    cfg = PermutationConfig(B=50, perm_refit=False, seed=9)
    assert perm_gap(fr, cfg).to_dict() == perm_gap(fr, cfg).to_dict()


def test_study_loocv_association_is_by_design():
    study = np.repeat(["A", "B", "C"], 20)
    rng = np.random.default_rng(0)
    cols = {
        "y": Column.categorical("y", np.where(rng.random(60) < 0.5, "1", "0"), levels=["0", "1"]),
        "x": Column("x", "numeric", rng.normal(size=60)),
        "study": Column.categorical("study", study),
    }
    ds = Dataset(cols, RoleMap(outcome="y", predictors=("x",), positive_class="1", study="study"))
    plan = make_split_plan(ds, "study_loocv")
    (a,) = fold_association(plan, ds, ["study"])
    assert a.cramers_v == pytest.approx(1.0) and a.design and a.note == "expected by design"
    assert a.df == (3 - 1) * (3 - 1)
    mech = assess_mechanisms(plan, ds, True, [a])
    assert not mech.flagged["batch_confounded"]


def test_single_level_association_undefined():
    ds = make_dataset(n_batches=1)
    plan = make_split_plan(ds, "subject_grouped", v=5, seed=1)
    (a,) = fold_association(plan, ds, ["batch"])
    assert a.chi2 is None and "undefined" in a.note


def test_confounded_batch_is_flagged():
    ds = make_dataset()
    plan = make_split_plan(ds, "subject_grouped", v=5, seed=1)
    fold_of = np.zeros(ds.n_rows, dtype=int)
    for f in plan.folds:
        fold_of[f.test] = f.fold
    cols = dict(ds.columns)
    cols["site"] = Column.categorical("site", [f"s{k}" for k in fold_of])
    ds2 = Dataset(cols, ds.roles)
    (a,) = fold_association(plan, ds2, ["site"])
    assert a.p_value < 1e-10 and a.note.startswith("counted per")
    assert assess_mechanisms(plan, ds2, True, [a]).flagged["batch_confounded"]


def test_univariate_scan():
    rng = np.random.default_rng(1)
    y = (rng.random(300) < 0.5).astype(float)
    X = np.column_stack([rng.normal(size=300), y, np.ones(300)])
    res = target_scan_univariate(X, y, ["noise", "copy", "const"])
    assert res.scores[0] < 0.2
    assert res.scores[1] == 1.0 and res.flagged == ["copy"]
    assert res.scores[2] == 0.0 and res.notes


def test_multivariate_scan_skips_small_inputs():
    res = target_scan_multivariate(np.zeros((50, 3)), np.arange(50) % 2)
    assert not res.available and "too few predictors" in res.reason


def test_multivariate_scan_detects_and_is_seeded():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(200, 12))
    y = (X[:, 0] + X[:, 1] + 0.5 * rng.normal(size=200) > 0).astype(float)
    a = target_scan_multivariate(X, y, B_perm=50, seed=4)
    assert a.available and a.p_value == pytest.approx(1 / 51)
    assert a.to_dict() == target_scan_multivariate(X, y, B_perm=50, seed=4).to_dict()


def test_multivariate_scan_null_calibration():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(120, 8))
    rejections = 0
    for i in range(40):
        y = (rng.random(120) < 0.5).astype(float)
        rejections += target_scan_multivariate(X, y, B_perm=40, seed=i).p_value <= 0.05
    assert rejections <= 8


def test_duplicates():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(30, 6))
    X[17] = X[3]
    res = duplicate_scan(X)
    assert [(a, b) for a, b, _ in res.pairs] == [(3, 17)]
    assert res.pairs[0][2] == pytest.approx(1.0)
    assert duplicate_scan(np.eye(6) - np.eye(6).mean(axis=0)).pairs == []


def test_duplicates_symmetric_under_row_permutation():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(40, 5))
    X[[5, 9]] = X[0]
    perm = rng.permutation(40)
    a = {(x, y) for x, y, _ in duplicate_scan(X).pairs}
    b = {tuple(sorted((perm[x], perm[y]))) for x, y, _ in duplicate_scan(X[perm]).pairs}
    assert a == b


def test_same_study_duplicates_never_cross_folds():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(20, 4))
    X[1] = X[0]
    X[11] = X[2]
    study = np.repeat(["A", "B"], 10)
    cols = {f"x{j}": Column(f"x{j}", "numeric", X[:, j]) for j in range(4)}
    cols["y"] = Column.categorical("y", np.where(np.arange(20) % 2, "1", "0"), levels=["0", "1"])
    cols["study"] = Column.categorical("study", study)
    ds = Dataset(cols, RoleMap(outcome="y", predictors=tuple(f"x{j}" for j in range(4)), positive_class="1",
                               study="study"))
    plan = make_split_plan(ds, "study_loocv")
    res = duplicate_scan(X, plan)
    assert {(a, b) for a, b, _ in res.pairs} == {(0, 1), (2, 11)}
    assert [(a, b) for a, b, _ in res.cross_fold_pairs] == [(2, 11)]


def test_rowwise_plan_with_repeated_subjects_flags_overlap():
    ds = make_dataset()
    rng = np.random.default_rng(0)
    rows = rng.permutation(ds.n_rows)
    folds = tuple(Fold(1, k + 1, np.setdiff1d(rows, rows[k::5]), np.sort(rows[k::5])) for k in range(5))
    plan = SplitPlan("batch_blocked", 5, 1, ds.n_rows, 1, folds_explicit=folds, group_cols=("batch",))
    mech = assess_mechanisms(plan, ds, True)
    assert mech.flagged["subject_overlap"]


def test_guarded_audit_all_clear():
    ds = make_dataset(p=12, signal=0.0)
    fr, plan = _fit(ds)
    au = audit_fit(fr, ds, PermutationConfig(B=50, perm_refit=False), plan=plan, B_multi=20)
    assert not any(au.mechanisms.flagged.values())
    text = au.summary()
    assert "Mechanism Risk Assessment" in text and "No near-duplicates detected." in text
    assert "OK: subject-grouped splits" in au.mechanisms.evidence["subject_overlap"]
    assert au.multivariate.available and au.multivariate.p_value > 0.01


def test_leaky_audit_flags_preprocessing():
    ds = make_dataset(signal=1.0)
    fr, plan = _fit(ds, guarded=False)
    au = audit_fit(fr, ds, PermutationConfig(B=20, perm_refit=False), plan=plan, multivariate=False)
    assert au.mechanisms.flagged["preprocessing_leak"]
