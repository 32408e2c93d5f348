from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leakguard.data import TaskKind
from leakguard.learners import LearnerSpec
from leakguard.preprocess import PreprocSpec
from leakguard.resample import (
    SUCCESS,
    FitResult,
    FoldRecord,
    PlanMismatchError,
    aggregate_repeats,
    fit_resample,
    select_candidate,
    t_interval,
    tune_resample,
)
from leakguard.splits import SplitPlan, make_split_plan

from conftest import make_dataset


def _fit_of(records):
    return FitResult(TaskKind.BINARY, "y", "1", LearnerSpec(), PreprocSpec(), ("auc",), records,
                     "0" * 12, "subject_grouped", 1)


def _rec(repeat, fold, value, n_test, status=SUCCESS):
    return FoldRecord(repeat, fold, status, {"auc": value}, n_train=100, n_test=n_test)


def test_t_interval_three_folds():
    lo, hi = t_interval(0.424, 0.024, 3, (0.0, 1.0))
    assert lo == pytest.approx(0.364, abs=5e-4)
    assert hi == pytest.approx(0.484, abs=5e-4)


def test_t_interval_clipped_to_metric_range():
    lo, hi = t_interval(0.98, 0.05, 3, (0.0, 1.0))
    assert hi == 1.0 and lo < 0.98


def test_weighted_repeat_mean():
    s = aggregate_repeats(_fit_of([_rec(1, 1, 0.6, 10), _rec(1, 2, 0.9, 30)]))
    assert s.values[0] == pytest.approx(0.825)
    eq = aggregate_repeats(_fit_of([_rec(1, 1, 0.6, 20), _rec(1, 2, 0.9, 20)]))
    assert eq.values[0] == pytest.approx(0.75)
    single = aggregate_repeats(_fit_of([_rec(1, 1, 0.7, 20), _rec(2, 1, 0.8, 20)]))
    assert single.values.tolist() == [0.7, 0.8]


def test_repeat_without_success_is_dropped():
    s = aggregate_repeats(_fit_of([_rec(1, 1, 0.6, 10), _rec(2, 1, 0.9, 30, status="failed")]))
    assert s.repeats.tolist() == [1] and s.dropped == (2,)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 3), st.floats(0, 1), st.integers(1, 50)), min_size=1, max_size=15),
       st.randoms(use_true_random=False))
def test_aggregate_order_invariant(items, rnd):
    recs = [_rec(r, i, v, n) for i, (r, v, n) in enumerate(items)]
    a = aggregate_repeats(_fit_of(recs))
    rnd.shuffle(recs)
    b = aggregate_repeats(_fit_of(recs))
    assert np.array_equal(a.repeats, b.repeats)
    assert np.allclose(a.values, b.values, rtol=0, atol=1e-12)


def test_fit_and_repeat_determinism():
    ds = make_dataset(signal=1.5)
    plan = make_split_plan(ds, "subject_grouped", v=5, seed=1)
    twice = SplitPlan(plan.mode, plan.v, 2, plan.n_rows, plan.seed,
                      folds_explicit=plan.folds + tuple(
                          type(f)(2, f.fold, f.train, f.test) for f in plan.folds),
                      group_cols=plan.group_cols, data_hash=plan.data_hash)
    fr = fit_resample(ds, twice, LearnerSpec("logistic_glm"), "impute=median,normalize=zscore")
    m = {(f.repeat, f.fold): f.metrics["auc"] for f in fr.folds}
    assert all(m[(1, k)] == m[(2, k)] for k in range(1, 6))
    agg = fr.aggregate()["auc"]
    assert 0.5 < agg["mean"] <= 1.0 and agg["n_folds"] == 10


def test_stale_plan_names_both_hashes():
    ds = make_dataset()
    other = make_dataset(n_subjects=30)
    plan = make_split_plan(other, "subject_grouped", v=5, seed=1)
    with pytest.raises(PlanMismatchError) as e:
        fit_resample(ds, plan, LearnerSpec("logistic_glm"), None)
    assert plan.data_hash in str(e.value) and ds.content_hash() in str(e.value)


def test_fit_json_round_trip():
    ds = make_dataset(signal=1.0)
    plan = make_split_plan(ds, "subject_grouped", v=5, seed=1)
    fr = fit_resample(ds, plan, LearnerSpec("logistic_glm"), "normalize=zscore")
    back = FitResult.from_dict(fr.to_dict(with_predictions=True))
    assert back.aggregate() == fr.aggregate()
    assert np.array_equal(back.oof_predictions(), fr.oof_predictions())


def test_leaky_differs_only_in_design():
    ds = make_dataset(signal=1.0)
    plan = make_split_plan(ds, "subject_grouped", v=5, seed=1)
    g = fit_resample(ds, plan, LearnerSpec("logistic_glm"), "normalize=zscore")
    lk = fit_resample(ds, plan, LearnerSpec("logistic_glm"), "normalize=zscore", guarded=False)
    assert g.plan_hash == lk.plan_hash
    assert len({f.preproc_hash for f in g.folds}) == 5
    assert len({f.preproc_hash for f in lk.folds}) == 1


def test_one_std_err_rule():
    cands = np.array([1.0, 0.5, 0.1, 0.01])
    mean = np.array([0.70, 0.78, 0.80, 0.79])
    sd = np.full(4, 0.06)
    # se = 0.06 / sqrt(4) = 0.03; candidates within 0.77 -> largest penalty 0.5
    assert select_candidate(cands, mean, sd, 4, "auc", "one_std_err") == 1
    assert select_candidate(cands, mean, sd, 4, "auc", "best") == 2
    assert select_candidate(cands, -mean, sd, 4, "logloss", "one_std_err") == 1


def test_singleton_grid_equals_fixed_fit():
    ds = make_dataset(signal=1.5)
    plan = make_split_plan(ds, "subject_grouped", v=3, nested=True, seed=1)
    learner = LearnerSpec("logistic_elastic_net", alpha=0.9)
    tr = tune_resample(ds, plan, learner, "normalize=zscore", grid=[0.05], refit=False)
    fixed = fit_resample(ds, plan, learner.with_lambda(0.05), "normalize=zscore")
    assert [f.selected for f in tr.folds] == [0.05] * 3
    assert [f.outer.metrics["auc"] for f in tr.folds] == [f.metrics["auc"] for f in fixed.folds]


def test_tuning_final_lambda_is_median():
    ds = make_dataset(signal=1.5)
    plan = make_split_plan(ds, "subject_grouped", v=3, nested=True, seed=1)
    tr = tune_resample(ds, plan, LearnerSpec("logistic_elastic_net", alpha=0.9), "normalize=zscore", grid=5)
    sel = [f.selected for f in tr.folds]
    assert tr.final_lambda == pytest.approx(float(np.median(sel)))
    assert tr.final_model is not None
    for f in tr.folds:
        assert f.selected in f.candidates
