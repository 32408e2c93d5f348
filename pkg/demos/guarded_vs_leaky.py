"""
Guarded versus leaky preprocessing on the same folds
====================================================

A small subject-grouped dataset gets an extra predictor that is a noisy
copy of the outcome. Both pipelines share one repeated split plan, so the
per-repeat difference in AUC can be summarized with Delta-LSI.
"""
from __future__ import annotations

import numpy as np

from leakguard import PermutationConfig, audit_fit, delta_lsi, fit_resample, make_split_plan
from leakguard.learners import LearnerSpec
from leakguard.sim import SimConfig, simulate

# Simulated cohort: 200 rows from 34 subjects, 20 predictors
# with signal in the first five, plus one leaking column.
sd = simulate(SimConfig("peek_norm", n=200, p=20, s=0.5, seed=3, peek_var=0.09))
leaky_ds = sd.dataset
clean_ds = leaky_ds.with_predictors([c for c in leaky_ds.predictors if c not in sd.leak_columns])
print("leaking column:", sd.leak_columns)

# One plan for both arms: 5 folds, 20 repeats, subjects never straddle.
plan = make_split_plan(leaky_ds, "subject_grouped", v=5, repeats=20, seed=3)
print(plan.summary())

learner = LearnerSpec("logistic_elastic_net", alpha=0.9)
fit_leaky = fit_resample(leaky_ds, plan, learner, "normalize=zscore", seed=3)
fit_clean = fit_resample(clean_ds, plan, learner, "normalize=zscore", seed=3, check_data=False)
print(fit_leaky.summary())
print(fit_clean.summary())

# The audit of the leaky fit should flag the outcome proxy.
audit = audit_fit(fit_leaky, leaky_ds, PermutationConfig(B=200, perm_refit=False), plan=plan, B_multi=50)
print(audit.summary())

# Paired inflation estimate with a sign-flip test and BCa interval.
res = delta_lsi(fit_leaky, fit_clean, metric="auc", seed=3)
print(res.summary())
print("repeat deltas:", np.round(res.deltas, 3))
