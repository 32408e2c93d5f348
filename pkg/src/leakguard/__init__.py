"""Leakage-aware resampling, leakage audits and inflation estimates for tabular models."""
from __future__ import annotations

__version__ = "0.1.0"

from .data import Column, DataError, Dataset, RoleMap, TaskKind, load_csv, write_csv
from .splits import SplitError, SplitPlan, TimeParams, make_split_plan, overlap_check
from .preprocess import PreprocSpec, fit_preproc, apply_preproc
from .learners import LearnerSpec, fit_learner, parse_learner
from .metrics import auc, compute_metric
from .resample import (
    FitResult,
    PlanMismatchError,
    ResampleError,
    aggregate_repeats,
    fit_resample,
    tune_resample,
)
from .audit import LeakAudit, PermutationConfig, audit_fit, perm_gap
from .dlsi import DeltaLsiResult, delta_lsi, huber_location, sign_flip_test
from .sim import SimConfig, simulate

__all__ = [
    "Column",
    "DataError",
    "Dataset",
    "DeltaLsiResult",
    "FitResult",
    "LeakAudit",
    "LearnerSpec",
    "PermutationConfig",
    "PlanMismatchError",
    "PreprocSpec",
    "ResampleError",
    "RoleMap",
    "SimConfig",
    "SplitError",
    "SplitPlan",
    "TaskKind",
    "TimeParams",
    "aggregate_repeats",
    "apply_preproc",
    "audit_fit",
    "auc",
    "compute_metric",
    "delta_lsi",
    "fit_learner",
    "fit_preproc",
    "fit_resample",
    "huber_location",
    "load_csv",
    "make_split_plan",
    "overlap_check",
    "parse_learner",
    "perm_gap",
    "sign_flip_test",
    "simulate",
    "tune_resample",
    "write_csv",
]
