"""Task metrics for binary classification and regression."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import TaskKind

BINARY_METRICS = ("auc", "accuracy", "logloss")
REGRESSION_METRICS = ("rmse", "mae", "r2")

HIGHER_IS_BETTER = {
    "auc": True,
    "accuracy": True,
    "logloss": False,
    "rmse": False,
    "mae": False,
    "r2": True,
}

METRIC_RANGE = {
    "auc": (0.0, 1.0),
    "accuracy": (0.0, 1.0),
    "logloss": (0.0, np.inf),
    "rmse": (0.0, np.inf),
    "mae": (0.0, np.inf),
    "r2": (-np.inf, 1.0),
}

# aliases accepted from tidymodels-style names
ALIASES = {"roc_auc": "auc", "mn_log_loss": "logloss", "rsq": "r2"}

PROB_CLIP = 1e-12


class UndefinedMetric(ValueError):
    """The metric cannot be computed on this sample (e.g. one class only)."""


def canonical_metric(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in HIGHER_IS_BETTER:
        raise ValueError(f"unknown metric {name!r}")
    return name


def valid_metrics(task: TaskKind) -> tuple[str, ...]:
    return BINARY_METRICS if task == TaskKind.BINARY else REGRESSION_METRICS


@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float
    n_test: int


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score+ > score-) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) > 0.5
    n1 = int(labels.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetric("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def accuracy(prob, labels, threshold: float = 0.5) -> float:
    pred = np.asarray(prob) >= threshold
    return float(np.mean(pred == (np.asarray(labels) > 0.5)))


def logloss(prob, labels) -> float:
    p = np.clip(np.asarray(prob, dtype=np.float64), PROB_CLIP, 1.0 - PROB_CLIP)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def rmse(pred, truth) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def mae(pred, truth) -> float:
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64))))


def r2(pred, truth) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    ss_res = np.sum((truth - np.asarray(pred, dtype=np.float64)) ** 2)
    ss_tot = np.sum((truth - truth.mean()) ** 2)
    if ss_tot == 0:
        raise UndefinedMetric("R^2 undefined for constant truth")
    return float(1.0 - ss_res / ss_tot)


def compute_metric(name: str, pred, truth, threshold: float = 0.5) -> float:
    name = canonical_metric(name)
    if name == "auc":
        return auc(pred, truth)
    if name == "accuracy":
        return accuracy(pred, truth, threshold)
    if name == "logloss":
        return logloss(pred, truth)
    if name == "rmse":
        return rmse(pred, truth)
    if name == "mae":
        return mae(pred, truth)
    return r2(pred, truth)


def metric_suite(task: TaskKind, predictions, truth, names=None, threshold: float = 0.5) -> list[MetricValue]:
    """Evaluate the requested metrics (all task metrics by default).

    Metrics undefined on this sample are left out of the result.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predictions.size == 0:
        raise ValueError("empty predictions")
    if predictions.shape != truth.shape:
        raise ValueError("predictions and truth have different lengths")
    allowed = valid_metrics(task)
    names = allowed if names is None else [canonical_metric(n) for n in names]
    out = []
    for name in names:
        if name not in allowed:
            raise ValueError(f"metric {name!r} is not defined for {task.value}")
        try:
            value = compute_metric(name, predictions, truth, threshold)
        except UndefinedMetric:
            continue
        out.append(MetricValue(name, value, int(predictions.size)))
    return out
