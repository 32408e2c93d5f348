"""Built-in learners: logistic GLM (IRLS), elastic-net GLMs, OLS and ridge."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import _cd

log = logging.getLogger(__name__)

KINDS = ("logistic_glm", "logistic_elastic_net", "linear_ols", "linear_ridge")
BINARY_KINDS = ("logistic_glm", "logistic_elastic_net")

_LABELS = {
    "logistic_glm": "logistic_reg/glm",
    "logistic_elastic_net": "logistic_reg/glmnet",
    "linear_ols": "linear_reg/lm",
    "linear_ridge": "linear_reg/ridge",
}


class LearnerError(RuntimeError):
    pass


@dataclass(frozen=True)
class LearnerSpec:
    """What to fit. ``lam=None`` on an elastic net means: choose by inner CV."""

    kind: str = "logistic_glm"
    alpha: float = 0.9
    lam: float | None = None
    max_iter: int = 100
    tol: float = 1e-8
    n_lambda: int = 50
    cv_folds: int = 5
    ridge_eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.kind == "linear_ridge" and self.lam is None:
            object.__setattr__(self, "lam", 1.0)

    @property
    def label(self) -> str:
        return _LABELS[self.kind]

    @property
    def is_binary(self) -> bool:
        return self.kind in BINARY_KINDS

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "alpha": self.alpha,
            "lam": self.lam,
            "max_iter": self.max_iter,
            "tol": self.tol,
            "n_lambda": self.n_lambda,
            "cv_folds": self.cv_folds,
            "ridge_eps": self.ridge_eps,
        }

    @classmethod
    def from_dict(cls, d) -> "LearnerSpec":
        return cls(**d)

    def with_lambda(self, lam: float) -> "LearnerSpec":
        return replace(self, lam=float(lam))


def parse_learner(text: str) -> LearnerSpec:
    """Parse ``glm``, ``glmnet:alpha=0.9[,lambda=0.01]``, ``ols`` or ``ridge:lambda=1``."""
    name, _, rest = text.partition(":")
    params = {}
    for item in filter(None, rest.split(",")):
        key, _, value = item.partition("=")
        params[key.strip()] = value.strip()
    kind = {
        "glm": "logistic_glm",
        "logistic_glm": "logistic_glm",
        "glmnet": "logistic_elastic_net",
        "logistic_elastic_net": "logistic_elastic_net",
        "ols": "linear_ols",
        "lm": "linear_ols",
        "linear_ols": "linear_ols",
        "ridge": "linear_ridge",
        "linear_ridge": "linear_ridge",
    }.get(name.strip())
    if kind is None:
        raise ValueError(f"unknown learner {name!r}")
    kw = {"kind": kind}
    for key, value in params.items():
        if key in ("alpha", "mixture"):
            kw["alpha"] = float(value)
        elif key in ("lambda", "lam", "penalty"):
            kw["lam"] = None if value in ("cv", "tune") else float(value)
        elif key in ("max_iter", "n_lambda", "cv_folds"):
            kw[key] = int(value)
        elif key in ("tol", "ridge_eps"):
            kw[key] = float(value)
        else:
            raise ValueError(f"unknown learner parameter {key!r}")
    return LearnerSpec(**kw)


@dataclass
class FittedModel:
    intercept: float
    coef: np.ndarray
    kind: str
    feature_names: tuple[str, ...] = ()
    iterations: int = 0
    converged: bool = True
    lam: float | None = None
    info: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def coefficients(self) -> np.ndarray:
        """Intercept followed by slopes."""
        return np.concatenate([[self.intercept], self.coef])

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.coef.size:
            raise ValueError(f"expected {self.coef.size} features, got {X.shape[1]}")
        return self.intercept + X @ self.coef

    def predict(self, X) -> np.ndarray:
        """Probabilities of the positive class (binary) or fitted values."""
        eta = self.decision_function(X)
        return expit(eta) if self.kind in BINARY_KINDS else eta


def _check_binary(y):
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("binary outcome must be coded 0/1")
    if y.min() == y.max():
        raise ValueError("degenerate outcome: only one class present")
    return y


def _check_finite(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D matrix")
    if not np.all(np.isfinite(X)):
        raise LearnerError("design matrix contains missing or non-finite values")
    return X


def _penalized_deviance(Xd, y, beta, ridge_eps):
    eta = Xd @ beta
    ll = np.sum(y * eta - np.logaddexp(0.0, eta))
    return -2.0 * ll + ridge_eps * np.sum(beta[1:] ** 2)


def fit_logistic_irls(X, y, ridge_eps: float = 1e-8, max_iter: int = 100, tol: float = 1e-8) -> FittedModel:
    """Maximum-likelihood logistic regression by iteratively reweighted least squares.

    A ridge term ``ridge_eps/2 * ||slopes||^2`` is added to the negative
    log-likelihood so that separable data still produce finite coefficients.
    Steps are halved whenever the penalized deviance would increase.
    """
    X = _check_finite(X)
    y = _check_binary(y)
    n, p = X.shape
    Xd = np.column_stack([np.ones(n), X])
    pen = np.full(p + 1, ridge_eps)
    pen[0] = 0.0
    ybar = y.mean()
    beta = np.zeros(p + 1)
    beta[0] = np.log(ybar / (1 - ybar))
    dev = _penalized_deviance(Xd, y, beta, ridge_eps)
    trace = [dev]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(Xd @ beta)
        w = np.maximum(mu * (1 - mu), 1e-12)
        grad = Xd.T @ (y - mu) - pen * beta
        hess = (Xd * w[:, None]).T @ Xd + np.diag(pen)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            new_dev = _penalized_deviance(Xd, y, cand, ridge_eps)
            if new_dev <= dev + 1e-12 * (1 + abs(dev)) or t < 1e-10:
                break
            t *= 0.5
        change = np.max(np.abs(cand - beta))
        beta, dev = cand, new_dev
        trace.append(dev)
        if change < tol:
            converged = True
            break
    model = FittedModel(beta[0], beta[1:].copy(), "logistic_glm", iterations=it, converged=converged)
    model.info["deviance_trace"] = trace
    if not converged:
        msg = "IRLS did not converge (possible separation); coefficients are ridge-stabilized"
        model.warnings.append(msg)
        log.info(msg)
    return model


def _standardize(X):
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    active = sd > 1e-12 * np.maximum(1.0, np.abs(mean))
    Xs = np.zeros_like(X)
    Xs[:, active] = (X[:, active] - mean[active]) / sd[active]
    return Xs, mean, sd, active


def lambda_max(Xs, y, alpha) -> float:
    """Smallest lambda at which all slopes are zero (standardized scale)."""
    if Xs.shape[1] == 0:
        return 1.0
    g = np.abs(Xs.T @ (y - y.mean())) / Xs.shape[0]
    return float(max(g.max(), 1e-12) / max(alpha, 1e-3))


def lambda_path(lmax: float, n_lambda: int, ratio: float) -> np.ndarray:
    return lmax * ratio ** (np.arange(n_lambda) / max(n_lambda - 1, 1))


def _family_code(family: str) -> int:
    if family == "gaussian":
        return 0
    if family == "binomial":
        return 1
    raise ValueError(f"unknown family {family!r}")


def _deviance(family, y, eta):
    """Mean deviance per column of ``eta`` (n x k)."""
    y = y[:, None]
    if family == "binomial":
        return 2.0 * np.mean(np.logaddexp(0.0, eta) - y * eta, axis=0)
    return np.mean((y - eta) ** 2, axis=0)


def _path_on(X, y, lambdas, alpha, fam, tol, max_iter, truncate=True):
    Xs, mean, sd, active = _standardize(X)
    Xa = np.ascontiguousarray(Xs[:, active])
    b0, B, ok = _cd.fit_path(Xa, y, lambdas, alpha, fam, tol, max_iter, 10000, truncate)
    coef = np.zeros((lambdas.size, X.shape[1]))
    coef[:, active] = B / sd[active]
    intercepts = b0 - coef @ mean
    return intercepts, coef, ok, (Xa, B, b0)


def fit_elastic_net(
    X,
    y,
    alpha: float = 0.9,
    lam: float | None = None,
    family: str = "binomial",
    lambdas=None,
    n_lambda: int = 50,
    lambda_min_ratio: float | None = None,
    cv_folds: int = 5,
    rng: np.random.Generator | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> FittedModel:
    """Elastic-net GLM by coordinate descent along a warm-started lambda path.

    Predictors are standardized internally and coefficients returned on the
    original scale. With ``lam=None`` the penalty is the path value with the
    smallest inner-CV deviance; otherwise the path is run down to ``lam``.
    """
    X = _check_finite(X)
    y = np.asarray(y, dtype=np.float64)
    fam = _family_code(family)
    if family == "binomial":
        y = _check_binary(y)
    n, p = X.shape
    kind = "logistic_elastic_net" if family == "binomial" else "linear_elastic_net"
    if p == 0:
        b0 = np.log(y.mean() / (1 - y.mean())) if family == "binomial" else y.mean()
        return FittedModel(float(b0), np.zeros(0), kind, lam=lam, info={"alpha": alpha})

    Xs, _, _, active = _standardize(X)
    lmax = lambda_max(Xs[:, active], y, alpha)
    if lambdas is None:
        ratio = lambda_min_ratio if lambda_min_ratio is not None else (1e-4 if n > p else 1e-2)
        lambdas = lambda_path(lmax, n_lambda, ratio)
    lambdas = np.sort(np.asarray(lambdas, dtype=np.float64))[::-1]
    if lam is not None:
        lambdas = np.concatenate([lambdas[lambdas > lam], [float(lam)]])

    # a requested penalty must be solved exactly, so no early path stop
    intercepts, coefs, ok, _ = _path_on(X, y, lambdas, alpha, fam, tol, max_iter, truncate=lam is None)
    warn = []
    info = {"alpha": alpha, "lambda_max": lmax, "lambdas": lambdas}
    if lam is not None:
        k = lambdas.size - 1
        if not ok[k]:
            warn.append(f"coordinate descent did not converge at lambda={lam:.4g}")
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        cvm, cvse = _cv_deviance(X, y, lambdas, alpha, fam, family, cv_folds, rng, tol, max_iter)
        cvm = np.where(ok, cvm, np.nan)
        skipped = int(np.sum(~np.isfinite(cvm)))
        if skipped:
            warn.append(f"{skipped} lambda values skipped (non-convergence or empty CV folds)")
        if np.all(~np.isfinite(cvm)):
            k = 0
        else:
            k = int(np.nanargmin(cvm))
        info.update(cv_deviance=cvm, cv_se=cvse)
    model = FittedModel(
        float(intercepts[k]),
        coefs[k].copy(),
        kind,
        converged=bool(ok[k]),
        lam=float(lambdas[k]),
        info=info,
        warnings=warn,
    )
    return model


def _cv_deviance(X, y, lambdas, alpha, fam, family, k, rng, tol, max_iter):
    n = X.shape[0]
    k = max(2, min(k, n))
    foldid = rng.permutation(n) % k
    dev = np.full((k, lambdas.size), np.nan)
    weights = np.zeros(k)
    for f in range(k):
        tr, te = foldid != f, foldid == f
        if family == "binomial" and (y[tr].min() == y[tr].max()):
            continue
        b0, B, ok, _ = _path_on(X[tr], y[tr], lambdas, alpha, fam, tol, max_iter)
        eta = b0[None, :] + X[te] @ B.T
        dev[f] = np.where(ok, _deviance(family, y[te], eta), np.nan)
        weights[f] = te.sum()
    good = weights > 0
    if not good.any():
        return np.full(lambdas.size, np.nan), np.full(lambdas.size, np.nan)
    d, w = dev[good], weights[good]
    with np.errstate(invalid="ignore"):
        cvm = np.sum(d * w[:, None], axis=0) / w.sum()
        cvse = np.sqrt(np.sum(w[:, None] * (d - cvm) ** 2, axis=0) / w.sum() / max(good.sum() - 1, 1))
    return cvm, cvse


def fit_ols(X, y) -> FittedModel:
    X = _check_finite(X)
    y = np.asarray(y, dtype=np.float64)
    Xd = np.column_stack([np.ones(X.shape[0]), X])
    beta, *_ = np.linalg.lstsq(Xd, y, rcond=None)
    return FittedModel(float(beta[0]), beta[1:], "linear_ols")


def fit_ridge(X, y, lam: float) -> FittedModel:
    """Ridge on standardized predictors: (1/2n)||y - b0 - Xb||^2 + lam/2 ||b||^2."""
    X = _check_finite(X)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    Xs, mean, sd, active = _standardize(X)
    Xa = Xs[:, active]
    k = Xa.shape[1]
    b = np.linalg.solve(Xa.T @ Xa / n + lam * np.eye(k), Xa.T @ (y - y.mean()) / n) if k else np.zeros(0)
    coef = np.zeros(p)
    coef[active] = b / sd[active]
    return FittedModel(float(y.mean() - coef @ mean), coef, "linear_ridge", lam=lam)


def fit_learner(spec: LearnerSpec, X, y, rng: np.random.Generator | None = None) -> FittedModel:
    if spec.kind == "logistic_glm":
        return fit_logistic_irls(X, y, ridge_eps=spec.ridge_eps, max_iter=spec.max_iter, tol=spec.tol)
    if spec.kind == "logistic_elastic_net":
        m = fit_elastic_net(
            X,
            y,
            alpha=spec.alpha,
            lam=spec.lam,
            family="binomial",
            n_lambda=spec.n_lambda,
            cv_folds=spec.cv_folds,
            rng=rng,
            tol=spec.tol,
            max_iter=spec.max_iter,
        )
        m.kind = spec.kind
        return m
    if spec.kind == "linear_ols":
        return fit_ols(X, y)
    return fit_ridge(X, y, spec.lam)
