from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import minimize

from leakguard.learners import (
    LearnerSpec,
    _standardize,
    fit_elastic_net,
    fit_learner,
    fit_logistic_irls,
    fit_ols,
    fit_ridge,
    lambda_max,
    parse_learner,
)


def _logistic_problem(n=50, p=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    beta = rng.normal(size=p)
    y = (rng.random(n) < 1 / (1 + np.exp(-(0.3 + X @ beta)))).astype(float)
    return X, y


def _kkt_residual(X, y, model, alpha, lam):
    """Largest KKT violation on the standardized scale used by the solver."""
    Xs, mean, sd, active = _standardize(X)
    b = model.coef * sd
    b0 = model.intercept + model.coef @ mean
    mu = 1 / (1 + np.exp(-(b0 + Xs @ b)))
    g = Xs.T @ (y - mu) / len(y)
    worst = abs(np.mean(y - mu))
    for j in range(X.shape[1]):
        if b[j] != 0:
            r = abs(g[j] - lam * (1 - alpha) * b[j] - lam * alpha * np.sign(b[j]))
        else:
            r = max(0.0, abs(g[j]) - lam * alpha)
        worst = max(worst, r)
    return worst


def test_parse_learner():
    assert parse_learner("glm").kind == "logistic_glm"
    spec = parse_learner("glmnet:alpha=0.9")
    assert spec.kind == "logistic_elastic_net" and spec.alpha == 0.9 and spec.lam is None
    assert parse_learner("ridge:lambda=2").lam == 2.0
    with pytest.raises(ValueError):
        parse_learner("forest")


def test_intercept_only_balanced():
    m = fit_logistic_irls(np.zeros((10, 0)), np.array([0, 1] * 5))
    assert m.intercept == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(m.predict(np.zeros((4, 0))), 0.5)


def test_degenerate_outcome():
    with pytest.raises(Exception, match="degenerate outcome"):
        fit_logistic_irls(np.ones((5, 1)), np.ones(5))


def test_irls_matches_gradient_optimizer():
    X, y = _logistic_problem()
    m = fit_logistic_irls(X, y, ridge_eps=0.0)
    Xd = np.column_stack([np.ones(len(y)), X])

    def nll(b):
        eta = Xd @ b
        return np.sum(np.logaddexp(0, eta) - y * eta)

    def grad(b):
        return Xd.T @ (1 / (1 + np.exp(-(Xd @ b))) - y)

    ref = minimize(nll, np.zeros(4), jac=grad, method="BFGS", options={"gtol": 1e-10}).x
    assert np.allclose(m.coefficients, ref, atol=1e-6)


def test_lambda_max_zeroes_slopes():
    X, y = _logistic_problem(80, 5, 3)
    Xs, *_ = _standardize(X)
    lmax = lambda_max(Xs, y, 0.9)
    m = fit_elastic_net(X, y, alpha=0.9, lam=lmax * 1.0001)
    assert np.all(m.coef == 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_elastic_net_kkt(seed):
    X, y = _logistic_problem(60 + 10 * seed, 4 + seed, seed)
    Xs, *_ = _standardize(X)
    lmax = lambda_max(Xs, y, 0.7)
    for frac in (0.5, 0.1, 0.01):
        m = fit_elastic_net(X, y, alpha=0.7, lam=lmax * frac)
        assert _kkt_residual(X, y, m, 0.7, lmax * frac) <= 1e-6


def test_kkt_on_near_separable_data():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(160, 20))
    y = (X[:, 0] + 0.05 * rng.normal(size=160) > 0).astype(float)
    Xs, *_ = _standardize(X)
    lam = lambda_max(Xs, y, 0.9) * 1e-3
    m = fit_elastic_net(X, y, alpha=0.9, lam=lam)
    assert m.converged
    assert _kkt_residual(X, y, m, 0.9, lam) <= 1e-6


def test_alpha_zero_matches_ridge_oracle():
    X, y = _logistic_problem(70, 4, 5)
    lam = 0.05
    m = fit_elastic_net(X, y, alpha=0.0, lam=lam)
    Xs, mean, sd, _ = _standardize(X)
    n = len(y)

    def obj(w):
        eta = w[0] + Xs @ w[1:]
        return np.mean(np.logaddexp(0, eta) - y * eta) + lam / 2 * np.sum(w[1:] ** 2)

    def grad(w):
        r = 1 / (1 + np.exp(-(w[0] + Xs @ w[1:]))) - y
        return np.concatenate([[r.mean()], Xs.T @ r / n + lam * w[1:]])

    w = minimize(obj, np.zeros(5), jac=grad, method="BFGS", options={"gtol": 1e-12}).x
    assert np.allclose(m.coef * sd, w[1:], atol=1e-5)


def test_nonzero_count_monotone_in_lambda():
    X, y = _logistic_problem(100, 8, 9)
    Xs, *_ = _standardize(X)
    lmax = lambda_max(Xs, y, 1.0)
    counts = [np.count_nonzero(fit_elastic_net(X, y, alpha=1.0, lam=lmax * f).coef)
              for f in (0.01, 0.05, 0.2, 0.5, 0.9)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_ols_and_ridge():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 3))
    y = 1.0 + X @ np.array([0.5, -1.0, 2.0]) + 0.1 * rng.normal(size=40)
    m = fit_ols(X, y)
    ref = np.linalg.lstsq(np.column_stack([np.ones(40), X]), y, rcond=None)[0]
    assert np.allclose(m.coefficients, ref)
    r0 = fit_ridge(X, y, 0.0)
    assert np.allclose(r0.coefficients, ref, atol=1e-8)
    assert np.linalg.norm(fit_ridge(X, y, 10.0).coef) < np.linalg.norm(m.coef)


def test_predictions_in_unit_interval():
    X, y = _logistic_problem()
    m = fit_learner(LearnerSpec("logistic_elastic_net", alpha=0.5), X, y, np.random.default_rng(0))
    p = m.predict(X)
    assert np.all((p > 0) & (p < 1))
