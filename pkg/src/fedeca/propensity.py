"""Logistic propensity model fitted by (federated) Newton-Raphson."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fedeca.errors import ConvergenceError, DataError, SeparationError

SCORE_FLOOR = np.finfo(float).tiny
SCORE_CEIL = np.nextafter(1.0, 0.0)
SEPARATION_BOUND = 50.0


@dataclass
class PropensityFit:
    theta: np.ndarray
    converged: bool
    iterations: int
    final_grad_norm: float
    nll_trace: list = field(default_factory=list)
    scores: Optional[np.ndarray] = None
    intercept: bool = False


def design_matrix(X, intercept=False, shift=None, scale=None):
    X = np.asarray(X, dtype=float)
    if shift is not None:
        X = (X - shift) / scale
    if intercept:
        X = np.column_stack([np.ones(len(X)), X])
    return X


def predict_propensity(theta, X, intercept=False, shift=None, scale=None):
    """Sigmoid of the linear predictor, clamped strictly inside (0, 1)."""
    eta = design_matrix(X, intercept, shift, scale) @ np.asarray(theta, dtype=float)
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ez = np.exp(eta[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, SCORE_FLOOR, SCORE_CEIL)


def logistic_nll(theta, X, treated):
    eta = X @ theta
    # -[a log p + (1-a) log(1-p)] = log(1 + e^eta) - a eta
    return float(np.sum(np.logaddexp(0.0, eta) - treated * eta))


def local_logistic_grad_hess(theta, X, treated):
    """Gradient and Hessian of a center's negative log-likelihood.

    ``X`` is the design matrix (intercept column included when enabled).
    Returns ``(nll, g, H)``.
    """
    theta = np.asarray(theta, dtype=float)
    if X.shape[1] != len(theta):
        raise DataError(f"theta has length {len(theta)}, design has {X.shape[1]} columns")
    eta = X @ theta
    p = np.empty_like(eta)
    pos = eta >= 0
    p[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ez = np.exp(eta[~pos])
    p[~pos] = ez / (1.0 + ez)
    g = X.T @ (p - treated)
    H = (X * (p * (1.0 - p))[:, None]).T @ X
    H = 0.5 * (H + H.T)
    nll = float(np.sum(np.logaddexp(0.0, eta) - treated * eta))
    if not (np.isfinite(nll) and np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
        raise DataError("non-finite logistic gradient or Hessian")
    return nll, g, H


def _newton_direction(H, g):
    try:
        d = np.linalg.solve(H, g)
        if np.all(np.isfinite(d)):
            return d
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-8 * max(np.trace(H) / len(g), 1.0)
    try:
        d = np.linalg.solve(H + jitter * np.eye(len(g)), g)
        if np.all(np.isfinite(d)):
            return d
    except np.linalg.LinAlgError:
        pass
    raise SeparationError("separable or collinear covariates")


def newton_raphson_solver(dim, max_steps=10, tol=1e-7, intercept=False):
    """Newton-Raphson on the summed logistic loss, as a coroutine.

    Yields parameter vectors and expects ``(nll, g, H)`` summed over centers
    to be sent back; returns a :class:`PropensityFit`. Stops after
    ``max_steps`` updates or once ``max|g| < tol``.
    """
    theta = np.zeros(dim)
    trace = []
    increases = 0
    nll, g, H = yield theta
    trace.append(nll)
    for step in range(max_steps):
        gnorm = float(np.max(np.abs(g)))
        if gnorm < tol:
            return PropensityFit(theta, True, step, gnorm, trace, intercept=intercept)
        theta = theta - _newton_direction(H, g)
        if np.max(np.abs(theta)) > SEPARATION_BOUND:
            raise SeparationError("separable or collinear covariates", trace)
        nll, g, H = yield theta
        increases = increases + 1 if nll > trace[-1] else 0
        trace.append(nll)
        if increases >= 3:
            raise ConvergenceError("propensity Newton-Raphson diverged", trace)
    gnorm = float(np.max(np.abs(g)))
    return PropensityFit(theta, gnorm < tol, max_steps, gnorm, trace, intercept=intercept)


def fit_logistic(X, treated, max_steps=10, tol=1e-7, intercept=False):
    """Single-process fit on one design; the K=1 case of the federated solver."""
    D = design_matrix(X, intercept)
    treated = np.asarray(treated, dtype=float)
    if treated.min() == treated.max():
        raise DataError("propensity model needs both treated and control patients")
    solver = newton_raphson_solver(D.shape[1], max_steps, tol, intercept)
    theta = next(solver)
    try:
        while True:
            theta = solver.send(local_logistic_grad_hess(theta, D, treated))
    except StopIteration as stop:
        fit = stop.value
    fit.scores = predict_propensity(fit.theta, X, intercept)
    return fit
