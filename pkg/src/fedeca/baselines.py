"""Single-process comparators: pooled IPTW, unweighted Cox and MAIC.

Pooled IPTW and the unweighted fit reuse the federated kernels through a
one-center :class:`LocalFederation`, so they are the literal K=1 case of the
federated pipeline. MAIC reweights the control-arm patient data so its
moments match the treated arm's aggregate statistics, then fits a weighted
Cox model on both arms.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from fedeca.cox import CoxNewtonResult, fit_cox, local_event_times, union_event_times
from fedeca.data import CenterCohort, WeightVector
from fedeca.errors import ConvergenceError, DataError
from fedeca.federation.runtime import LocalFederation
from fedeca.pipeline import FitConfig, FitResult, fit_fedeca
from fedeca.variance import (
    CoxFit,
    bootstrap,
    bootstrap_variance,
    local_robust_share,
    make_fit,
    naive_variance,
    percentile_interval,
)

METHODS = ("fedeca", "pooled_iptw", "unweighted", "maic")


def pooled_iptw(cohort: CenterCohort, config: FitConfig | None = None) -> FitResult:
    """Pooled IPTW Cox fit; the equivalence oracle for the federated pipeline."""
    config = dataclasses.replace(config or FitConfig(), method="pooled_iptw", weighting="iptw")
    return fit_fedeca(LocalFederation([cohort]), config)


def unweighted_cox(data, config: FitConfig | None = None) -> FitResult:
    """Cox regression on the treatment flag with unit weights.

    ``data`` is a cohort (pooled) or an existing federation.
    """
    config = dataclasses.replace(config or FitConfig(), method="unweighted", weighting="unit")
    fed = LocalFederation([data]) if isinstance(data, CenterCohort) else data
    return fit_fedeca(fed, config)


# ---------------------------------------------------------------------- MAIC


@dataclass(frozen=True)
class AggregateTarget:
    """Published moments of the aggregate arm."""

    mean: np.ndarray
    variance: Optional[np.ndarray] = None
    n: int = 0

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        if not np.all(np.isfinite(mean)):
            raise DataError("aggregate target means must be finite")
        object.__setattr__(self, "mean", mean)
        if self.variance is not None:
            var = np.asarray(self.variance, dtype=float)
            if var.shape != mean.shape or not np.all(np.isfinite(var)) or np.any(var <= 0):
                raise DataError("aggregate target variances must be finite and positive")
            object.__setattr__(self, "variance", var)

    @classmethod
    def from_arm(cls, X, match_variance=False):
        """Means (and ``ddof=0`` variances) of an arm's covariates."""
        X = np.asarray(X, dtype=float)
        return cls(X.mean(axis=0), X.var(axis=0) if match_variance else None, len(X))

    def moment_matrix(self, X):
        """Centered matching features: ``x - m`` and, if matching variances, ``(x - m)^2 - v``."""
        X = np.asarray(X, dtype=float)
        if X.shape[1] != len(self.mean):
            raise DataError(f"target has {len(self.mean)} covariates, data has {X.shape[1]}")
        dev = X - self.mean
        if self.variance is None:
            return dev
        return np.hstack([dev, dev ** 2 - self.variance])


@dataclass(frozen=True, eq=False)
class MaicWeights(WeightVector):
    coefficients: np.ndarray = None
    iterations: int = 0


def maic_weights(X_ipd, target: AggregateTarget, max_iter=100, tol=1e-12) -> MaicWeights:
    """Entropy-balancing weights ``exp(alpha' (c_i - c_target))``.

    Newton's method on ``log sum_i exp(alpha' c_i)``, whose gradient is the
    weighted mean of the centered features. Weights are rescaled to sum to
    the number of IPD patients. Infeasible targets (outside the convex hull
    of the IPD features) raise :class:`ConvergenceError`.
    """
    C = target.moment_matrix(X_ipd)
    n, d = C.shape
    if n == 0:
        raise DataError("MAIC needs individual patient data")
    alpha = np.zeros(d)

    def objective(a):
        eta = C @ a
        lse = logsumexp(eta)
        pi = np.exp(eta - lse)
        return lse, pi

    f, pi = objective(alpha)
    for it in range(1, max_iter + 1):
        grad = pi @ C
        if np.max(np.abs(grad)) < tol:
            break
        hess = (C * pi[:, None]).T @ C - np.outer(grad, grad)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise ConvergenceError("MAIC moment system is singular") from None
        lr = 1.0
        for _ in range(60):
            f_new, pi_new = objective(alpha - lr * step)
            if f_new <= f:
                break
            lr /= 2.0
        else:
            raise ConvergenceError("MAIC Newton step failed; target is likely infeasible")
        alpha = alpha - lr * step
        f, pi = f_new, pi_new
        if np.max(np.abs(alpha)) > 1e3:
            raise ConvergenceError("MAIC coefficients diverge; target is likely infeasible")
    else:
        grad = pi @ C
        if np.max(np.abs(grad)) >= tol:
            raise ConvergenceError(f"MAIC did not converge in {max_iter} iterations (max moment gap {np.max(np.abs(grad)):.3g})")
        it = max_iter
    w = pi * n
    return MaicWeights(w, "atc", 0.0, coefficients=alpha, iterations=it)


def _pooled_cox_fit(z, time, event, weights, config: FitConfig, method):
    """Weighted Cox fit plus naive or robust variance on pooled arrays."""
    order = np.lexsort((event, time))
    z, time, event, weights = z[order], time[order], event[order], weights[order]
    res: CoxNewtonResult = fit_cox(z, time, event, weights, config.cox_config())
    if method == "naive":
        V = naive_variance(res.hessian)
    elif method == "robust":
        times = union_event_times([local_event_times(time, event)])
        f = res.final
        V = local_robust_share(res.beta, res.hessian, z, time, event, weights, times, f.W, f.zeta0, f.zeta1)
        V = 0.5 * (V + V.T)
    else:
        raise DataError(f"variance method {method!r} not handled here")
    return res, V


@dataclass
class MaicResult:
    fit: CoxFit
    fits: dict
    cox: CoxNewtonResult
    weights: MaicWeights
    target: AggregateTarget
    config: FitConfig

    @property
    def loglik(self):
        return -self.cox.final.nll

    def report(self):
        f = self.fit
        return {
            "beta": [float(b) for b in f.beta_hat],
            "ci": [f.ci_low, f.ci_high],
            "estimand": "atc",
            "hr": f.hazard_ratio,
            "loglik": self.loglik,
            "match_variance": self.target.variance is not None,
            "method": "maic",
            "n_bootstrap": f.n_bootstrap,
            "p": f.p_value,
            "rounds": f.rounds,
            "se": f.se,
            "variance": [[float(v) for v in row] for row in f.variance],
            "variance_method": f.variance_method,
            "z": f.z_stat,
        }


def _maic_arrays(cohort: CenterCohort, match_variance, covariates=None):
    X, a, t, e = cohort.in_original_order()
    cols = list(range(X.shape[1])) if covariates is None else list(covariates)
    treated, control = a == 1, a == 0
    if not treated.any() or not control.any():
        raise DataError("MAIC needs both a treated and a control arm")
    target = AggregateTarget.from_arm(X[treated][:, cols], match_variance)
    return X, a, t, e, cols, treated, control, target


def maic(cohort: CenterCohort, config: FitConfig | None = None, match_variance=False, covariates=None) -> MaicResult:
    """MAIC followed by a weighted Cox fit on the treatment flag.

    The treated arm contributes only its covariate moments to the matching
    and keeps unit weights; control-arm IPD is reweighted. Bootstrap
    replicates resample the IPD only, with the target held fixed.
    """
    config = dataclasses.replace(config or FitConfig(), method="maic")
    X, a, t, e, cols, treated, control, target = _maic_arrays(cohort, match_variance, covariates)
    mw = maic_weights(X[control][:, cols], target)
    weights = np.ones(len(a))
    weights[control] = mw.weights
    z = a.astype(float)[:, None]
    fits = {}
    cox = None
    for method in config.variance_methods:
        if method in ("naive", "robust"):
            cox, V = _pooled_cox_fit(z, t, e, weights, config, method)
            fits[method] = make_fit(cox.beta, V, method, rounds=cox.rounds)
        else:
            if cox is None:
                cox, _ = _pooled_cox_fit(z, t, e, weights, config, "naive")
            reps = maic_bootstrap(cohort, config, match_variance, covariates)
            pci = percentile_interval(reps) if config.bootstrap_ci == "percentile" else None
            fits[method] = make_fit(cox.beta, bootstrap_variance(reps), method, len(reps), cox.rounds, pci)
    return MaicResult(fits[config.variance], fits, cox, mw, target, config)


def maic_bootstrap(cohort: CenterCohort, config: FitConfig, match_variance=False, covariates=None):
    """Replicate log hazard ratios, resampling control-arm IPD only."""
    X, a, t, e, cols, treated, control, target = _maic_arrays(cohort, match_variance, covariates)
    ctrl = np.flatnonzero(control)
    # canonical order of the IPD so draws do not depend on row order
    ctrl = ctrl[np.lexsort((ctrl, e[ctrl], t[ctrl]))]
    tr = np.flatnonzero(treated)

    def statistic(idx):
        rows = ctrl[idx]
        w = np.concatenate([np.ones(len(tr)), maic_weights(X[rows][:, cols], target).weights])
        keep = np.concatenate([tr, rows])
        res, _ = _pooled_cox_fit(a[keep].astype(float)[:, None], t[keep], e[keep], w, config, "naive")
        return res.beta

    def accept(idx):
        return bool(e[tr].any() or e[ctrl[idx]].any())

    return bootstrap(len(ctrl), statistic, config.n_bootstrap, config.seed, accept)
