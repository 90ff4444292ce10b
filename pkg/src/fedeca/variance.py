"""Variance estimators and the Wald test for the treatment coefficient."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.stats import norm

from fedeca.errors import ConvergenceError, DataError

Z_975 = 1.959963984540054
VARIANCE_METHODS = ("naive", "robust", "bootstrap")


@dataclass
class CoxFit:
    beta_hat: np.ndarray
    variance: np.ndarray
    variance_method: str
    hazard_ratio: float
    ci_low: float
    ci_high: float
    z_stat: float
    p_value: float
    n_bootstrap: Optional[int] = None
    rounds: int = 0

    @property
    def se(self):
        return float(np.sqrt(self.variance[0, 0]))


def naive_variance(H):
    """Inverse of the (penalized) Hessian at the optimum."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    try:
        V = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        raise ConvergenceError("singular Hessian: naive variance undefined") from None
    return 0.5 * (V + V.T)


def score_residuals(beta, z, time, event, weights, times, W, zeta0, zeta1):
    """Per-patient score residuals ``phi_i`` from global risk-set sums.

    ``W``, ``zeta0``, ``zeta1`` are the global sums at ``beta`` over the global
    event grid ``times``. The cumulative terms run over event times up to the
    patient's own observed time, so censored patients contribute too.
    """
    beta = np.asarray(beta, dtype=float)
    risk = np.exp(z @ beta) * weights
    m = W > 0
    inc0 = np.where(m, W / np.where(m, zeta0, 1.0), 0.0)
    inc1 = np.where(m[:, None], (W / np.where(m, zeta0, 1.0) ** 2)[:, None] * zeta1, 0.0)
    cum0 = np.concatenate([[0.0], np.cumsum(inc0)])
    cum1 = np.vstack([np.zeros((1, zeta1.shape[1])), np.cumsum(inc1, axis=0)])
    upto = np.searchsorted(times, time, side="right")
    phi = -risk[:, None] * z * cum0[upto][:, None] + risk[:, None] * cum1[upto]
    dead = np.asarray(event) == 1
    if np.any(dead):
        k = np.searchsorted(times, time[dead])
        mean_z = zeta1[k] / zeta0[k][:, None]
        phi[dead] += weights[dead][:, None] * (z[dead] - mean_z)
    return phi


def local_robust_share(beta, H, z, time, event, weights, times, W, zeta0, zeta1):
    """One center's share ``sum_i (H^-1 phi_i)(H^-1 phi_i)'`` of the sandwich."""
    if H is None or zeta0 is None:
        raise DataError("robust share needs the broadcast Hessian and risk-set sums")
    phi = score_residuals(beta, z, time, event, weights, times, W, zeta0, zeta1)
    u = phi @ np.linalg.inv(np.atleast_2d(H)).T
    return u.T @ u


def robust_variance(shares):
    """Sum the center shares in center order."""
    V = sum(shares)
    return 0.5 * (V + V.T)


def bootstrap_variance(replicates):
    reps = np.asarray(replicates, dtype=float)
    if reps.ndim == 1:
        reps = reps[:, None]
    if len(reps) < 2:
        raise DataError("bootstrap needs at least two replicates")
    return np.atleast_2d(np.cov(reps, rowvar=False, ddof=1))


def wald_test(beta_hat, variance, index=0):
    """Two-sided Wald test on one coefficient.

    Returns ``(z, p, hazard_ratio, (ci_low, ci_high))``.
    """
    b = float(np.atleast_1d(beta_hat)[index])
    var = float(np.atleast_2d(variance)[index, index])
    if not var > 0:
        raise DataError("zero variance: Wald test undefined")
    se = np.sqrt(var)
    zstat = b / se
    p = float(min(1.0, 2.0 * norm.sf(abs(zstat))))
    with np.errstate(over="ignore"):
        ci = (float(np.exp(b - Z_975 * se)), float(np.exp(b + Z_975 * se)))
    return zstat, p, float(np.exp(b)), ci


def make_fit(beta_hat, variance, method, n_bootstrap=None, rounds=0, percentile_ci=None):
    zstat, p, hr, ci = wald_test(beta_hat, variance)
    if percentile_ci is not None:
        ci = percentile_ci
    return CoxFit(
        np.asarray(beta_hat, dtype=float), np.atleast_2d(variance), method, hr, ci[0], ci[1], zstat, p,
        n_bootstrap, rounds,
    )


def bootstrap_rng(seed, replicate, attempt):
    ss = np.random.SeedSequence(seed, spawn_key=(int(replicate), int(attempt)))
    return np.random.Generator(np.random.PCG64(ss))


def draw_bootstrap_indices(n, seed, replicate, attempt=0):
    """Indices into the canonical pooled order for one replicate attempt."""
    return bootstrap_rng(seed, replicate, attempt).integers(0, n, size=n)


def bootstrap(
    n: int,
    statistic: Callable[[np.ndarray], np.ndarray],
    n_bootstrap: int = 200,
    seed: int = 0,
    accept: Optional[Callable[[np.ndarray], bool]] = None,
):
    """Generic bootstrap over ``n`` canonically ordered units.

    ``statistic`` maps resampled indices to a parameter vector. Draws failing
    ``accept`` (or raising :class:`FedecaError` subclasses of data/convergence
    type) are redrawn, with at most ``10 * n_bootstrap`` extra attempts.

    Returns the array of replicate statistics.
    """
    if n_bootstrap < 2:
        raise DataError("bootstrap needs at least two replicates")
    out = []
    budget = 10 * n_bootstrap
    for b in range(1, n_bootstrap + 1):
        attempt = 0
        while True:
            idx = draw_bootstrap_indices(n, seed, b, attempt)
            ok = accept is None or accept(idx)
            if ok:
                try:
                    out.append(np.atleast_1d(statistic(idx)))
                    break
                except (DataError, ConvergenceError):
                    pass
            attempt += 1
            budget -= 1
            if budget < 0:
                raise DataError("too many degenerate bootstrap resamples")
    return np.array(out)


def percentile_interval(replicates, level=0.95):
    lo, hi = np.quantile(np.asarray(replicates)[:, 0], [(1 - level) / 2, (1 + level) / 2])
    return float(np.exp(lo)), float(np.exp(hi))
