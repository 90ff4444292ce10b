"""Weighted Kaplan-Meier curves with Greenwood intervals, and standardized mean differences.

Centers ship every sum as an exact floating-point expansion (a short list of
non-overlapping doubles whose exact total is the true sum). The server rounds
the concatenated expansions once with :func:`math.fsum`, so the result is the
correctly rounded total no matter how patients are split across centers, and
equals a pooled ``math.fsum`` bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fedeca.errors import DataError
from fedeca.variance import Z_975


def exact_partials(values, partials=None):
    """Extend an exact expansion with ``values`` (Shewchuk's algorithm)."""
    partials = [] if partials is None else partials
    for x in values:
        x = float(x)
        i = 0
        for y in partials:
            if abs(x) < abs(y):
                x, y = y, x
            hi = x + y
            lo = y - (hi - x)
            if lo:
                partials[i] = lo
                i += 1
            x = hi
        partials[i:] = [x]
    return partials


def pack_partials(lists):
    """Flatten a list of expansions into ``(values, lengths)`` arrays."""
    lengths = np.array([len(p) for p in lists], dtype=np.int64)
    values = np.array([v for p in lists for v in p], dtype=float)
    return values, lengths


def unpack_partials(values, lengths):
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    return [list(values[bounds[i]:bounds[i + 1]]) for i in range(len(lengths))]


def merge_totals(per_center):
    """Correctly rounded totals from per-center expansion lists (same length each)."""
    if not per_center:
        return np.empty(0)
    return np.array([math.fsum(v for c in per_center for v in c[i]) for i in range(len(per_center[0]))])


# ---------------------------------------------------------------- Kaplan-Meier


@dataclass(eq=False)
class KMCurve:
    times: np.ndarray
    survival: np.ndarray
    var_greenwood: np.ndarray
    var_exp_greenwood: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    death_mass: np.ndarray
    risk_mass: np.ndarray
    arm: int | None = None

    def evaluate(self, grid):
        """Step-function values of ``(survival, ci_low, ci_high)`` on a grid."""
        k = np.searchsorted(self.times, np.asarray(grid, dtype=float), side="right")
        pad = lambda a, first: np.concatenate([[first], a])[k]
        return pad(self.survival, 1.0), pad(self.ci_low, 1.0), pad(self.ci_high, 1.0)


def km_local_share(time, event, weights, grid):
    """One center's exact death and risk masses at each grid time.

    ``time`` must be sorted ascending. Returns two lists of expansions.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event)
    weights = np.asarray(weights, dtype=float)
    S = len(grid)
    deaths = [[] for _ in range(S)]
    risks = [None] * S
    idx = np.searchsorted(grid, time)
    for t, e, w, k in zip(time, event, weights, idx):
        if e == 1 and k < S and grid[k] == t:
            exact_partials([w], deaths[k])
    running = []
    j = len(time) - 1
    for k in range(S - 1, -1, -1):
        while j >= 0 and time[j] >= grid[k]:
            exact_partials([weights[j]], running)
            j -= 1
        risks[k] = list(running)
    return deaths, risks


def km_from_masses(times, death, risk, arm=None) -> KMCurve:
    """Product-limit estimate and Greenwood variances from global masses."""
    S = len(times)
    surv = np.ones(S)
    green = np.zeros(S)
    s_run, g_run, frozen = 1.0, 0.0, False
    for k in range(S):
        d, r = death[k], risk[k]
        if not frozen and r > 0:
            s_run = s_run * ((r - d) / r)
            if r > d:
                g_run = g_run + d / (r * (r - d))
            else:
                frozen = True
        surv[k], green[k] = s_run, g_run
    var_gw = surv ** 2 * green
    with np.errstate(divide="ignore", invalid="ignore"):
        log_s = np.log(surv)
        var_z = np.where((surv > 0) & (surv < 1), green / log_s ** 2, 0.0)
        c = np.log(-log_s)
        half = Z_975 * np.sqrt(var_z)
        lo = np.exp(-np.exp(c + half))
        hi = np.exp(-np.exp(c - half))
    inner = (surv > 0) & (surv < 1)
    lo = np.where(inner, lo, surv)
    hi = np.where(inner, hi, surv)
    return KMCurve(np.asarray(times, float), surv, var_gw, var_z, lo, hi, np.asarray(death), np.asarray(risk), arm)


def weighted_kaplan_meier(time, event, weights=None, arm=None) -> KMCurve:
    """Pooled weighted Kaplan-Meier curve on the arm's distinct event times."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event)
    weights = np.ones(len(time)) if weights is None else np.asarray(weights, dtype=float)
    if len(time) == 0:
        raise DataError("empty arm")
    grid = np.unique(time[event == 1])
    death = np.array([math.fsum(weights[(time == s) & (event == 1)]) for s in grid])
    risk = np.array([math.fsum(weights[time >= s]) for s in grid])
    return km_from_masses(grid, death, risk, arm)


# ------------------------------------------------------------------------ SMD


@dataclass(eq=False)
class SMDReport:
    covariates: tuple
    smd_before: np.ndarray
    smd_after: np.ndarray
    mean_treated: np.ndarray
    mean_control: np.ndarray
    wmean_treated: np.ndarray
    wmean_control: np.ndarray
    var_treated: np.ndarray
    var_control: np.ndarray


MOMENT_KEYS = ("n", "sx", "sxx", "sw", "swx", "swxx")


def moment_local_share(X, treated, weights):
    """Exact per-arm moment expansions for every covariate.

    Returns ``{arm: {key: list of expansions}}`` with one expansion per
    covariate (``n`` and ``sw`` carry a single expansion).
    """
    X = np.asarray(X, dtype=float)
    weights = np.asarray(weights, dtype=float)
    out = {}
    for arm in (0, 1):
        m = np.asarray(treated) == arm
        Xa, wa = X[m], weights[m]
        out[arm] = {
            "n": [exact_partials(np.ones(int(m.sum())))],
            "sx": [exact_partials(Xa[:, j]) for j in range(X.shape[1])],
            "sxx": [exact_partials(Xa[:, j] * Xa[:, j]) for j in range(X.shape[1])],
            "sw": [exact_partials(wa)],
            "swx": [exact_partials(wa * Xa[:, j]) for j in range(X.shape[1])],
            "swxx": [exact_partials(wa * Xa[:, j] * Xa[:, j]) for j in range(X.shape[1])],
        }
    return out


def smd_from_moments(totals, covariates):
    """Server side: ``totals[arm][key]`` are correctly rounded global sums."""
    mean, wmean, var = {}, {}, {}
    for arm in (0, 1):
        t = totals[arm]
        n = t["n"][0]
        if n == 0:
            raise DataError("SMD needs both arms non-empty")
        mean[arm] = t["sx"] / n
        wmean[arm] = t["swx"] / t["sw"][0]
        with np.errstate(divide="ignore", invalid="ignore"):
            var[arm] = (t["sxx"] - n * mean[arm] ** 2) / (n - 1) if n > 1 else np.full(len(t["sx"]), np.nan)
    denom = np.sqrt((var[1] + var[0]) / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = denom > 0
        before = np.where(ok, (mean[1] - mean[0]) / np.where(ok, denom, 1.0), np.nan)
        after = np.where(ok, (wmean[1] - wmean[0]) / np.where(ok, denom, 1.0), np.nan)
    return SMDReport(tuple(covariates), before, after, mean[1], mean[0], wmean[1], wmean[0], var[1], var[0])


def standardized_mean_differences(X, treated, weights=None, covariates=None) -> SMDReport:
    """Pooled SMD before and after weighting; before-weighting variances normalize both."""
    X = np.asarray(X, dtype=float)
    weights = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=float)
    treated = np.asarray(treated)
    totals = {}
    for arm in (0, 1):
        m = treated == arm
        Xa, wa = X[m], weights[m]
        totals[arm] = {
            "n": np.array([math.fsum(np.ones(int(m.sum())))]),
            "sx": np.array([math.fsum(Xa[:, j]) for j in range(X.shape[1])]),
            "sxx": np.array([math.fsum(Xa[:, j] * Xa[:, j]) for j in range(X.shape[1])]),
            "sw": np.array([math.fsum(wa)]),
            "swx": np.array([math.fsum(wa * Xa[:, j]) for j in range(X.shape[1])]),
            "swxx": np.array([math.fsum(wa * Xa[:, j] * Xa[:, j]) for j in range(X.shape[1])]),
        }
    covariates = covariates or tuple(f"X_{j}" for j in range(X.shape[1]))
    return smd_from_moments(totals, covariates)
