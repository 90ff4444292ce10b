"""Aggregator-side orchestration of a full FedECA analysis.

The solvers in :mod:`fedeca.propensity` and :mod:`fedeca.cox` are coroutines
that yield parameters and receive aggregated sums. :func:`lockstep` drives any
number of them together, so the main fit and all bootstrap replicates share
the same communication rounds.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from fedeca import analytics
from fedeca.cox import CoxLocalStats, CoxNewtonConfig, CoxNewtonResult, aggregate_grad_hess, cox_newton_solver
from fedeca.data import DEFAULT_EPSILON, ESTIMANDS
from fedeca.errors import DataError, FedecaError, error_from_kind
from fedeca.federation.protocol import Schema
from fedeca.propensity import PropensityFit, newton_raphson_solver
from fedeca.variance import (
    VARIANCE_METHODS,
    CoxFit,
    bootstrap_variance,
    draw_bootstrap_indices,
    make_fit,
    naive_variance,
    percentile_interval,
    robust_variance,
)

logger = logging.getLogger(__name__)


@dataclass
class FitConfig:
    """Every knob of one analysis; serialisable to and from JSON."""

    method: str = "fedeca"
    weighting: str = "iptw"
    estimand: str = "ate"
    epsilon: float = DEFAULT_EPSILON
    intercept: bool = False
    standardize: bool = False
    propensity_max_steps: int = 10
    propensity_tol: float = 1e-7
    cox_covariates: tuple = ()
    variance: str = "naive"
    extra_variances: tuple = ()
    n_bootstrap: int = 200
    bootstrap_ci: str = "normal"
    seed: int = 42
    gamma: float = 0.0
    l1_ratio: float = 1.0
    step_policy: str = "backtracking"
    step_size: float = 0.95
    max_rounds: int = 20
    grad_tol: float = 1e-7
    rel_tol: float = 1e-14

    def __post_init__(self):
        self.cox_covariates = tuple(int(c) for c in self.cox_covariates)
        self.extra_variances = tuple(self.extra_variances)
        self.estimand = self.estimand.lower()
        if self.estimand not in ESTIMANDS:
            raise DataError(f"unknown estimand {self.estimand!r}")
        for m in (self.variance, *self.extra_variances):
            if m not in VARIANCE_METHODS:
                raise DataError(f"unknown variance method {m!r}")
        if self.weighting not in ("iptw", "unit"):
            raise DataError(f"unknown weighting {self.weighting!r}")
        if self.bootstrap_ci not in ("normal", "percentile"):
            raise DataError(f"unknown bootstrap CI {self.bootstrap_ci!r}")

    @property
    def variance_methods(self):
        return tuple(dict.fromkeys((self.variance, *self.extra_variances)))

    def cox_config(self):
        return CoxNewtonConfig(
            gamma=self.gamma, l1_ratio=self.l1_ratio, step_policy=self.step_policy, step_size=self.step_size,
            max_rounds=self.max_rounds, grad_tol=self.grad_tol, rel_tol=self.rel_tol,
        )

    def to_dict(self):
        d = asdict(self)
        d["cox_covariates"] = list(self.cox_covariates)
        d["extra_variances"] = list(self.extra_variances)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise DataError(f"unknown fit options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FitResult:
    fit: CoxFit
    fits: dict
    cox: CoxNewtonResult
    propensity: Optional[PropensityFit]
    config: FitConfig
    event_times: np.ndarray
    scaling: Optional[tuple] = None
    bootstrap_betas: Optional[np.ndarray] = None

    @property
    def loglik(self):
        """Unpenalized log partial likelihood at the estimate."""
        return -self.cox.final.nll

    def report(self):
        f = self.fit
        out = {
            "beta": [float(b) for b in f.beta_hat],
            "ci": [f.ci_low, f.ci_high],
            "epsilon": self.config.epsilon,
            "estimand": self.config.estimand,
            "hr": f.hazard_ratio,
            "intercept": self.config.intercept,
            "loglik": self.loglik,
            "method": self.config.method,
            "n_bootstrap": f.n_bootstrap,
            "p": f.p_value,
            "rounds": f.rounds,
            "se": f.se,
            "theta": None if self.propensity is None else [float(t) for t in self.propensity.theta],
            "variance": [[float(v) for v in row] for row in f.variance],
            "variance_method": f.variance_method,
            "weighting": self.config.weighting,
            "z": f.z_stat,
        }
        if self.scaling is not None:
            out["scaling"] = {"shift": list(map(float, self.scaling[0])), "scale": list(map(float, self.scaling[1]))}
        return out


def report_json(report):
    """Canonical JSON text: sorted keys, shortest round-trip floats."""
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


# ------------------------------------------------------------------ lockstep


def lockstep(solvers, evaluate):
    """Drive coroutine solvers together.

    ``evaluate`` maps ``{job: request}`` to ``{job: reply or exception}``.
    Returns ``(results, errors)`` keyed by job.
    """
    results, errors, pending = {}, {}, {}

    def advance(job, step):
        try:
            pending[job] = step()
        except StopIteration as stop:
            results[job] = stop.value
        except FedecaError as exc:
            errors[job] = exc

    for job, gen in solvers.items():
        advance(job, lambda gen=gen: next(gen))
    while pending:
        requests, pending = pending, {}
        replies = evaluate(requests)
        for job in requests:
            reply, gen = replies[job], solvers[job]
            if isinstance(reply, BaseException):
                advance(job, lambda gen=gen, reply=reply: gen.throw(reply))
            else:
                advance(job, lambda gen=gen, reply=reply: gen.send(reply))
    return results, errors


def _parts(replies, key, i):
    """Per-center entries for the i-th job; raises the first reported error."""
    parts = []
    for k, r in enumerate(replies):
        entry = r[key][i]
        if isinstance(entry, dict) and "error" in entry:
            raise error_from_kind(entry["error"], f"center {k}: {entry['message']}")
        parts.append(entry)
    return parts


def _collect(jobs, fn):
    out = {}
    for i, job in enumerate(jobs):
        try:
            out[job] = fn(i, job)
        except FedecaError as exc:
            out[job] = exc
    return out


# ---------------------------------------------------------------- propensity


def fed_scaling(fed, jobs):
    """Global covariate mean and standard deviation per job (one round)."""
    replies = fed.exchange(Schema.COVARIATE_MOMENTS, {"jobs": np.array(jobs)})
    out = {}
    for i, job in enumerate(jobs):
        parts = [r["shares"][i] for r in replies]
        n = sum(p["n"] for p in parts)
        sx = sum(p["sx"] for p in parts)
        sxx = sum(p["sxx"] for p in parts)
        mean = sx / n
        sd = np.sqrt(np.maximum(sxx - n * mean ** 2, 0.0) / max(n - 1.0, 1.0))
        out[job] = (mean, np.where(sd > 0, sd, 1.0))
    return out


def fed_newton_raphson(fed, jobs, config: FitConfig, scaling=None, dim=None):
    """Federated logistic Newton-Raphson for several jobs in lockstep."""
    scaling = scaling or {}
    solvers = {j: newton_raphson_solver(dim, config.propensity_max_steps, config.propensity_tol, config.intercept) for j in jobs}

    def evaluate(requests):
        jl = list(requests)
        payload = {"jobs": np.array(jl), "theta": np.array([requests[j] for j in jl]), "intercept": config.intercept}
        if scaling:
            payload["shift"] = np.array([scaling[j][0] for j in jl])
            payload["scale"] = np.array([scaling[j][1] for j in jl])
        replies = fed.exchange(Schema.PROPENSITY, payload)

        def one(i, job):
            parts = _parts(replies, "shares", i)
            n = sum(p["n"] for p in parts)
            n_treated = sum(p["n_treated"] for p in parts)
            if n_treated == 0 or n_treated == n:
                raise DataError("propensity model needs both treated and control patients")
            return (
                sum(p["nll"] for p in parts),
                sum(p["g"] for p in parts),
                sum(p["H"] for p in parts),
            )

        return _collect(jl, one)

    return lockstep(solvers, evaluate)


# ---------------------------------------------------------------------- Cox


def fed_union_event_times(fed, jobs):
    replies = fed.exchange(Schema.EVENT_TIMES, {"jobs": np.array(jobs)})
    out = {}
    for i, job in enumerate(jobs):
        times = np.unique(np.concatenate([r["times"][i] for r in replies]))
        out[job] = times if len(times) else DataError("no events in federation")
    return out


def fed_cox_newton(fed, jobs, times, config: FitConfig, q):
    """Federated weighted Cox Newton-Raphson for several jobs in lockstep."""
    cfg = config.cox_config()
    solvers = {j: cox_newton_solver(q, cfg) for j in jobs}

    def evaluate(requests):
        jl = list(requests)
        replies = fed.exchange(Schema.COX, {"jobs": np.array(jl), "beta": np.array([requests[j] for j in jl])})

        def one(i, job):
            stats = [CoxLocalStats.from_payload(times[job], p) for p in _parts(replies, "shares", i) if p is not None]
            return aggregate_grad_hess(requests[job], stats)

        return _collect(jl, one)

    return lockstep(solvers, evaluate)


def fed_robust_variance(fed, jobs, cox_results, times):
    """Sandwich variance: broadcast global sums at the estimate, sum center shares."""
    payload = {
        "jobs": np.array(jobs),
        "beta": np.array([cox_results[j].beta for j in jobs]),
        "H": np.array([cox_results[j].hessian for j in jobs]),
        "W": [cox_results[j].final.W for j in jobs],
        "zeta0": [cox_results[j].final.zeta0 for j in jobs],
        "zeta1": [cox_results[j].final.zeta1 for j in jobs],
    }
    replies = fed.exchange(Schema.ROBUST, payload)
    return {job: robust_variance([r["M"][i] for r in replies if r["M"][i] is not None]) for i, job in enumerate(jobs)}


def run_jobs(fed, jobs, config: FitConfig, p):
    """Propensity, weights, event times and Cox fit for each job.

    Returns ``(results, errors)``; ``results[job]`` is
    ``(PropensityFit or None, CoxNewtonResult, times, scaling)``.
    """
    errors = {}
    jobs = list(jobs)
    scaling = fed_scaling(fed, jobs) if config.standardize and config.weighting == "iptw" else {}
    dim = p + int(config.intercept)
    props = {}
    if config.weighting == "iptw":
        props, errs = fed_newton_raphson(fed, jobs, config, scaling, dim)
        errors.update(errs)
        jobs = [j for j in jobs if j in props]
    if jobs:
        payload = {
            "jobs": np.array(jobs),
            "theta": np.array([props[j].theta if j in props else np.zeros(dim) for j in jobs]).reshape(len(jobs), dim),
            "estimand": config.estimand,
            "epsilon": config.epsilon,
            "intercept": config.intercept,
            "weighting": config.weighting,
            "cox_covariates": np.array(config.cox_covariates, dtype=np.int64),
        }
        if scaling:
            payload["shift"] = np.array([scaling[j][0] for j in jobs])
            payload["scale"] = np.array([scaling[j][1] for j in jobs])
        replies = fed.exchange(Schema.SET_WEIGHTS, payload)
        for job, res in _collect(jobs, lambda i, job: _parts(replies, "status", i)).items():
            if isinstance(res, Exception):
                errors[job] = res
        jobs = [j for j in jobs if j not in errors]
    times = {}
    if jobs:
        for job, t in fed_union_event_times(fed, jobs).items():
            if isinstance(t, Exception):
                errors[job] = t
            else:
                times[job] = t
        jobs = [j for j in jobs if j in times]
    if jobs:
        fed.exchange(Schema.SET_TIMES, {"jobs": np.array(jobs), "times": [times[j] for j in jobs]})
        q = 1 + len(config.cox_covariates)
        cox, errs = fed_cox_newton(fed, jobs, times, config, q)
        errors.update(errs)
        results = {j: (props.get(j), cox[j], times[j], scaling.get(j)) for j in cox}
    else:
        results = {}
    return results, errors


# ---------------------------------------------------------------- bootstrap


def global_order(fed):
    """Canonical pooled order of all patients as ``(center, local index)`` arrays.

    Sorted by ``(time, event)`` with ties broken by center then local index;
    partition-independent whenever (time, event) keys are distinct.
    """
    replies = fed.exchange(Schema.KEYS)
    t = np.concatenate([r["time"] for r in replies])
    e = np.concatenate([r["event"] for r in replies])
    center = np.concatenate([np.full(len(r["time"]), k) for k, r in enumerate(replies)])
    local = np.concatenate([np.arange(len(r["time"])) for r in replies])
    order = np.lexsort((local, center, e, t))
    return center[order], local[order]


def fed_bootstrap(fed, config: FitConfig, p, n_bootstrap=None, seed=None):
    """Global bootstrap of the whole pipeline; returns replicate coefficient rows.

    Replicate ``b`` resamples the virtual pooled index space with a
    counter-derived RNG; replicates that are degenerate (no event, a single
    treatment arm) or fail to fit are redrawn, with at most ``10 B`` redraws.
    """
    B = config.n_bootstrap if n_bootstrap is None else n_bootstrap
    seed = config.seed if seed is None else seed
    if B < 2:
        raise DataError("bootstrap needs at least two replicates")
    center, local = global_order(fed)
    n = len(center)
    attempt = {b: 0 for b in range(1, B + 1)}
    budget = 10 * B
    betas = {}
    pending = list(attempt)

    def redraw(b):
        nonlocal budget
        attempt[b] += 1
        budget -= 1
        if budget < 0:
            raise DataError("too many degenerate bootstrap resamples")

    while pending:
        wave = []
        to_plan = list(pending)
        while to_plan:
            plans = {b: draw_bootstrap_indices(n, seed, b, attempt[b]) for b in to_plan}
            per_center = []
            for k in range(fed.n_centers):
                per_center.append({
                    "jobs": np.array(to_plan),
                    "indices": [np.sort(local[plans[b]][center[plans[b]] == k]) for b in to_plan],
                })
            replies = fed.exchange(Schema.BOOTSTRAP_PLAN, per_center=per_center)
            counts = sum(r["counts"] for r in replies)
            retry = []
            for i, b in enumerate(to_plan):
                tot, treated, events = counts[i]
                if events == 0 or treated == 0 or treated == tot:
                    redraw(b)
                    retry.append(b)
                else:
                    wave.append(b)
            to_plan = retry
        results, errors = run_jobs(fed, wave, config, p)
        fed.exchange(Schema.DROP, {"jobs": np.array(wave)})
        pending = []
        for b in wave:
            if b in results:
                betas[b] = results[b][1].beta
            else:
                logger.debug("bootstrap replicate %d failed: %s", b, errors.get(b))
                redraw(b)
                pending.append(b)
    return np.array([betas[b] for b in range(1, B + 1)])


# ---------------------------------------------------------------------- fit


def fit_fedeca(fed, config: FitConfig | None = None) -> FitResult:
    """Run the full analysis over a federation.

    Steps: federated propensity model, local IPTW weights, union of event
    times, federated weighted Cox fit, then every requested variance
    estimator and a Wald test on the treatment coefficient.
    """
    config = config or FitConfig()
    hello = fed.exchange(Schema.HELLO)
    ps = {h["p"] for h in hello}
    if len(ps) != 1:
        raise DataError(f"centers disagree on covariate count: {sorted(ps)}")
    p = ps.pop()
    if any(c < 0 or c >= p for c in config.cox_covariates):
        raise DataError("Cox covariate index out of range")
    results, errors = run_jobs(fed, [0], config, p)
    if 0 in errors:
        raise errors[0]
    prop, cox, times, scaling = results[0]
    fits = {}
    boot = None
    for method in config.variance_methods:
        if method == "naive":
            fits[method] = make_fit(cox.beta, naive_variance(cox.hessian), method, rounds=cox.rounds)
        elif method == "robust":
            V = fed_robust_variance(fed, [0], {0: cox}, {0: times})[0]
            fits[method] = make_fit(cox.beta, V, method, rounds=cox.rounds)
        else:
            boot = fed_bootstrap(fed, config, p)
            V = bootstrap_variance(boot)
            pci = percentile_interval(boot) if config.bootstrap_ci == "percentile" else None
            fits[method] = make_fit(cox.beta, V, method, n_bootstrap=len(boot), rounds=cox.rounds, percentile_ci=pci)
    return FitResult(fits[config.variance], fits, cox, prop, config, times, scaling, boot)


# ----------------------------------------------------------------- analytics


def fed_kaplan_meier(fed, arm=None, weighted=True, job=0):
    """Federated weighted Kaplan-Meier curve for one arm (``None`` = everyone)."""
    arm_code = -1 if arm is None else int(arm)
    base = {"arm": arm_code, "weighted": weighted, "job": job}
    replies = fed.exchange(Schema.KM, {**base, "stage": "times"})
    grid = np.unique(np.concatenate([r["times"] for r in replies]))
    if sum(r["n"] for r in replies) == 0:
        raise DataError("empty arm")
    replies = fed.exchange(Schema.KM, {**base, "stage": "masses", "grid": grid})
    deaths = [analytics.unpack_partials(r["death_values"], r["death_lengths"]) for r in replies]
    risks = [analytics.unpack_partials(r["risk_values"], r["risk_lengths"]) for r in replies]
    return analytics.km_from_masses(grid, analytics.merge_totals(deaths), analytics.merge_totals(risks), arm)


def fed_smd(fed, weighted=True, job=0, covariates=None):
    """Federated SMD before and after weighting (one moment round)."""
    replies = fed.exchange(Schema.MOMENTS, {"weighted": weighted, "job": job})
    totals = {}
    for arm in (0, 1):
        totals[arm] = {}
        for key in analytics.MOMENT_KEYS:
            lists = [analytics.unpack_partials(r[str(arm)][key]["values"], r[str(arm)][key]["lengths"]) for r in replies]
            totals[arm][key] = analytics.merge_totals(lists)
    p = len(totals[0]["sx"])
    return analytics.smd_from_moments(totals, covariates or tuple(f"X_{j}" for j in range(p)))


def apply_report_weights(fed, report=None):
    """Install the weights of a finished fit (its JSON report) on job 0.

    Without a report, or for unweighted fits, every patient gets weight one.
    """
    report = report or {}
    theta = report.get("theta")
    unit = theta is None or report.get("weighting", "iptw") == "unit"
    payload = {
        "jobs": np.array([0]),
        "theta": np.zeros((1, 0)) if unit else np.array([theta], dtype=float),
        "estimand": report.get("estimand", "ate"),
        "epsilon": float(report.get("epsilon", DEFAULT_EPSILON)),
        "intercept": bool(report.get("intercept", False)),
        "weighting": "unit" if unit else "iptw",
        "cox_covariates": np.zeros(0, dtype=np.int64),
    }
    scaling = report.get("scaling")
    if scaling and not unit:
        payload["shift"] = np.array([scaling["shift"]], dtype=float)
        payload["scale"] = np.array([scaling["scale"]], dtype=float)
    replies = fed.exchange(Schema.SET_WEIGHTS, payload)
    _parts(replies, "status", 0)
