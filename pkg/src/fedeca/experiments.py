"""Monte-Carlo studies: federated/pooled equivalence, SMD curves, power and type-I error.

Every replication draws its cohort from a counter-mode seed derived from the
master seed, so replications are independent of each other and of the order
in which workers finish. Tables are assembled in replication order and
written as CSV with shortest round-trip floats.

CSV schemas
-----------
equivalence rows
    ``n_centers, rep, seed, err_propensity, err_hr, err_p, err_loglik``
equivalence summary
    ``n_centers, quantity, max, median, mean``
power / type-I
    ``axis, value, hazard_ratio, method, variance, reps, failures, rejections, rate, band_low, band_high``
SMD curve
    ``shift, method, reps, mean_abs_smd_before, mean_abs_smd_after, max_abs_smd_after``
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from fedeca import baselines
from fedeca.analytics import standardized_mean_differences
from fedeca.errors import ConvergenceError, DataError, FedecaError
from fedeca.federation.runtime import LocalFederation, SimuFederation, split_cohort
from fedeca.pipeline import FitConfig, fed_smd, fit_fedeca
from fedeca.propensity import predict_propensity
from fedeca.simulate import SimConfig, replication_seed, simulate
from fedeca.variance import Z_975

logger = logging.getLogger(__name__)

EXPERIMENTS = ("equivalence", "smd_curve", "power", "type1")
SWEEP_AXES = ("n_centers", "shift", "n")
FAILURE_CAP = 0.05
ALPHA_LEVEL = 0.05


@dataclass
class ExperimentConfig:
    """One study; ``methods`` entries are ``"method:variance"`` strings for power runs."""

    experiment: str = "equivalence"
    reps: int = 100
    sim: dict = field(default_factory=dict)
    sweep_axis: str = "n_centers"
    sweep: tuple = (3,)
    methods: tuple = ("fedeca",)
    n_bootstrap: int = 200
    seed: int = 42
    split: str = "uniform"
    match_variance: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise DataError(f"unknown experiment {self.experiment!r}")
        if self.reps < 1:
            raise DataError("replication count must be at least 1")
        if self.sweep_axis not in SWEEP_AXES:
            raise DataError(f"unknown sweep axis {self.sweep_axis!r}")
        self.sweep = tuple(self.sweep)
        self.methods = tuple(self.methods)
        if not self.sweep:
            raise DataError("sweep must not be empty")
        SimConfig(**self.sim)

    def sim_config(self, value, seed):
        d = dict(self.sim)
        if self.sweep_axis in ("shift", "n"):
            d[self.sweep_axis] = value
        d["seed"] = seed
        return SimConfig(**d)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["sweep"] = list(self.sweep)
        d["methods"] = list(self.methods)
        return d


def load_experiment_config(path, **overrides) -> ExperimentConfig:
    """Read a YAML experiment config; ``overrides`` replace top-level keys."""
    try:
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except yaml.YAMLError as exc:
        raise DataError(f"invalid YAML in {path}: {exc}") from None
    d.update({k: v for k, v in overrides.items() if v is not None})
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(d) - names
    if unknown:
        raise DataError(f"unknown experiment options: {sorted(unknown)}")
    return ExperimentConfig(**d)


def _map(fn, tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows, columns, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def rel_err(a, b):
    """Elementwise ``|a - b| / |b|`` (absolute error where ``b == 0``)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    diff = np.abs(a - b)
    return np.where(b != 0, diff / np.where(b != 0, np.abs(b), 1.0), diff)


# --------------------------------------------------------------- equivalence

EQUIVALENCE_COLUMNS = ("n_centers", "rep", "seed", "err_propensity", "err_hr", "err_p", "err_loglik")
EQUIVALENCE_QUANTITIES = ("err_propensity", "err_hr", "err_p", "err_loglik")


def equivalence_replicate(task):
    """Federated (wire codec) versus pooled fit on one simulated cohort."""
    cfg, k, rep = task
    seed = replication_seed(cfg.seed, rep)
    cohort, _ = simulate(cfg.sim_config(None, seed))
    fit_cfg = FitConfig(seed=seed)
    try:
        pooled = baselines.pooled_iptw(cohort, fit_cfg)
        fed = fit_fedeca(SimuFederation(split_cohort(cohort, k, cfg.split, seed=seed)), fit_cfg)
    except FedecaError as exc:
        raise type(exc)(f"replication {rep} (seed {seed}, K={k}): {exc}") from exc
    X = cohort.X
    scores_fed = predict_propensity(fed.propensity.theta, X)
    scores_pooled = predict_propensity(pooled.propensity.theta, X)
    return {
        "n_centers": k,
        "rep": rep,
        "seed": seed,
        "err_propensity": float(np.max(rel_err(scores_fed, scores_pooled))),
        "err_hr": float(rel_err(fed.fit.hazard_ratio, pooled.fit.hazard_ratio)),
        "err_p": float(rel_err(fed.fit.p_value, pooled.fit.p_value)),
        "err_loglik": float(rel_err(fed.loglik, pooled.loglik)),
    }


def summarize_equivalence(rows):
    out = []
    for k in sorted({r["n_centers"] for r in rows}):
        sub = [r for r in rows if r["n_centers"] == k]
        for q in EQUIVALENCE_QUANTITIES:
            v = np.array([r[q] for r in sub])
            out.append({"n_centers": k, "quantity": q, "max": float(v.max()), "median": float(np.median(v)), "mean": float(v.mean())})
    return out


def run_equivalence(cfg: ExperimentConfig):
    """Relative errors between federated and pooled fits; one row per (K, replication)."""
    if cfg.sweep_axis != "n_centers":
        raise DataError("equivalence sweeps the number of centers")
    tasks = [(cfg, int(k), rep) for k in cfg.sweep for rep in range(cfg.reps)]
    return _map(equivalence_replicate, tasks, cfg.workers)


# ------------------------------------------------------------- power / type-I

POWER_COLUMNS = ("axis", "value", "hazard_ratio", "method", "variance", "reps", "failures", "rejections", "rate", "band_low", "band_high")


def parse_method(entry):
    method, _, variance = entry.partition(":")
    variance = variance or ("naive" if method == "unweighted" else "bootstrap")
    if method not in ("fedeca", "pooled_iptw", "unweighted", "maic"):
        raise DataError(f"unknown method {method!r}")
    return method, variance


def fit_method(cohort, method, variance, seed, n_bootstrap, match_variance=False, n_centers=1, split="eca"):
    """p-value of the treatment effect for one method/variance pair."""
    cfg = FitConfig(variance=variance, n_bootstrap=n_bootstrap, seed=seed)
    if method == "maic":
        return baselines.maic(cohort, cfg, match_variance=match_variance).fit
    if method == "unweighted":
        return baselines.unweighted_cox(cohort, cfg).fit
    if method == "fedeca" and n_centers > 1:
        return fit_fedeca(LocalFederation(split_cohort(cohort, n_centers, split, seed=seed)), cfg).fit
    # single-center run of the federated pipeline (pooled-equivalent)
    return fit_fedeca(LocalFederation([cohort]), dataclasses.replace(cfg, method=method)).fit


def power_replicate(task):
    cfg, value, rep = task
    seed = replication_seed(cfg.seed, rep)
    sim = cfg.sim_config(value, seed)
    cohort, _ = simulate(sim)
    k = int(value) if cfg.sweep_axis == "n_centers" else 1
    out = {}
    for entry in cfg.methods:
        method, variance = parse_method(entry)
        try:
            fit = fit_method(cohort, method, variance, seed, cfg.n_bootstrap, cfg.match_variance, k, cfg.split)
            out[entry] = fit.p_value
        except (DataError, ConvergenceError) as exc:
            logger.debug("replication %d failed for %s: %s", rep, entry, exc)
            out[entry] = None
    return out


def run_power_type1(cfg: ExperimentConfig):
    """Rejection rates at level 0.05 with normal-approximation bands."""
    rows = []
    hr = SimConfig(**cfg.sim).hazard_ratio
    for value in cfg.sweep:
        results = _map(power_replicate, [(cfg, value, rep) for rep in range(cfg.reps)], cfg.workers)
        for entry in cfg.methods:
            method, variance = parse_method(entry)
            ps = [r[entry] for r in results]
            ok = [p for p in ps if p is not None]
            failures = len(ps) - len(ok)
            if failures > FAILURE_CAP * len(ps):
                raise ConvergenceError(f"{entry} at {cfg.sweep_axis}={value}: {failures}/{len(ps)} replications failed")
            rejections = sum(p < ALPHA_LEVEL for p in ok)
            rate = rejections / len(ok) if ok else math.nan
            half = Z_975 * math.sqrt(rate * (1 - rate) / len(ok)) if ok else math.nan
            rows.append({
                "axis": cfg.sweep_axis, "value": value, "hazard_ratio": hr, "method": method, "variance": variance,
                "reps": len(ok), "failures": failures, "rejections": rejections, "rate": rate,
                "band_low": max(0.0, rate - half), "band_high": min(1.0, rate + half),
            })
    return rows


# ------------------------------------------------------------------ SMD curve

SMD_COLUMNS = ("shift", "method", "reps", "mean_abs_smd_before", "mean_abs_smd_after", "max_abs_smd_after")


def smd_replicate(task):
    cfg, shift, rep = task
    seed = replication_seed(cfg.seed, rep)
    cohort, _ = simulate(cfg.sim_config(shift, seed))
    X, a, _, _ = cohort.in_original_order()
    out = {}
    for entry in cfg.methods:
        method = entry.partition(":")[0]
        if method == "fedeca":
            fed = LocalFederation([cohort])
            fit_fedeca(fed, FitConfig(seed=seed))
            rep_smd = fed_smd(fed)
        elif method == "maic":
            mw = baselines.maic_weights(X[a == 0], baselines.AggregateTarget.from_arm(X[a == 1], cfg.match_variance))
            w = np.ones(len(a))
            w[a == 0] = mw.weights
            rep_smd = standardized_mean_differences(X, a, w)
        elif method == "unweighted":
            rep_smd = standardized_mean_differences(X, a)
        else:
            raise DataError(f"unknown SMD method {method!r}")
        out[method] = (np.abs(rep_smd.smd_before), np.abs(rep_smd.smd_after))
    return out


def run_smd_curve(cfg: ExperimentConfig):
    """Mean absolute SMD over covariates and replications, per shift and method."""
    if cfg.sweep_axis != "shift":
        raise DataError("the SMD curve sweeps the covariate shift")
    rows = []
    for shift in cfg.sweep:
        results = _map(smd_replicate, [(cfg, shift, rep) for rep in range(cfg.reps)], cfg.workers)
        for entry in cfg.methods:
            method = entry.partition(":")[0]
            before = np.concatenate([r[method][0] for r in results])
            after = np.concatenate([r[method][1] for r in results])
            rows.append({
                "shift": shift, "method": method, "reps": len(results),
                "mean_abs_smd_before": float(np.mean(before)),
                "mean_abs_smd_after": float(np.mean(after)),
                "max_abs_smd_after": float(np.max(after)),
            })
    return rows


def run_experiment(cfg: ExperimentConfig):
    """Dispatch on ``cfg.experiment``; returns ``(rows, columns)``."""
    if cfg.experiment == "equivalence":
        return run_equivalence(cfg), EQUIVALENCE_COLUMNS
    if cfg.experiment == "smd_curve":
        return run_smd_curve(cfg), SMD_COLUMNS
    return run_power_type1(cfg), POWER_COLUMNS
