"""Cox-Weibull cohorts with covariate-dependent treatment allocation.

Random streams
--------------
All draws come from numpy's PCG64 generator. A configuration seed ``s`` is
expanded with ``SeedSequence(s)`` and one child stream is spawned per model
component, in this fixed order::

    0 outcome coefficients   1 covariates   2 allocation coefficients
    3 treatment draws        4 event times  5 censoring times

so changing, say, the dropout rate leaves covariates and allocation untouched.
Replication ``r`` of an experiment uses ``SeedSequence(master, spawn_key=(r,))``
(counter-mode derivation, no state shared between replications).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import toeplitz
from scipy.special import expit

from fedeca.data import CenterCohort, DataError

_STREAMS = ("beta", "covariates", "alpha", "treatment", "events", "censoring")


@dataclass(frozen=True)
class SimConfig:
    n: int = 1000
    p: int = 10
    rho: float = 0.5
    shift: float = 0.0
    hazard_ratio: float = 1.0
    shape: float = 2.0
    dropout: float = 0.1
    seed: int = 42

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise DataError("n and p must be positive")
        if not 0 <= self.rho < 1:
            raise DataError("rho must lie in [0, 1)")
        if self.shift < 0 or self.hazard_ratio <= 0 or self.shape <= 0 or self.dropout < 0:
            raise DataError("invalid simulation parameters")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    beta: np.ndarray
    alpha: np.ndarray
    propensity: np.ndarray

    def to_dict(self):
        return {
            "beta": self.beta.tolist(),
            "alpha": self.alpha.tolist(),
            "propensity": self.propensity.tolist(),
        }


def streams(seed):
    ss = np.random.SeedSequence(seed)
    return dict(zip(_STREAMS, (np.random.Generator(np.random.PCG64(c)) for c in ss.spawn(len(_STREAMS)))))


def replication_seed(master_seed, rep):
    """Counter-mode seed for replication ``rep``; independent of other reps."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(int(rep),))
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def toeplitz_covariance(p, rho):
    return toeplitz(rho ** np.arange(p))


def toeplitz_gaussian_covariates(n, p, rho, rng):
    """Rows i.i.d. N(0, Sigma) with Sigma_ij = rho^|i-j| via a Cholesky factor."""
    if not 0 <= rho < 1:
        raise DataError("rho must lie in [0, 1)")
    chol = np.linalg.cholesky(toeplitz_covariance(p, rho))
    return rng.standard_normal((n, p)) @ chol.T


def assign_treatment(X, shift, rng, alloc_rng=None):
    """Logistic allocation with coefficients ~ p^(-1/2) U(-shift, shift).

    Returns ``(treated, alpha, q)``. ``alloc_rng`` draws the Bernoulli
    treatments; it defaults to ``rng``.
    """
    if shift < 0:
        raise DataError("shift must be nonnegative")
    p = X.shape[1]
    alpha = rng.uniform(-shift, shift, size=p) / np.sqrt(p)
    q = expit(X @ alpha)
    treated = ((alloc_rng or rng).random(len(q)) < q).astype(np.int64)
    return treated, alpha, q


def draw_outcomes(X, treated, beta, mu, nu, dropout, rng, cens_rng=None):
    """Weibull proportional-hazards times with exponential censoring.

    Survival is ``S(t) = exp(-h t^nu)`` with ``h = mu^a exp(beta'x)``, i.e.
    Weibull scale ``h^(-1/nu)``. ``dropout`` is the censoring rate (mean
    ``1/dropout``); zero disables censoring.
    """
    h = mu ** np.asarray(treated, dtype=float) * np.exp(X @ beta)
    e = rng.standard_exponential(len(h))
    e = np.where(e > 0, e, np.finfo(float).tiny)
    t_star = (e / h) ** (1.0 / nu)
    t_star = np.maximum(t_star, np.finfo(float).tiny)
    if dropout > 0:
        c = (cens_rng or rng).exponential(1.0 / dropout, size=len(h))
        c = np.maximum(c, np.finfo(float).tiny)
    else:
        c = np.full(len(h), np.inf)
    event = (t_star <= c).astype(np.int64)
    return np.minimum(t_star, c), event


def simulate(config: SimConfig):
    """Draw one cohort; returns ``(CenterCohort, GroundTruth)``."""
    rng = streams(config.seed)
    beta = rng["beta"].standard_normal(config.p)
    X = toeplitz_gaussian_covariates(config.n, config.p, config.rho, rng["covariates"])
    treated, alpha, q = assign_treatment(X, config.shift, rng["alpha"], rng["treatment"])
    time, event = draw_outcomes(
        X, treated, beta, config.hazard_ratio, config.shape, config.dropout, rng["events"], rng["censoring"]
    )
    cohort = CenterCohort.from_arrays(X, treated, time, event)
    return cohort, GroundTruth(beta, alpha, q)
