"""Survival cohorts, event-time indexing and IPTW weights."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from fedeca.errors import CohortValidationError, DataError

ESTIMANDS = ("ate", "att", "atc")
DEFAULT_EPSILON = 1e-16


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PatientRecord:
    """One subject: covariates, treatment flag, observed time and event flag."""

    covariates: tuple
    treatment: int
    time: float
    event: int

    def __post_init__(self):
        if not (math.isfinite(self.time) and self.time > 0):
            raise CohortValidationError(f"nonpositive or non-finite time {self.time!r}")
        if self.treatment not in (0, 1):
            raise CohortValidationError("non-binary treatment")
        if self.event not in (0, 1):
            raise CohortValidationError("non-binary event")
        if not all(math.isfinite(x) for x in self.covariates):
            raise CohortValidationError("non-finite covariate")


@dataclass(frozen=True, eq=False)
class CenterCohort:
    """A center's patients, stored in canonical order.

    Canonical order sorts records by ``(time, event, original index)`` so that
    every reduction over the cohort happens in a fixed, permutation-invariant
    order. ``original_index[j]`` gives the input row of the j-th stored record,
    i.e. it is the canonical-order permutation.

    Use :meth:`from_arrays` rather than the constructor.
    """

    X: np.ndarray
    treated: np.ndarray
    time: np.ndarray
    event: np.ndarray
    original_index: np.ndarray
    center_id: int = 0
    covariate_names: tuple = field(default=())

    @classmethod
    def from_arrays(cls, X, treated, time, event, center_id=0, covariate_names=None):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        treated = np.asarray(treated)
        time = np.asarray(time, dtype=float)
        event = np.asarray(event)
        n = len(time)
        if n == 0:
            raise DataError("empty cohort")
        if X.shape[0] != n or len(treated) != n or len(event) != n:
            raise DataError("cohort arrays have inconsistent lengths")
        if not np.all(np.isfinite(X)):
            raise DataError("non-finite covariate value")
        if not np.all(np.isfinite(time)) or np.any(time <= 0):
            raise DataError("nonpositive or non-finite time")
        if not np.all(np.isin(treated, (0, 1))):
            raise DataError("non-binary treatment")
        if not np.all(np.isin(event, (0, 1))):
            raise DataError("non-binary event")
        order = np.lexsort((np.arange(n), event, time))
        if covariate_names is None:
            covariate_names = tuple(f"X_{j}" for j in range(X.shape[1]))
        return cls(
            X=_frozen(X[order]),
            treated=_frozen(treated[order], dtype=np.int64),
            time=_frozen(time[order]),
            event=_frozen(event[order], dtype=np.int64),
            original_index=_frozen(order, dtype=np.int64),
            center_id=int(center_id),
            covariate_names=tuple(covariate_names),
        )

    @property
    def n(self):
        return len(self.time)

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def canonical_order(self):
        return self.original_index

    @property
    def records(self):
        """Patient records in original input order."""
        inv = np.empty(self.n, dtype=np.int64)
        inv[self.original_index] = np.arange(self.n)
        return [
            PatientRecord(tuple(self.X[j]), int(self.treated[j]), float(self.time[j]), int(self.event[j]))
            for j in inv
        ]

    def in_original_order(self):
        """Return ``(X, treated, time, event)`` arrays in input order."""
        inv = np.empty(self.n, dtype=np.int64)
        inv[self.original_index] = np.arange(self.n)
        return self.X[inv], self.treated[inv], self.time[inv], self.event[inv]

    def take(self, positions, center_id=None):
        """Sub-cohort (possibly with repeats) from canonical positions.

        The new cohort's original index refers to the order of ``positions``.
        """
        positions = np.asarray(positions, dtype=np.int64)
        return CenterCohort.from_arrays(
            self.X[positions],
            self.treated[positions],
            self.time[positions],
            self.event[positions],
            center_id=self.center_id if center_id is None else center_id,
            covariate_names=self.covariate_names,
        )

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord], center_id=0):
        if not records:
            raise DataError("empty cohort")
        p = {len(r.covariates) for r in records}
        if len(p) != 1:
            raise DataError("records do not share one covariate dimension")
        return cls.from_arrays(
            [r.covariates for r in records],
            [r.treatment for r in records],
            [r.time for r in records],
            [r.event for r in records],
            center_id=center_id,
        )


@dataclass(frozen=True)
class EventIndex:
    """Distinct event times with their death and risk sets.

    Indices are canonical positions in the cohort. Because the cohort is
    sorted by time, every risk set is the suffix starting at ``risk_start``.
    """

    distinct_event_times: np.ndarray
    death_sets: tuple
    risk_start: np.ndarray
    n: int

    @property
    def risk_sets(self):
        return tuple(np.arange(s, self.n) for s in self.risk_start)


def build_event_index(cohort: CenterCohort) -> EventIndex:
    """Index the distinct event times of a cohort.

    Tied deaths share one death set (Breslow pooling); a patient censored at
    an event time stays in that time's risk set.
    """
    ev = cohort.event == 1
    times = np.unique(cohort.time[ev])
    deaths = tuple(np.flatnonzero(ev & (cohort.time == s)) for s in times)
    start = np.searchsorted(cohort.time, times, side="left")
    return EventIndex(_frozen(times), deaths, _frozen(start, dtype=np.int64), cohort.n)


@dataclass(frozen=True, eq=False)
class WeightVector:
    weights: np.ndarray
    estimand: str
    epsilon: float

    def __len__(self):
        return len(self.weights)


def compute_weights(scores, treatment, estimand="ate", epsilon=DEFAULT_EPSILON) -> WeightVector:
    """Inverse probability of treatment weights from propensity scores.

    Parameters
    ----------
    scores : array_like
        Propensity scores, strictly inside (0, 1).
    treatment : array_like
        Binary treatment flags.
    estimand : {"ate", "att", "atc"}
    epsilon : float
        Clipping floor applied to every denominator.
    """
    scores = np.asarray(scores, dtype=float)
    treatment = np.asarray(treatment)
    if scores.shape != treatment.shape:
        raise DataError("scores and treatment have different lengths")
    if epsilon <= 0:
        raise DataError("epsilon must be positive")
    if not np.all(np.isfinite(scores)) or np.any(scores <= 0) or np.any(scores >= 1):
        raise DataError("propensity scores must lie in (0, 1)")
    estimand = estimand.lower()
    treated = treatment == 1
    if estimand == "ate":
        w = np.where(treated, 1.0 / np.maximum(scores, epsilon), 1.0 / np.maximum(1.0 - scores, epsilon))
    elif estimand == "att":
        w = np.where(treated, 1.0, scores / np.maximum(1.0 - scores, epsilon))
    elif estimand == "atc":
        w = np.where(treated, (1.0 - scores) / np.maximum(scores, epsilon), 1.0)
    else:
        raise DataError(f"unknown estimand {estimand!r}")
    return WeightVector(_frozen(w), estimand, float(epsilon))


def validate_cohort(rows: Iterable[Sequence[str]], header: Sequence[str], center_id=0) -> CenterCohort:
    """Validate raw CSV rows against the cohort contract.

    The header must read ``X_0,...,X_{p-1},treated,T,E``. Row numbers in error
    messages are 1-based and exclude the header.
    """
    header = [h.strip() for h in header]
    if header[-3:] != ["treated", "T", "E"]:
        raise CohortValidationError("header must end with treated,T,E", row=0)
    cov_names = header[:-3]
    p = len(cov_names)
    X, a, t, e = [], [], [], []
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise CohortValidationError(
                f"row {r} has {len(row)} fields, expected {len(header)}", row=r
            )
        vals = []
        for col, raw in zip(header, row):
            try:
                v = float(raw)
            except ValueError:
                raise CohortValidationError(f"unparseable value {raw!r} in column {col} at row {r}", r, col) from None
            if not math.isfinite(v):
                raise CohortValidationError(f"non-finite value in column {col} at row {r}", r, col)
            vals.append(v)
        if vals[p] not in (0.0, 1.0):
            raise CohortValidationError(f"non-binary treatment at row {r}", r, "treated")
        if vals[p + 1] <= 0:
            raise CohortValidationError(f"nonpositive time at row {r}", r, "T")
        if vals[p + 2] not in (0.0, 1.0):
            raise CohortValidationError(f"non-binary event at row {r}", r, "E")
        X.append(vals[:p])
        a.append(int(vals[p]))
        t.append(vals[p + 1])
        e.append(int(vals[p + 2]))
    if not t:
        raise CohortValidationError("cohort has no rows", row=0)
    return CenterCohort.from_arrays(
        np.array(X, dtype=float).reshape(len(t), p), a, t, e, center_id=center_id, covariate_names=cov_names
    )


def read_cohort_csv(path, center_id=0) -> CenterCohort:
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortValidationError(f"{path}: empty file", row=0) from None
        return validate_cohort(reader, header, center_id=center_id)


def write_cohort_csv(cohort: CenterCohort, path):
    """Write in original row order with round-trip exact floats."""
    X, a, t, e = cohort.in_original_order()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(cohort.covariate_names) + ["treated", "T", "E"])
        for i in range(cohort.n):
            w.writerow([repr(float(x)) for x in X[i]] + [int(a[i]), repr(float(t[i])), int(e[i])])
