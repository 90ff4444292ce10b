"""Centers, aggregator-side backends and cohort splitting.

A :class:`Center` owns one cohort and answers aggregator requests. Each
request addresses one or more *jobs*: job 0 is the center's own data, bootstrap
replicates live under their replicate id, so all replicates of a round travel
in a single envelope.

Backends expose one primitive, :meth:`Federation.exchange`: broadcast a
request, let every center compute, then collect the replies in ascending
center id order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from fedeca import analytics
from fedeca.cox import local_cox_stats, local_event_times
from fedeca.data import CenterCohort, compute_weights
from fedeca.errors import DataError, FedecaError, ProtocolError, error_from_kind
from fedeca.federation.protocol import (
    RoundEnvelope,
    Schema,
    decode,
    encode,
)
from fedeca.propensity import design_matrix, local_logistic_grad_hess, predict_propensity
from fedeca.variance import local_robust_share

SPLIT_STRATEGIES = ("eca", "uniform", "by-column")


@dataclass(eq=False)
class _View:
    cohort: CenterCohort
    weights: np.ndarray | None = None
    z: np.ndarray | None = None
    times: np.ndarray | None = None


def _job_error(exc):
    return {"error": type(exc).__name__, "message": str(exc)}


class Center:
    """Center-side node: holds private data, answers with aggregates only."""

    def __init__(self, cohort: CenterCohort, center_id: int | None = None):
        self.center_id = cohort.center_id if center_id is None else center_id
        self.cohort = cohort
        self.views = {0: _View(cohort)}
        self.last_round = -1

    # --------------------------------------------------------------- dispatch

    def handle_frame(self, frame: bytes) -> bytes:
        """Decode a request frame, answer it, encode the reply (errors included)."""
        try:
            env = decode(frame)
            if env.round_index <= self.last_round:
                raise ProtocolError(
                    f"round index {env.round_index} not increasing (last {self.last_round})"
                )
            self.last_round = env.round_index
            schema, payload = self.handle(env.schema, env.payload)
        except FedecaError as exc:
            schema, payload = Schema.ERROR, _job_error(exc)
            env = RoundEnvelope(Schema.ERROR, round_index=max(self.last_round, 0))
        return encode(RoundEnvelope(schema, payload, env.round_index))

    def handle(self, schema, payload):
        handler = _HANDLERS.get(Schema(schema))
        if handler is None:
            raise ProtocolError(f"center cannot handle schema {Schema(schema).name}")
        return handler(self, payload or {})

    def _view(self, job):
        try:
            return self.views[int(job)]
        except KeyError:
            raise ProtocolError(f"center {self.center_id}: unknown job {job}") from None

    # --------------------------------------------------------------- handlers

    def _hello(self, payload):
        return Schema.HELLO, {"role": "center", "center_id": self.center_id, "p": self.cohort.p}

    def _keys(self, payload):
        c = self.cohort
        return Schema.TIMES_SHARE, {"time": np.array(c.time), "event": np.array(c.event)}

    def _bootstrap_plan(self, payload):
        counts = []
        for job, idx in zip(payload["jobs"], payload["indices"]):
            job = int(job)
            if job == 0:
                raise ProtocolError("job 0 is reserved for the center's own data")
            idx = np.asarray(idx, dtype=np.int64)
            if len(idx):
                if idx.min() < 0 or idx.max() >= self.cohort.n:
                    raise ProtocolError("bootstrap index out of range")
                view = self.cohort.take(idx)
                self.views[job] = _View(view)
                counts.append([view.n, int(view.treated.sum()), int(view.event.sum())])
            else:
                self.views.pop(job, None)
                counts.append([0, 0, 0])
        return Schema.ACK, {"counts": np.array(counts, dtype=np.int64).reshape(-1, 3)}

    def _drop(self, payload):
        for job in payload["jobs"]:
            if int(job) != 0:
                self.views.pop(int(job), None)
        return Schema.ACK, {}

    def _present(self, job):
        return int(job) in self.views

    def _covariate_moments(self, payload):
        out = []
        for job in payload["jobs"]:
            if not self._present(job):
                out.append({"n": 0.0, "sx": np.zeros(self.cohort.p), "sxx": np.zeros(self.cohort.p)})
                continue
            X = self._view(job).cohort.X
            out.append({"n": float(len(X)), "sx": X.sum(axis=0), "sxx": (X * X).sum(axis=0)})
        return Schema.MOMENT_SHARE, {"shares": out}

    def _propensity(self, payload):
        intercept = bool(payload.get("intercept", False))
        shift, scale = payload.get("shift"), payload.get("scale")

        def one(i, view):
            c = view.cohort
            D = design_matrix(c.X, intercept, None if shift is None else shift[i], None if scale is None else scale[i])
            nll, g, H = local_logistic_grad_hess(payload["theta"][i], D, c.treated.astype(float))
            return {"nll": nll, "g": g, "H": H, "n": c.n, "n_treated": int(c.treated.sum())}

        return Schema.PROPENSITY_SHARE, {"shares": self._per_job_optional(payload, one, self._empty_propensity(payload))}

    def _empty_propensity(self, payload):
        d = np.asarray(payload["theta"]).shape[1]
        return {"nll": 0.0, "g": np.zeros(d), "H": np.zeros((d, d)), "n": 0, "n_treated": 0}

    def _per_job_optional(self, payload, fn, empty):
        # bootstrap replicates may draw no patient from this center
        out = []
        for i, job in enumerate(payload["jobs"]):
            if not self._present(job):
                out.append(empty)
                continue
            try:
                out.append(fn(i, self._view(job)))
            except (DataError, np.linalg.LinAlgError) as exc:
                out.append(_job_error(exc))
        return out

    def _set_weights(self, payload):
        weighting = payload.get("weighting", "iptw")
        cov = np.asarray(payload.get("cox_covariates", np.zeros(0, dtype=np.int64)), dtype=np.int64)
        intercept = bool(payload.get("intercept", False))
        shift, scale = payload.get("shift"), payload.get("scale")

        def one(i, view):
            c = view.cohort
            if weighting == "unit":
                view.weights = np.ones(c.n)
            else:
                scores = predict_propensity(
                    payload["theta"][i], c.X, intercept,
                    None if shift is None else shift[i], None if scale is None else scale[i],
                )
                view.weights = np.array(
                    compute_weights(scores, c.treated, payload["estimand"], payload["epsilon"]).weights
                )
            view.z = np.column_stack([c.treated.astype(float), c.X[:, cov]])
            return {"ok": True}

        return Schema.ACK, {"status": self._per_job_optional(payload, one, {"ok": True})}

    def _event_times(self, payload):
        out = []
        for job in payload["jobs"]:
            if not self._present(job):
                out.append(np.zeros(0))
            else:
                c = self._view(job).cohort
                out.append(local_event_times(c.time, c.event))
        return Schema.TIMES_SHARE, {"times": out}

    def _set_times(self, payload):
        for job, times in zip(payload["jobs"], payload["times"]):
            if self._present(job):
                self._view(job).times = np.asarray(times, dtype=float)
        return Schema.ACK, {}

    def _cox(self, payload):
        beta = payload["beta"]

        def one(i, view):
            if view.weights is None or view.times is None:
                raise ProtocolError("Cox round before weights and event times were set")
            c = view.cohort
            return local_cox_stats(beta[i], view.z, c.time, c.event, view.weights, view.times).as_payload()

        empty = None
        out = []
        for i, job in enumerate(payload["jobs"]):
            if not self._present(job):
                out.append(empty)
                continue
            try:
                out.append(one(i, self._view(job)))
            except DataError as exc:
                out.append(_job_error(exc))
        return Schema.COX_SHARE, {"shares": out}

    def _robust(self, payload):
        def one(i, view):
            c = view.cohort
            return local_robust_share(
                payload["beta"][i], payload["H"][i], view.z, c.time, c.event, view.weights,
                view.times, payload["W"][i], payload["zeta0"][i], payload["zeta1"][i],
            )

        shares = []
        for i, job in enumerate(payload["jobs"]):
            shares.append(one(i, self._view(job)) if self._present(job) else None)
        return Schema.ROBUST_SHARE, {"M": shares}

    def _km(self, payload):
        view = self._view(payload.get("job", 0))
        c = view.cohort
        arm = payload.get("arm")
        mask = np.ones(c.n, dtype=bool) if arm is None or arm < 0 else c.treated == arm
        weights = view.weights if payload.get("weighted", True) and view.weights is not None else np.ones(c.n)
        if payload["stage"] == "times":
            return Schema.TIMES_SHARE, {"times": local_event_times(c.time[mask], c.event[mask]), "n": int(mask.sum())}
        grid = np.asarray(payload["grid"], dtype=float)
        deaths, risks = analytics.km_local_share(c.time[mask], c.event[mask], weights[mask], grid)
        dv, dl = analytics.pack_partials(deaths)
        rv, rl = analytics.pack_partials(risks)
        return Schema.KM_SHARE, {"death_values": dv, "death_lengths": dl, "risk_values": rv, "risk_lengths": rl}

    def _moments(self, payload):
        view = self._view(payload.get("job", 0))
        c = view.cohort
        weights = view.weights if payload.get("weighted", True) and view.weights is not None else np.ones(c.n)
        share = analytics.moment_local_share(c.X, c.treated, weights)
        out = {}
        for arm, d in share.items():
            out[str(arm)] = {k: dict(zip(("values", "lengths"), analytics.pack_partials(v))) for k, v in d.items()}
        return Schema.MOMENT_SHARE, out


_HANDLERS = {
    Schema.HELLO: Center._hello,
    Schema.KEYS: Center._keys,
    Schema.BOOTSTRAP_PLAN: Center._bootstrap_plan,
    Schema.DROP: Center._drop,
    Schema.COVARIATE_MOMENTS: Center._covariate_moments,
    Schema.PROPENSITY: Center._propensity,
    Schema.SET_WEIGHTS: Center._set_weights,
    Schema.EVENT_TIMES: Center._event_times,
    Schema.SET_TIMES: Center._set_times,
    Schema.COX: Center._cox,
    Schema.ROBUST: Center._robust,
    Schema.KM: Center._km,
    Schema.MOMENTS: Center._moments,
}


# ------------------------------------------------------------------ backends


@dataclass
class RoundLog:
    round_index: int
    schema: str
    bytes_out: int = 0
    bytes_in: int = 0


class Federation:
    """Aggregator view of K centers. Subclasses implement :meth:`_roundtrip`."""

    backend = "abstract"

    def __init__(self, n_centers):
        if n_centers < 1:
            raise DataError("a federation needs at least one center")
        self.n_centers = n_centers
        self.round_index = 0
        self.rounds: list[RoundLog] = []
        self.transcript: list[tuple[str, int, bytes]] | None = None

    def exchange(self, schema, payload=None, per_center=None):
        """One round: broadcast, local computation, barrier; replies by center id.

        ``per_center`` (a list of payloads) overrides ``payload`` for requests
        whose content differs between centers.
        """
        self.round_index += 1
        log = RoundLog(self.round_index, Schema(schema).name)
        payloads = per_center if per_center is not None else [payload] * self.n_centers
        replies = self._roundtrip(Schema(schema), payloads, log)
        self.rounds.append(log)
        out = []
        for k, env in enumerate(replies):
            if env.schema == Schema.ERROR:
                p = env.payload or {}
                raise error_from_kind(p.get("error", "FedecaError"), f"center {k}: {p.get('message', '')}")
            out.append(env.payload)
        return out

    def _roundtrip(self, schema, payloads, log):
        raise NotImplementedError

    def _record(self, direction, k, frame):
        if self.transcript is not None:
            self.transcript.append((direction, k, frame))

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SimuFederation(Federation):
    """In-process centers; every message still goes through the wire codec."""

    backend = "simu"

    def __init__(self, cohorts, record=False):
        centers = [c if isinstance(c, Center) else Center(c, center_id=k) for k, c in enumerate(cohorts)]
        super().__init__(len(centers))
        self.centers = centers
        if record:
            self.transcript = []

    def _roundtrip(self, schema, payloads, log):
        replies = []
        for k, (center, payload) in enumerate(zip(self.centers, payloads)):
            frame = encode(RoundEnvelope(schema, payload, self.round_index))
            self._record("Q", k, frame)
            reply = center.handle_frame(frame)
            self._record("R", k, reply)
            log.bytes_out += len(frame)
            log.bytes_in += len(reply)
            replies.append(decode(reply))
        return replies


class LocalFederation(Federation):
    """Direct calls without encoding: the fast single-process path."""

    backend = "local"

    def __init__(self, cohorts):
        centers = [c if isinstance(c, Center) else Center(c, center_id=k) for k, c in enumerate(cohorts)]
        super().__init__(len(centers))
        self.centers = centers

    def _roundtrip(self, schema, payloads, log):
        replies = []
        for center, payload in zip(self.centers, payloads):
            try:
                s, p = center.handle(schema, payload)
            except FedecaError as exc:
                s, p = Schema.ERROR, _job_error(exc)
            replies.append(RoundEnvelope(s, p, self.round_index))
        return replies


class ReplayFederation(Federation):
    """Replays a recorded transcript; diverging requests raise ProtocolError."""

    backend = "replay"

    def __init__(self, transcript, n_centers):
        super().__init__(n_centers)
        self._records = list(transcript)
        self._pos = 0

    def _next(self, direction, k):
        if self._pos >= len(self._records):
            raise ProtocolError("transcript exhausted")
        d, kk, frame = self._records[self._pos]
        if d != direction or kk != k:
            raise ProtocolError("transcript out of order")
        self._pos += 1
        return frame

    def _roundtrip(self, schema, payloads, log):
        replies = []
        for k, payload in enumerate(payloads):
            frame = encode(RoundEnvelope(schema, payload, self.round_index))
            if self._next("Q", k) != frame:
                raise ProtocolError(f"replay diverged at round {self.round_index}, center {k}")
            replies.append(decode(self._next("R", k)))
        return replies


def write_transcript(records, path):
    with open(path, "wb") as fh:
        for direction, k, frame in records:
            fh.write(direction.encode("ascii") + struct.pack(">H", k) + frame)


def read_transcript(path):
    data = open(path, "rb").read()
    out, pos = [], 0
    while pos < len(data):
        if pos + 7 > len(data):
            raise ProtocolError("truncated transcript")
        direction = data[pos:pos + 1].decode("ascii")
        (k,) = struct.unpack(">H", data[pos + 1:pos + 3])
        (length,) = struct.unpack(">I", data[pos + 3:pos + 7])
        end = pos + 7 + length
        if end > len(data):
            raise ProtocolError("truncated transcript")
        out.append((direction, k, data[pos + 3:end]))
        pos = end
    return out


# ------------------------------------------------------------------ splitting


def split_cohort(cohort: CenterCohort, n_centers: int, strategy="eca", seed=0, column=None):
    """Partition a pooled cohort into centers.

    ``eca`` puts every treated patient in center 0 and deals shuffled controls
    round-robin over centers 1..K-1; ``uniform`` shuffles and cuts K nearly
    equal chunks; ``by-column`` maps the K distinct values of covariate
    ``column`` (sorted) to centers. Each center keeps rows in original order.
    """
    X, a, t, e = cohort.in_original_order()
    n = cohort.n
    if n_centers < 1 or n_centers > n:
        raise DataError(f"cannot split {n} patients into {n_centers} centers")
    rng = np.random.default_rng(seed)
    if strategy == "eca":
        treated = np.flatnonzero(a == 1)
        controls = np.flatnonzero(a == 0)
        if n_centers == 1:
            groups = [np.arange(n)]
        else:
            if n_centers > len(controls) + 1:
                raise DataError(f"eca split: {n_centers} centers exceed control count + 1 ({len(controls) + 1})")
            controls = rng.permutation(controls)
            groups = [treated] + [np.sort(controls[k::n_centers - 1]) for k in range(n_centers - 1)]
    elif strategy == "uniform":
        perm = rng.permutation(n)
        groups = [np.sort(g) for g in np.array_split(perm, n_centers)]
    elif strategy == "by-column":
        if column is None:
            raise DataError("by-column split needs a column")
        j = cohort.covariate_names.index(column) if isinstance(column, str) else int(column)
        values = np.unique(X[:, j])
        if len(values) != n_centers:
            raise DataError(f"column has {len(values)} distinct values, expected {n_centers}")
        groups = [np.flatnonzero(X[:, j] == v) for v in values]
    else:
        raise DataError(f"unknown split strategy {strategy!r}")
    out = []
    for k, g in enumerate(groups):
        if len(g) == 0:
            raise DataError(f"split produced an empty center {k}")
        out.append(CenterCohort.from_arrays(X[g], a[g], t[g], e[g], center_id=k, covariate_names=cohort.covariate_names))
    return out
