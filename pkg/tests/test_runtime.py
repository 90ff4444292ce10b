import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedeca.data import CenterCohort
from fedeca.errors import DataError, ProtocolError
from fedeca.federation.protocol import RoundEnvelope, Schema, decode, encode
from fedeca.federation.runtime import (
    Center,
    LocalFederation,
    ReplayFederation,
    SimuFederation,
    read_transcript,
    split_cohort,
    write_transcript,
)
from fedeca.pipeline import FitConfig, fit_fedeca, report_json
from fedeca.simulate import SimConfig, simulate

from conftest import random_cohort


def _cohort(n_treated, n_control, p=2, seed=0):
    rng = np.random.default_rng(seed)
    n = n_treated + n_control
    return CenterCohort.from_arrays(
        rng.standard_normal((n, p)), [1] * n_treated + [0] * n_control, rng.exponential(size=n) + 0.01,
        rng.integers(0, 2, n),
    )


def _rows(cohort):
    X, a, t, e = cohort.in_original_order()
    return sorted(zip(map(tuple, X), a, t, e))


# --------------------------------------------------------------- splitting


def test_eca_split_example():
    centers = split_cohort(_cohort(3, 5), 2, "eca")
    assert centers[0].n == 3 and np.all(centers[0].treated == 1)
    assert centers[1].n == 5 and np.all(centers[1].treated == 0)


def test_uniform_split_sizes():
    assert [c.n for c in split_cohort(_cohort(4, 4), 4, "uniform")] == [2, 2, 2, 2]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 6), st.sampled_from(["eca", "uniform"]))
def test_split_is_a_partition(seed, k, strategy):
    cohort = random_cohort(np.random.default_rng(seed), n=30)
    centers = split_cohort(cohort, k, strategy, seed=seed)
    assert [c.center_id for c in centers] == list(range(k))
    pooled = sorted(r for c in centers for r in _rows(c))
    assert pooled == _rows(cohort)
    if strategy == "eca" and k > 1:
        assert sum(c.treated.sum() for c in centers[1:]) == 0
        assert np.all(centers[0].treated == 1)


def test_split_deterministic():
    cohort = random_cohort(np.random.default_rng(1), n=40)
    a = split_cohort(cohort, 3, "uniform", seed=5)
    b = split_cohort(cohort, 3, "uniform", seed=5)
    assert all(_rows(x) == _rows(y) for x, y in zip(a, b))


def test_split_by_column():
    X = np.array([[0.0, 1.0], [1.0, 2.0], [0.0, 3.0], [2.0, 4.0]])
    cohort = CenterCohort.from_arrays(X, [1, 0, 0, 1], [1.0, 2.0, 3.0, 4.0], [1, 1, 0, 1])
    centers = split_cohort(cohort, 3, "by-column", column=0)
    assert [c.n for c in centers] == [2, 1, 1]
    assert np.all(centers[0].X[:, 0] == 0.0)
    with pytest.raises(DataError, match="distinct values"):
        split_cohort(cohort, 2, "by-column", column=0)
    with pytest.raises(DataError, match="needs a column"):
        split_cohort(cohort, 3, "by-column")


def test_split_errors():
    cohort = _cohort(3, 2)
    with pytest.raises(DataError, match="exceed control count"):
        split_cohort(cohort, 4, "eca")
    with pytest.raises(DataError, match="cannot split"):
        split_cohort(cohort, 6, "uniform")
    with pytest.raises(DataError, match="unknown split strategy"):
        split_cohort(cohort, 2, "random")
    with pytest.raises(DataError, match="empty center"):
        split_cohort(_cohort(0, 3), 2, "eca")


# ------------------------------------------------------------------ rounds


def test_replies_reduced_in_center_order():
    cohorts = [random_cohort(np.random.default_rng(k), n=10 + k, center_id=k) for k in range(3)]
    fed = SimuFederation(cohorts)
    hello = fed.exchange(Schema.HELLO)
    assert [h["center_id"] for h in hello] == [0, 1, 2]
    assert fed.round_index == 1 and fed.rounds[0].schema == "HELLO"
    assert fed.rounds[0].bytes_in > 0 and fed.rounds[0].bytes_out > 0


def test_single_center_equals_pooled():
    cohort, _ = simulate(SimConfig(n=150, p=3, shift=1.0, seed=2))
    a = fit_fedeca(SimuFederation([cohort]), FitConfig(variance="robust"))
    b = fit_fedeca(LocalFederation([cohort]), FitConfig(variance="robust"))
    assert report_json(a.report()) == report_json(b.report())


def test_simu_and_local_bitwise():
    cohort, _ = simulate(SimConfig(n=200, p=4, shift=1.0, hazard_ratio=0.7, seed=3))
    centers = split_cohort(cohort, 3, "eca", seed=1)
    cfg = FitConfig(variance="robust", extra_variances=("bootstrap",), n_bootstrap=5)
    a = fit_fedeca(SimuFederation(centers), cfg)
    b = fit_fedeca(LocalFederation(centers), cfg)
    assert report_json(a.report()) == report_json(b.report())
    np.testing.assert_array_equal(a.bootstrap_betas, b.bootstrap_betas)


def test_center_rejects_stale_round():
    center = Center(random_cohort(np.random.default_rng(0)))
    decode(center.handle_frame(encode(RoundEnvelope(Schema.HELLO, {}, 3))))
    env = decode(center.handle_frame(encode(RoundEnvelope(Schema.HELLO, {}, 3))))
    assert env.schema == Schema.ERROR
    assert "not increasing" in env.payload["message"]


def test_center_error_raised_with_center_id():
    good = random_cohort(np.random.default_rng(0), center_id=0)
    fed = SimuFederation([good, random_cohort(np.random.default_rng(1), center_id=1)])
    with pytest.raises(ProtocolError, match="center 0: .*unknown job 7"):
        fed.exchange(Schema.KM, {"job": 7, "stage": "times"})


def test_center_rejects_unhandled_schema():
    fed = SimuFederation([random_cohort(np.random.default_rng(0))])
    with pytest.raises(ProtocolError, match="cannot handle"):
        fed.exchange(Schema.FIT_REPORT, {})


def test_bootstrap_plan_bounds():
    fed = SimuFederation([random_cohort(np.random.default_rng(0), n=10)])
    with pytest.raises(ProtocolError, match="out of range"):
        fed.exchange(Schema.BOOTSTRAP_PLAN, {"jobs": np.array([1]), "indices": [np.array([10])]})
    with pytest.raises(ProtocolError, match="reserved"):
        fed.exchange(Schema.BOOTSTRAP_PLAN, {"jobs": np.array([0]), "indices": [np.array([1])]})


def test_empty_federation_rejected():
    with pytest.raises(DataError):
        SimuFederation([])


def test_cox_round_bytes_independent_of_n():
    # integer times keep the event grid fixed while n grows
    sizes = []
    for n in (60, 600):
        rng = np.random.default_rng(n)
        X = rng.standard_normal((n, 2))
        a = np.tile([0, 1], n // 2)
        t = rng.integers(1, 6, n).astype(float)
        e = np.ones(n, dtype=int)
        cohort = CenterCohort.from_arrays(X, a, t, e)
        fed = SimuFederation(split_cohort(cohort, 3, "uniform", seed=0))
        fit_fedeca(fed, FitConfig(weighting="unit"))
        cox = [r for r in fed.rounds if r.schema == "COX"]
        sizes.append((cox[0].bytes_in, cox[0].bytes_out))
    assert sizes[0] == sizes[1]


# ------------------------------------------------------------- transcripts


def test_transcript_replay_reproduces_fit(tmp_path):
    cohort, _ = simulate(SimConfig(n=120, p=3, shift=1.0, seed=4))
    centers = split_cohort(cohort, 3, "uniform", seed=0)
    cfg = FitConfig(variance="robust")
    fed = SimuFederation(centers, record=True)
    ref = report_json(fit_fedeca(fed, cfg).report())
    path = tmp_path / "session.bin"
    write_transcript(fed.transcript, path)
    records = read_transcript(path)
    assert records == fed.transcript
    assert report_json(fit_fedeca(ReplayFederation(records, 3), cfg).report()) == ref


def test_transcript_replay_detects_divergence(tmp_path):
    cohort, _ = simulate(SimConfig(n=120, p=3, shift=1.0, seed=4))
    fed = SimuFederation(split_cohort(cohort, 2, "uniform", seed=0), record=True)
    fit_fedeca(fed, FitConfig())
    with pytest.raises(ProtocolError, match="diverged"):
        fit_fedeca(ReplayFederation(fed.transcript, 2), FitConfig(estimand="att"))


def test_truncated_transcript(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"Q\x00\x00\x00\x00\x00\x09abc")
    with pytest.raises(ProtocolError, match="truncated transcript"):
        read_transcript(path)
