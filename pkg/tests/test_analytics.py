import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedeca.analytics import (
    exact_partials,
    km_from_masses,
    km_local_share,
    merge_totals,
    pack_partials,
    smd_from_moments,
    standardized_mean_differences,
    unpack_partials,
    weighted_kaplan_meier,
)
from fedeca.data import CenterCohort, compute_weights
from fedeca.errors import DataError
from fedeca.federation.runtime import LocalFederation, SimuFederation, split_cohort
from fedeca.pipeline import FitConfig, apply_report_weights, fed_kaplan_meier, fed_smd, fit_fedeca
from fedeca.propensity import predict_propensity
from fedeca.simulate import SimConfig, simulate

from conftest import random_cohort


def km_oracle(time, event, weights):
    """Product-limit survival and Greenwood sums with plain loops."""
    grid = sorted(set(t for t, e in zip(time, event) if e == 1))
    s, g, out = 1.0, 0.0, []
    for u in grid:
        d = sum(w for t, e, w in zip(time, event, weights) if t == u and e == 1)
        r = sum(w for t, w in zip(time, weights) if t >= u)
        s *= 1 - d / r
        if r > d:
            g += d / (r * (r - d))
        out.append((u, s, g))
    return out


# ----------------------------------------------------------- exact sums


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), max_size=60))
def test_exact_partials_round_to_fsum(values):
    assert math.fsum(exact_partials(values)) == math.fsum(values)


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=60), st.integers(1, 5), st.randoms())
def test_partials_merge_any_split(values, k, rnd):
    labels = [rnd.randrange(k) for _ in values]
    per_center = [[exact_partials([v for v, c in zip(values, labels) if c == j])] for j in range(k)]
    assert merge_totals(per_center)[0] == math.fsum(values)


def test_pack_roundtrip():
    lists = [[1.0, 1e-20], [], [3.0]]
    values, lengths = pack_partials(lists)
    assert unpack_partials(values, lengths) == lists


def test_cancellation_is_exact():
    assert math.fsum(exact_partials([1e16, 1.0, -1e16])) == 1.0


# --------------------------------------------------------------------- KM


def test_km_hand_example():
    curve = weighted_kaplan_meier([1.0, 2.0, 3.0], [1, 0, 1])
    np.testing.assert_array_equal(curve.times, [1.0, 3.0])
    assert curve.survival[0] == pytest.approx(2 / 3, rel=1e-15)
    assert curve.survival[1] == 0.0
    s, lo, hi = curve.evaluate([0.5, 1.0, 2.5, 3.0, 10.0])
    np.testing.assert_allclose(s, [1.0, 2 / 3, 2 / 3, 0.0, 0.0])


def test_km_no_events():
    curve = weighted_kaplan_meier([1.0, 2.0], [0, 0])
    assert len(curve.times) == 0
    s, lo, hi = curve.evaluate([0.0, 5.0])
    np.testing.assert_array_equal(s, [1.0, 1.0])
    np.testing.assert_array_equal(lo, [1.0, 1.0])


def test_km_empty_arm():
    with pytest.raises(DataError, match="empty arm"):
        weighted_kaplan_meier([], [])


def test_km_freezes_after_zero():
    # all at risk die at t=2 while a later censored time remains
    curve = km_from_masses(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 1.0]), np.array([4.0, 2.0, 1.0]))
    np.testing.assert_array_equal(curve.survival, [0.75, 0.0, 0.0])
    assert curve.var_greenwood[2] == curve.var_greenwood[1]
    assert np.all(np.isfinite(curve.ci_low)) and np.all(np.isfinite(curve.ci_high))


@pytest.mark.parametrize("seed", range(10))
def test_km_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 11))
    time = rng.integers(1, 6, n).astype(float)
    event = rng.integers(0, 2, n)
    w = rng.uniform(0.2, 3.0, n)
    for weights in (np.ones(n), w):
        curve = weighted_kaplan_meier(time, event, weights)
        ref = km_oracle(time, event, weights)
        assert len(ref) == len(curve.times)
        for k, (u, s, g) in enumerate(ref):
            assert curve.times[k] == u
            assert curve.survival[k] == pytest.approx(s, rel=1e-12, abs=1e-15)
            if s > 0:
                assert curve.var_greenwood[k] == pytest.approx(s * s * g, rel=1e-12, abs=1e-15)
                if s < 1:
                    assert curve.var_exp_greenwood[k] == pytest.approx(g / math.log(s) ** 2, rel=1e-12)


def test_km_exponential_greenwood_bounds():
    rng = np.random.default_rng(1)
    time = rng.exponential(size=60)
    event = rng.integers(0, 2, 60)
    curve = weighted_kaplan_meier(time, event, rng.uniform(0.5, 2, 60))
    inner = (curve.survival > 0) & (curve.survival < 1)
    s, v = curve.survival[inner], curve.var_exp_greenwood[inner]
    c = np.log(-np.log(s))
    np.testing.assert_allclose(curve.ci_low[inner], np.exp(-np.exp(c + 1.959963984540054 * np.sqrt(v))), rtol=1e-12)
    np.testing.assert_allclose(curve.ci_high[inner], np.exp(-np.exp(c - 1.959963984540054 * np.sqrt(v))), rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_km_invariants(seed, ties):
    rng = np.random.default_rng(seed)
    c = random_cohort(rng, n=30, ties=ties)
    curve = weighted_kaplan_meier(c.time, c.event, rng.uniform(0.1, 5.0, c.n))
    s = curve.survival
    assert np.all(np.diff(s) <= 0) and np.all((s >= 0) & (s <= 1))
    assert np.all(curve.var_greenwood >= 0) and np.all(curve.var_exp_greenwood >= 0)
    assert np.all((curve.ci_low >= 0) & (curve.ci_high <= 1))
    alive = s > 0
    g = curve.var_greenwood[alive] / s[alive] ** 2
    assert np.all(np.diff(g) >= -1e-15)


def test_km_local_share_masses():
    time = np.array([1.0, 2.0, 2.0, 4.0])
    deaths, risks = km_local_share(time, np.array([1, 1, 0, 1]), np.array([1.0, 2.0, 3.0, 4.0]), np.array([0.5, 2.0, 3.0]))
    assert [math.fsum(d) for d in deaths] == [0.0, 2.0, 0.0]
    assert [math.fsum(r) for r in risks] == [10.0, 9.0, 4.0]


# -------------------------------------------------------------------- SMD


def test_smd_identical_arms():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((20, 3))
    rep = standardized_mean_differences(np.vstack([X, X]), np.repeat([1, 0], 20))
    np.testing.assert_array_equal(rep.smd_before, np.zeros(3))
    np.testing.assert_array_equal(rep.smd_after, np.zeros(3))


def test_smd_formula_example():
    one = {"n": np.array([4.0]), "sx": np.array([4.0]), "sxx": np.array([7.0]), "sw": np.array([4.0]),
           "swx": np.array([4.0]), "swxx": np.array([7.0])}
    zero = {"n": np.array([4.0]), "sx": np.array([0.0]), "sxx": np.array([3.0]), "sw": np.array([4.0]),
            "swx": np.array([0.0]), "swxx": np.array([3.0])}
    rep = smd_from_moments({1: one, 0: zero}, ("x",))
    np.testing.assert_array_equal(rep.var_treated, [1.0])
    np.testing.assert_array_equal(rep.var_control, [1.0])
    np.testing.assert_array_equal(rep.smd_before, [1.0])


def test_smd_zero_denominator_sentinel():
    X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 5.0]])
    rep = standardized_mean_differences(X, np.array([1, 1, 0, 0]))
    assert np.isnan(rep.smd_before[0]) and np.isnan(rep.smd_after[0])
    assert np.isfinite(rep.smd_before[1])


def test_smd_empty_arm():
    with pytest.raises(DataError, match="both arms"):
        standardized_mean_differences(np.ones((3, 1)), np.ones(3, dtype=int))


@pytest.mark.parametrize("seed", range(5))
def test_smd_matches_numpy(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((50, 4)) + rng.uniform(-1, 1, 4)
    a = rng.integers(0, 2, 50)
    w = rng.uniform(0.2, 3.0, 50)
    rep = standardized_mean_differences(X, a, w)
    s1, s0 = X[a == 1].var(0, ddof=1), X[a == 0].var(0, ddof=1)
    denom = np.sqrt((s1 + s0) / 2)
    before = (X[a == 1].mean(0) - X[a == 0].mean(0)) / denom
    after = (np.average(X[a == 1], axis=0, weights=w[a == 1]) - np.average(X[a == 0], axis=0, weights=w[a == 0])) / denom
    np.testing.assert_allclose(rep.smd_before, before, rtol=1e-10)
    np.testing.assert_allclose(rep.smd_after, after, rtol=1e-10)


@given(st.integers(0, 1000), st.floats(0.1, 10), st.floats(-5, 5), st.booleans())
def test_smd_affine_invariance(seed, scale, offset, flip):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((30, 2))
    a = np.tile([0, 1], 15)
    w = rng.uniform(0.5, 2.0, 30)
    sgn = -1.0 if flip else 1.0
    base = standardized_mean_differences(X, a, w)
    moved = standardized_mean_differences(sgn * scale * X + offset, a, w)
    np.testing.assert_allclose(np.abs(moved.smd_before), np.abs(base.smd_before), rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(np.abs(moved.smd_after), np.abs(base.smd_after), rtol=1e-8, atol=1e-12)


def test_smd_sign_flips_under_arm_swap():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((40, 3))
    a = rng.integers(0, 2, 40)
    w = rng.uniform(0.5, 2.0, 40)
    r1 = standardized_mean_differences(X, a, w)
    r2 = standardized_mean_differences(X, 1 - a, w)
    np.testing.assert_array_equal(r1.smd_before, -r2.smd_before)
    np.testing.assert_array_equal(r1.smd_after, -r2.smd_after)


# ------------------------------------------------------------- federated


def _weighted_pair(cohort, centers, report):
    pooled = LocalFederation([cohort])
    fed = SimuFederation(centers)
    apply_report_weights(pooled, report)
    apply_report_weights(fed, report)
    return pooled, fed


def _assert_curves_equal(a, b):
    for name in ("times", "survival", "var_greenwood", "var_exp_greenwood", "ci_low", "ci_high"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.sampled_from(["uniform", "eca"]), st.booleans())
def test_federated_analytics_bitwise_partition_invariant(seed, k, strategy, ties):
    rng = np.random.default_rng(seed)
    cohort = random_cohort(rng, n=60, ties=ties)
    report = {"theta": list(rng.normal(0, 0.5, cohort.p)), "estimand": "ate"}
    pooled, fed = _weighted_pair(cohort, split_cohort(cohort, k, strategy, seed=seed), report)
    for arm in (None, 0, 1):
        _assert_curves_equal(fed_kaplan_meier(fed, arm), fed_kaplan_meier(pooled, arm))
    a, b = fed_smd(fed), fed_smd(pooled)
    np.testing.assert_array_equal(a.smd_before, b.smd_before)
    np.testing.assert_array_equal(a.smd_after, b.smd_after)


def test_federated_km_equals_pooled_function():
    cohort, _ = simulate(SimConfig(n=200, p=4, shift=1.0, seed=2))
    res = fit_fedeca(SimuFederation(split_cohort(cohort, 4, "uniform", seed=0)), FitConfig())
    pooled, fed = _weighted_pair(cohort, split_cohort(cohort, 4, "uniform", seed=0), res.report())
    X, a, t, e = cohort.in_original_order()
    w = compute_weights(predict_propensity(res.propensity.theta, X), a, "ate").weights
    for arm in (0, 1):
        m = a == arm
        _assert_curves_equal(fed_kaplan_meier(fed, arm), weighted_kaplan_meier(t[m], e[m], w[m], arm))
    ref = standardized_mean_differences(X, a, w)
    np.testing.assert_array_equal(fed_smd(fed).smd_after, ref.smd_after)
    np.testing.assert_array_equal(fed_smd(fed).smd_before, ref.smd_before)


def test_federated_km_unweighted_flag():
    cohort = random_cohort(np.random.default_rng(5), n=30)
    fed = SimuFederation(split_cohort(cohort, 2, "uniform", seed=0))
    apply_report_weights(fed, {"theta": [1.0, -1.0, 0.5]})
    unweighted = fed_kaplan_meier(fed, weighted=False)
    _assert_curves_equal(unweighted, weighted_kaplan_meier(cohort.time, cohort.event))


def test_federated_km_empty_arm():
    X = np.zeros((4, 1))
    cohort = CenterCohort.from_arrays(X, [0, 0, 0, 0], [1.0, 2.0, 3.0, 4.0], [1, 0, 1, 0])
    fed = LocalFederation([cohort])
    apply_report_weights(fed)
    with pytest.raises(DataError, match="empty arm"):
        fed_kaplan_meier(fed, arm=1)


def test_weighting_reduces_smd_on_shifted_data():
    cohort, _ = simulate(SimConfig(n=700, p=10, shift=2.0, hazard_ratio=0.4, seed=1))
    fed = SimuFederation(split_cohort(cohort, 3, "uniform", seed=0))
    res = fit_fedeca(fed, FitConfig())
    rep = fed_smd(fed)
    assert res.report()["method"] == "fedeca"
    assert np.mean(np.abs(rep.smd_before)) > 0.1
    assert np.mean(np.abs(rep.smd_after)) < 0.1
