import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm
from statsmodels.duration.hazard_regression import PHReg

from fedeca.baselines import pooled_iptw
from fedeca.cox import fit_cox
from fedeca.data import CenterCohort, compute_weights
from fedeca.errors import ConvergenceError, DataError
from fedeca.federation.runtime import LocalFederation, SimuFederation, split_cohort
from fedeca.pipeline import FitConfig, fed_bootstrap, fit_fedeca
from fedeca.propensity import predict_propensity
from fedeca.simulate import SimConfig, simulate
from fedeca.variance import (
    Z_975,
    bootstrap,
    bootstrap_variance,
    draw_bootstrap_indices,
    local_robust_share,
    naive_variance,
    percentile_interval,
    robust_variance,
    wald_test,
)


def sandwich_oracle(beta, z, time, event, w):
    """Pooled ``H^-1 Q H^-T`` with every risk-set sum built by explicit loops."""
    n, q = z.shape
    grid = np.unique(time[event == 1])
    r = w * np.exp(z @ beta)
    zeta0, zeta1, Wd = {}, {}, {}
    H = np.zeros((q, q))
    for s in grid:
        risk = time >= s
        dead = (time == s) & (event == 1)
        z0 = r[risk].sum()
        z1 = (r[risk][:, None] * z[risk]).sum(0)
        z2 = np.einsum("i,ij,ik->jk", r[risk], z[risk], z[risk])
        zeta0[s], zeta1[s], Wd[s] = z0, z1, w[dead].sum()
        H += Wd[s] * (z2 / z0 - np.outer(z1, z1) / z0**2)
    Q = np.zeros((q, q))
    for i in range(n):
        phi = np.zeros(q)
        if event[i] == 1:
            phi += w[i] * (z[i] - zeta1[time[i]] / zeta0[time[i]])
        for s in grid:
            if s <= time[i]:
                phi -= Wd[s] * r[i] * (z[i] - zeta1[s] / zeta0[s]) / zeta0[s]
        Q += np.outer(phi, phi)
    Hinv = np.linalg.inv(H)
    return Hinv @ Q @ Hinv.T


def _instance(seed, n=15, q=2):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, q))
    z[:, 0] = rng.integers(0, 2, n)
    time = rng.exponential(size=n)
    event = rng.integers(0, 2, n)
    event[:2] = 1
    w = rng.uniform(0.5, 3.0, n)
    return z, time, event, w, rng


def _shares(res, z, time, event, w, groups):
    f = res.final
    times = np.unique(time[event == 1])
    return [
        local_robust_share(res.beta, res.hessian, z[g], time[g], event[g], w[g], times, f.W, f.zeta0, f.zeta1)
        for g in groups
    ]


# ------------------------------------------------------------------- naive


def test_naive_scalar():
    V = naive_variance([[4.0]])
    np.testing.assert_array_equal(V, [[0.25]])
    assert np.sqrt(V[0, 0]) == 0.5


def test_naive_identity():
    np.testing.assert_array_equal(naive_variance(np.eye(2)), np.eye(2))


@pytest.mark.parametrize("seed", range(5))
def test_naive_inverse_of_spd(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((4, 4))
    H = A @ A.T + 4 * np.eye(4)
    np.testing.assert_allclose(H @ naive_variance(H), np.eye(4), atol=1e-12)


def test_naive_singular_raises():
    with pytest.raises(ConvergenceError, match="singular"):
        naive_variance(np.zeros((2, 2)))


# ------------------------------------------------------------------ robust


@pytest.mark.parametrize("seed", range(8))
def test_robust_shares_sum_to_pooled_oracle(seed):
    z, time, event, w, rng = _instance(seed)
    res = fit_cox(*[a[np.lexsort((event, time))] for a in (z, time, event, w)])
    groups = np.array_split(rng.permutation(len(time)), 3)
    V = robust_variance(_shares(res, z, time, event, w, groups))
    ref = sandwich_oracle(res.beta, z, time, event, w)
    np.testing.assert_allclose(V, ref, rtol=1e-12, atol=0)


def test_robust_matches_statsmodels_unit_weights(rng):
    n = 80
    z = rng.standard_normal((n, 2))
    time = rng.exponential(size=n)
    event = rng.integers(0, 2, n)
    o = np.lexsort((event, time))
    z, time, event = z[o], time[o], event[o]
    res = fit_cox(z, time, event, np.ones(n))
    V = robust_variance(_shares(res, z, time, event, np.ones(n), [np.arange(n)]))
    ref = PHReg(time, z, status=event, ties="breslow").fit(groups=np.arange(n)).cov_params()
    np.testing.assert_allclose(V, ref, rtol=1e-6)


def test_zero_weight_center_contributes_nothing():
    z, time, event, w, rng = _instance(3)
    w[10:] = 0.0
    o = np.lexsort((event, time))
    res = fit_cox(z[o], time[o], event[o], w[o])
    shares = _shares(res, z, time, event, w, [np.arange(10), np.arange(10, 15)])
    np.testing.assert_array_equal(shares[1], np.zeros((2, 2)))


def test_missing_broadcast_state():
    with pytest.raises(DataError, match="broadcast"):
        local_robust_share(np.zeros(1), None, np.zeros((1, 1)), np.ones(1), np.ones(1), np.ones(1),
                           np.ones(1), np.ones(1), np.ones(1), np.ones((1, 1)))


def _fed_oracle_variance(cohort, result):
    X, a, t, e = cohort.in_original_order()
    w = compute_weights(predict_propensity(result.propensity.theta, X), a, "ate").weights
    return sandwich_oracle(result.cox.beta, a.astype(float)[:, None], t, e, w)


@pytest.mark.parametrize("k", [1, 4])
def test_federated_robust_equals_pooled_oracle(k):
    cohort, _ = simulate(SimConfig(n=120, p=4, shift=1.0, hazard_ratio=0.7, seed=11))
    fed = SimuFederation(split_cohort(cohort, k, "uniform", seed=1))
    res = fit_fedeca(fed, FitConfig(variance="robust"))
    np.testing.assert_allclose(res.fit.variance, _fed_oracle_variance(cohort, res), rtol=1e-10)


def test_robust_partition_invariance():
    cohort, _ = simulate(SimConfig(n=150, p=4, shift=1.0, hazard_ratio=0.7, seed=5))
    one = fit_fedeca(LocalFederation([cohort]), FitConfig(variance="robust"))
    four = fit_fedeca(SimuFederation(split_cohort(cohort, 4, "uniform", seed=2)), FitConfig(variance="robust"))
    np.testing.assert_allclose(four.fit.variance, one.fit.variance, rtol=1e-12)


def test_robust_exceeds_naive_on_shifted_data():
    cohort, _ = simulate(SimConfig(n=500, p=10, shift=2.0, hazard_ratio=0.6, seed=0))
    res = pooled_iptw(cohort, FitConfig(variance="naive", extra_variances=("robust",)))
    assert res.fits["robust"].se > res.fits["naive"].se


def test_unit_weights_robust_close_to_naive():
    cohort, _ = simulate(SimConfig(n=500, p=10, shift=0.0, seed=3))
    res = fit_fedeca(LocalFederation([cohort]), FitConfig(weighting="unit", variance="naive", extra_variances=("robust",)))
    ratio = res.fits["robust"].variance[0, 0] / res.fits["naive"].variance[0, 0]
    assert 0.75 <= ratio <= 1.25


def test_naive_p_below_robust_p_trend():
    hits = 0
    for seed in range(100):
        cohort, _ = simulate(SimConfig(n=300, p=10, shift=2.0, hazard_ratio=0.6, seed=seed))
        res = fit_fedeca(LocalFederation([cohort]), FitConfig(variance="naive", extra_variances=("robust",)))
        hits += res.fits["naive"].p_value <= res.fits["robust"].p_value
    assert hits >= 90


# -------------------------------------------------------------------- Wald


def test_wald_null():
    z, p, hr, (lo, hi) = wald_test([0.0], [[1.0]])
    assert (z, p, hr) == (0.0, 1.0, 1.0)
    assert lo < 1.0 < hi


def test_wald_half_hazard():
    z, p, hr, (lo, hi) = wald_test([np.log(0.5)], [[0.34657**2]])
    assert z == pytest.approx(-2.0, abs=1e-4)
    assert p == pytest.approx(0.0455, abs=1e-4)
    assert p == pytest.approx(2 * norm.sf(2.0), abs=1e-4)
    assert hr == pytest.approx(0.5, rel=1e-15)
    assert lo == pytest.approx(np.exp(np.log(0.5) - Z_975 * 0.34657))
    assert hi == pytest.approx(np.exp(np.log(0.5) + Z_975 * 0.34657))


def test_wald_infinite_se_limit():
    _, p, _, _ = wald_test([1.0], [[1e30]])
    assert p == pytest.approx(1.0, abs=1e-12)


def test_wald_zero_variance():
    with pytest.raises(DataError, match="zero variance"):
        wald_test([1.0], [[0.0]])


@given(st.floats(-5, 5), st.floats(1e-3, 10))
def test_wald_invariants(beta, var):
    z, p, hr, (lo, hi) = wald_test([beta], [[var]])
    assert 0.0 <= p <= 1.0
    assert lo < hr < hi


# --------------------------------------------------------------- bootstrap


def test_bootstrap_indices_are_counter_based():
    a = draw_bootstrap_indices(50, 7, 3, 0)
    np.testing.assert_array_equal(a, draw_bootstrap_indices(50, 7, 3, 0))
    assert not np.array_equal(a, draw_bootstrap_indices(50, 7, 3, 1))
    assert not np.array_equal(a, draw_bootstrap_indices(50, 7, 4, 0))
    assert a.min() >= 0 and a.max() < 50


def test_bootstrap_identical_records_zero_variance():
    values = np.full(30, 2.5)
    reps = bootstrap(30, lambda idx: values[idx].mean(), n_bootstrap=20, seed=1)
    np.testing.assert_array_equal(bootstrap_variance(reps), [[0.0]])


def test_bootstrap_needs_two_replicates():
    with pytest.raises(DataError):
        bootstrap(10, lambda idx: idx.mean(), n_bootstrap=1)
    with pytest.raises(DataError):
        bootstrap_variance([[1.0]])


def test_bootstrap_redraw_cap():
    with pytest.raises(DataError, match="degenerate"):
        bootstrap(10, lambda idx: idx.mean(), n_bootstrap=3, accept=lambda idx: False)


def test_bootstrap_variance_is_sample_covariance(rng):
    reps = rng.standard_normal((40, 2))
    np.testing.assert_allclose(bootstrap_variance(reps), np.cov(reps.T, ddof=1), rtol=1e-15)


def test_percentile_interval():
    reps = np.log(np.linspace(0.5, 2.0, 1001))[:, None]
    lo, hi = percentile_interval(reps)
    np.testing.assert_allclose([lo, hi], np.exp(np.quantile(reps[:, 0], [0.025, 0.975])))


def _boot_cohort():
    cohort, _ = simulate(SimConfig(n=150, p=3, shift=1.0, hazard_ratio=0.7, seed=21))
    return cohort


def test_fed_bootstrap_deterministic():
    cohort = _boot_cohort()
    cfg = FitConfig(n_bootstrap=10, seed=3)
    a = fed_bootstrap(SimuFederation(split_cohort(cohort, 3, "uniform", seed=0)), cfg, cohort.p)
    b = fed_bootstrap(SimuFederation(split_cohort(cohort, 3, "uniform", seed=0)), cfg, cohort.p)
    assert a.shape == (10, 1)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(bootstrap_variance(a), bootstrap_variance(b))


def test_fed_bootstrap_partition_invariance():
    # replicate fits stop at the gradient tolerance, so agreement is to solver precision
    cohort = _boot_cohort()
    cfg = FitConfig(n_bootstrap=10, seed=3)
    pooled = fed_bootstrap(LocalFederation([cohort]), cfg, cohort.p)
    split = fed_bootstrap(SimuFederation(split_cohort(cohort, 3, "eca", seed=4)), cfg, cohort.p)
    np.testing.assert_allclose(split, pooled, rtol=1e-6, atol=1e-9)


def test_fed_bootstrap_replicates_match_pooled_resamples():
    cohort = _boot_cohort()
    cfg = FitConfig(n_bootstrap=4, seed=9)
    reps = fed_bootstrap(LocalFederation([cohort]), cfg, cohort.p)
    X, a, t, e = cohort.in_original_order()
    order = np.lexsort((np.arange(cohort.n), e, t))
    for b in range(1, 5):
        attempt = 0
        while True:
            idx = order[draw_bootstrap_indices(cohort.n, 9, b, attempt)]
            if e[idx].any() and 0 < a[idx].sum() < len(idx):
                break
            attempt += 1
        boot = CenterCohort.from_arrays(X[idx], a[idx], t[idx], e[idx])
        ref = pooled_iptw(boot, FitConfig()).fit.beta_hat
        np.testing.assert_allclose(reps[b - 1], ref, rtol=1e-6, atol=1e-9)


def test_fit_with_bootstrap_variance_report():
    cohort = _boot_cohort()
    res = fit_fedeca(LocalFederation([cohort]), FitConfig(variance="bootstrap", n_bootstrap=8, bootstrap_ci="percentile"))
    rep = res.report()
    assert rep["variance_method"] == "bootstrap"
    assert rep["n_bootstrap"] == 8
    lo, hi = percentile_interval(res.bootstrap_betas)
    assert rep["ci"] == [lo, hi]
