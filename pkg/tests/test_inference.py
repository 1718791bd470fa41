import numpy as np
import pytest
from scipy import stats

from qrtoolkit.core import fit_quantile
from qrtoolkit.errors import DensityEstimationError, NumericalError, ResamplingError
from qrtoolkit.inference import (
    BOOTSTRAP,
    CLUSTER_BOOTSTRAP,
    IID,
    SANDWICH,
    CovarianceEstimate,
    bootstrap_cov,
    confidence_band,
    covariance_iid,
    covariance_sandwich,
    estimate_density,
    hall_sheather_bandwidth,
    ols_covariance,
    quantile_covariance,
    resample_rows,
)


def test_density_of_normal_quantiles():
    r = stats.norm.ppf(np.arange(1, 10002) / 10002)
    assert estimate_density(r, 0.5) == pytest.approx(stats.norm.pdf(0), rel=0.01)


def test_density_of_uniform_grid():
    r = np.linspace(0, 1, 10001)
    assert estimate_density(r, 0.5) == pytest.approx(1.0, rel=0.01)


def test_density_needs_tau_for_raw_residuals():
    with pytest.raises(ValueError):
        estimate_density(np.arange(10.0))


def test_density_zero_spread():
    with pytest.raises(DensityEstimationError, match="bootstrap"):
        estimate_density(np.zeros(100), 0.5)


def test_density_clamps_near_edges():
    r = np.linspace(0, 1, 101)
    f = estimate_density(r, 0.02, bandwidth=0.1)
    assert np.isfinite(f) and f > 0


def test_bandwidth_shrinks_with_n():
    assert hall_sheather_bandwidth(4000, 0.5) < hall_sheather_bandwidth(400, 0.5)
    assert hall_sheather_bandwidth(1000, 0.5) == pytest.approx(
        1000 ** (-1 / 3) * stats.norm.ppf(0.975) ** (2 / 3) * (1.5 * stats.norm.pdf(0) ** 2) ** (1 / 3)
    )


def _median_fit(n, seed):
    rng = np.random.default_rng(seed)
    X = np.ones((n, 1))
    y = rng.standard_normal(n)
    return X, y, fit_quantile(X, y, 0.5)


def test_iid_median_variance():
    n = 4000
    X, y, fit = _median_fit(n, 7)
    cov = covariance_iid(fit, X)
    assert cov.matrix[0, 0] == pytest.approx(np.pi / (2 * n), rel=0.2)
    assert cov.method == IID
    assert cov.density_at_tau > 0 and cov.bandwidth > 0


def test_iid_scales_with_outcome(rng):
    n = 500
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = X @ [1.0, 1.0] + rng.normal(size=n)
    se1 = covariance_iid(fit_quantile(X, y, 0.5), X).std_errors
    se2 = covariance_iid(fit_quantile(X, 2 * y, 0.5), X).std_errors
    np.testing.assert_allclose(se2, 2 * se1, rtol=1e-10)


def test_iid_intercept_only_collapses_to_scalar_formula():
    n = 1000
    X, y, fit = _median_fit(n, 3)
    f = estimate_density(fit)
    cov = covariance_iid(fit, X)
    assert cov.matrix[0, 0] == pytest.approx(0.25 / (n * f**2), rel=1e-12)


def _location_scale(n, s1, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 2, n)
    X = np.column_stack([np.ones(n), x])
    y = 1 + x + (1 + s1 * x) * rng.standard_normal(n)
    return X, y


def test_sandwich_close_to_iid_under_homoskedasticity():
    X, y = _location_scale(3000, 0.0, 11)
    fit = fit_quantile(X, y, 0.5)
    iid = covariance_iid(fit, X).std_errors
    sw = covariance_sandwich(fit, X).std_errors
    np.testing.assert_allclose(sw, iid, rtol=0.25)


def test_sandwich_differs_under_heteroskedasticity():
    rng = np.random.default_rng(5)
    n = 3000
    x = rng.uniform(0, 2, n)
    X = np.column_stack([np.ones(n), x])
    y = 1 + x + (0.1 + 2 * x) * rng.standard_normal(n)
    fit = fit_quantile(X, y, 0.5)
    iid = covariance_iid(fit, X).std_errors[1]
    sw = covariance_sandwich(fit, X).std_errors[1]
    assert abs(sw / iid - 1) > 0.25


def test_sandwich_constant_weights_reduce_to_iid():
    X, y = _location_scale(800, 0.5, 2)
    fit = fit_quantile(X, y, 0.3)
    iid = covariance_iid(fit, X)
    sw = covariance_sandwich(fit, X, density_weights=iid.density_at_tau)
    np.testing.assert_allclose(sw.matrix, iid.matrix, rtol=1e-10, atol=0)


def test_sandwich_orthonormal_design():
    # with X'X / n = I and unit weights the covariance is tau (1 - tau) / n * I
    n = 400
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(n, 3)))
    X = q * np.sqrt(n)
    y = np.random.default_rng(1).normal(size=n)
    fit = fit_quantile(X, y, 0.5)
    sw = covariance_sandwich(fit, X, density_weights=1.0)
    np.testing.assert_allclose(sw.matrix, 0.25 / n * np.eye(3), atol=1e-12)


def test_bootstrap_deterministic(rng):
    X = np.column_stack([np.ones(200), rng.normal(size=200)])
    y = rng.normal(size=200)
    a = bootstrap_cov(X, y, 0.5, B=60, seed=4)
    b = bootstrap_cov(X, y, 0.5, B=60, seed=4)
    c = bootstrap_cov(X, y, 0.5, B=60, seed=4, workers=4)
    assert a.matrix.tobytes() == b.matrix.tobytes() == c.matrix.tobytes()
    assert a.replications == 60 and a.seed == 4 and a.method == BOOTSTRAP
    d = bootstrap_cov(X, y, 0.5, B=60, seed=5)
    assert d.matrix.tobytes() != a.matrix.tobytes()


def test_bootstrap_median_variance():
    n = 2000
    X, y, _ = _median_fit(n, 21)
    cov = bootstrap_cov(X, y, 0.5, B=400, seed=1)
    assert cov.std_errors[0] == pytest.approx(np.sqrt(np.pi / (2 * n)), rel=0.25)


def test_singleton_clusters_match_row_bootstrap(rng):
    n = 120
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = rng.normal(size=n)
    plain = bootstrap_cov(X, y, 0.4, B=50, seed=9)
    clustered = bootstrap_cov(X, y, 0.4, B=50, seed=9, cluster_ids=np.arange(n))
    assert clustered.matrix.tobytes() == plain.matrix.tobytes()
    assert clustered.method == CLUSTER_BOOTSTRAP


def test_singleton_clusters_in_shuffled_order(rng):
    # cluster order follows first appearance, not label order
    n = 60
    ids = rng.permutation(n) * 7
    np.testing.assert_array_equal(
        resample_rows(n, 3, 0, [np.array([i]) for i in range(n)]),
        resample_rows(n, 3, 0),
    )
    from qrtoolkit.inference import _cluster_members

    members = _cluster_members(ids)
    assert [m.tolist() for m in members] == [[i] for i in range(n)]


def test_cluster_draws_whole_clusters(rng):
    from qrtoolkit.inference import _cluster_members

    ids = np.repeat(np.arange(12), 5)
    clusters = _cluster_members(ids)
    idx = resample_rows(60, 0, 0, clusters)
    assert idx.size == 60
    assert all(len(set(ids[idx[k:k + 5]])) == 1 for k in range(0, 60, 5))


def test_bootstrap_guards(rng):
    X = np.column_stack([np.ones(100), rng.normal(size=100)])
    y = rng.normal(size=100)
    with pytest.raises(ValueError, match="50"):
        bootstrap_cov(X, y, 0.5, B=49)
    with pytest.raises(ValueError, match="10 clusters"):
        bootstrap_cov(X, y, 0.5, B=50, cluster_ids=np.arange(100) % 9)


def test_bootstrap_reports_too_many_failures():
    # a dummy switched on in one row is missing from about 37% of resamples
    n = 100
    X = np.column_stack([np.ones(n), np.r_[1.0, np.zeros(n - 1)]])
    y = np.arange(n, dtype=float)
    with pytest.raises(ResamplingError):
        bootstrap_cov(X, y, 0.5, B=50)


def test_quantile_covariance_dispatch(rng):
    X = np.column_stack([np.ones(150), rng.normal(size=150)])
    y = rng.normal(size=150)
    fit = fit_quantile(X, y, 0.5)
    assert quantile_covariance(fit, X, y, IID).method == IID
    assert quantile_covariance(fit, X, y, SANDWICH).method == SANDWICH
    assert quantile_covariance(fit, X, y, BOOTSTRAP, B=50).method == BOOTSTRAP
    with pytest.raises(ValueError):
        quantile_covariance(fit, X, y, CLUSTER_BOOTSTRAP)
    with pytest.raises(ValueError, match="unknown"):
        quantile_covariance(fit, X, y, "jackknife")


def test_ols_covariance_classical(rng):
    n = 200
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = X @ [1.0, 2.0] + rng.normal(size=n)
    beta, ssr, *_ = np.linalg.lstsq(X, y, rcond=None)
    expected = ssr[0] / (n - 2) * np.linalg.inv(X.T @ X)
    np.testing.assert_allclose(ols_covariance(X, y, IID).matrix, expected, rtol=1e-10)
    hc1 = ols_covariance(X, y, SANDWICH).matrix
    assert np.all(np.diag(hc1) > 0)


def test_covariance_estimate_validation():
    with pytest.raises(NumericalError):
        CovarianceEstimate(np.array([[1.0, 0.0], [0.0, -1.0]]), IID)
    with pytest.raises(NumericalError):
        CovarianceEstimate(np.array([[np.nan]]), IID)
    sym = CovarianceEstimate(np.array([[1.0, 0.2], [0.0, 1.0]]), IID)
    np.testing.assert_array_equal(sym.matrix, sym.matrix.T)


def _fake_fit(tau, beta):
    from qrtoolkit.core import QuantileFit

    beta = np.asarray(beta, dtype=float)
    return QuantileFit(tau, beta, np.zeros(3), 0.0, 3, "converged", (0,), 0, ("a",) * beta.size)


def test_band_unit_standard_error():
    band = confidence_band([_fake_fit(0.5, [0.0])], [CovarianceEstimate(np.eye(1), IID)], 0.95)
    assert band.lower[0, 0] == pytest.approx(-1.959964, abs=1e-6)
    assert band.upper[0, 0] == pytest.approx(1.959964, abs=1e-6)


def test_band_nesting():
    fits = [_fake_fit(t, [1.0, -2.0]) for t in (0.25, 0.75)]
    covs = [CovarianceEstimate(np.diag([0.3, 2.0]), IID)] * 2
    narrow = confidence_band(fits, covs, 0.90)
    wide = confidence_band(fits, covs, 0.99)
    assert np.all(wide.lower <= narrow.lower) and np.all(narrow.upper <= wide.upper)


def test_band_zero_covariance_is_degenerate():
    band = confidence_band([_fake_fit(0.5, [2.5])], [CovarianceEstimate(np.zeros((1, 1)), IID)])
    assert band.lower[0, 0] == band.upper[0, 0] == 2.5


def test_band_length_mismatch():
    with pytest.raises(ValueError):
        confidence_band([_fake_fit(0.5, [0.0])], [])


@pytest.mark.slow
@pytest.mark.parametrize("method", [IID, SANDWICH])
def test_interval_coverage(method):
    hits = 0
    reps = 150
    for r in range(reps):
        X, y = _location_scale(600, 0.5, 1000 + r)
        fit = fit_quantile(X, y, 0.5)
        band = confidence_band([fit], [quantile_covariance(fit, X, y, method)])
        hits += band.lower[0, 1] <= 1.0 <= band.upper[0, 1]
    assert 0.88 <= hits / reps <= 0.995
