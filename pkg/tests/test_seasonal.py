import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from solarfusion.data import aggregate_time
from solarfusion.errors import FitError, InsufficientDataError, SingularDesignError
from solarfusion.gp import FitConfig, Prediction, fit_gp
from solarfusion.seasonal import (CoeffField, HarmonicCoeffs, fit_ar_seasonal, fit_coeff_field, fit_site_ols,
                                  harmonic_design, seasonal_bias_pipeline, seasonal_predict, smooth_coefficients)
from solarfusion.synthetic import seasonal_dataset, uniform_coords

import oracles

T365 = np.arange(365.0)
W365 = 2 * np.pi * T365 / 365


def test_ols_exact_recovery():
    c = fit_site_ols(T365, 100 + 20 * np.sin(W365))
    np.testing.assert_allclose(c.beta, [100, 20, 0], rtol=0, atol=1e-8)
    assert c.n_obs == 365


def test_ols_constant():
    c = fit_site_ols(T365[:40], np.full(40, 55.5))
    np.testing.assert_allclose(c.beta, [55.5, 0, 0], rtol=0, atol=1e-10)
    assert c.resid_var == pytest.approx(0.0, abs=1e-20)


def test_ols_matches_normal_equations():
    rng = np.random.default_rng(0)
    t = np.arange(559.0)
    v = 180 + 35 * np.sin(2 * np.pi * t / 365) - 50 * np.cos(2 * np.pi * t / 365) + rng.normal(0, 50, 559)
    c = fit_site_ols(t, v)
    beta, rv = oracles.harmonic_ols(t, v)
    np.testing.assert_allclose(c.beta, beta, rtol=1e-8)
    assert c.resid_var == pytest.approx(rv, rel=1e-8)


def test_ols_singular_and_short():
    with pytest.raises(SingularDesignError):
        fit_site_ols(np.full(12, 7.0), np.arange(12.0))
    with pytest.raises(InsufficientDataError):
        fit_site_ols(np.arange(9.0), np.arange(9.0))


def test_ols_drops_missing():
    v = 100 + 20 * np.sin(W365)
    v[::3] = np.nan
    c = fit_site_ols(T365, v)
    assert c.n_obs == 365 - 122
    np.testing.assert_allclose(c.beta, [100, 20, 0], atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 400))
def test_ols_fitted_values_invariant_to_day_offset(seed, shift):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.choice(500, 60, replace=False)).astype(float)
    v = rng.normal(100, 30, 60)
    a = fit_site_ols(t, v)
    b = fit_site_ols(t + shift, v)
    np.testing.assert_allclose(harmonic_design(t) @ a.beta, harmonic_design(t + shift) @ b.beta,
                               rtol=1e-9, atol=1e-8)


def _coeffs(B):
    return [HarmonicCoeffs(*b, 1.0, 30) for b in B]


def test_smooth_constant_field():
    S = uniform_coords(25, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    B = np.array([100.0, 20.0, -5.0]) + rng.normal(0, 0.01, (25, 3))
    cf = smooth_coefficients(S, _coeffs(B))
    Q = uniform_coords(100, rng, (0.1, 0.9, 0.1, 0.9))
    mu, var = cf.predict_coefficients(Q)
    assert np.all(np.abs(mu - [100, 20, -5]) <= 2 * np.sqrt(var) + 0.05)


def test_smoothing_shrinks_spread():
    ds = seasonal_dataset(n_sites=40, seed=3, noise_sd=60.0)
    cf = fit_coeff_field(ds, "field")
    mu, _ = cf.predict_coefficients(cf.X)
    for k in range(3):
        assert np.var(mu[:, k]) <= np.var(cf.beta_hat[:, k])


def test_smooth_planted_intercept():
    rng = np.random.default_rng(4)
    S = np.column_stack([rng.uniform(25, 49, 60), rng.uniform(-124, -67, 60)])
    b0 = 100 + 10 * S[:, 0] / 45
    B = np.column_stack([b0 + rng.normal(0, 0.2, 60), rng.normal(0, 1, 60), rng.normal(0, 1, 60)])
    cf = smooth_coefficients(S, _coeffs(B))
    Q = np.column_stack([rng.uniform(27, 47, 200), rng.uniform(-120, -70, 200)])
    mu, _ = cf.predict_coefficients(Q)
    assert np.corrcoef(mu[:, 0], 100 + 10 * Q[:, 0] / 45)[0, 1] >= 0.95


def test_smooth_needs_five_sites_and_labels_errors(monkeypatch):
    S = uniform_coords(6, np.random.default_rng(5))
    with pytest.raises(InsufficientDataError):
        smooth_coefficients(S, _coeffs(np.ones((6, 3)))[:4] + [None, None])

    def boom(X, y, config=None):
        raise FitError("nope")
    monkeypatch.setattr("solarfusion.seasonal.fit_gp", boom)
    with pytest.raises(FitError, match="coefficient 0"):
        smooth_coefficients(S, _coeffs(np.ones((6, 3))))


def test_smooth_invariant_to_site_order():
    ds = seasonal_dataset(n_sites=20, seed=6)
    perm = np.random.default_rng(6).permutation(20)
    a = fit_coeff_field(ds, "field")
    b = fit_coeff_field(ds.subset(perm), "field")
    Q = uniform_coords(10, np.random.default_rng(7))
    ma, va = a.predict_coefficients(Q)
    mb, vb = b.predict_coefficients(Q)
    np.testing.assert_allclose(ma, mb, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(va, vb, rtol=1e-5, atol=1e-8)


class _Const:
    """Stand-in coefficient model with a fixed mean and variance."""

    def __init__(self, m, v=0.0):
        self.m, self.v = m, v

    def predict(self, S, include_noise=True):
        n = len(S)
        return Prediction(np.full(n, self.m), np.full(n, self.v))


def _const_field(means, variances=(0.0, 0.0, 0.0)):
    return CoeffField(tuple(_Const(m, v) for m, v in zip(means, variances)), np.zeros((1, 2)),
                      np.zeros((1, 3)), 0.0)


def test_predict_degenerate_field():
    p = seasonal_predict(_const_field((100, 20, 0)), [[0.3, 0.4]], 91)
    assert p.mean[0, 0] == pytest.approx(100 + 20 * math.sin(2 * math.pi * 91 / 365), rel=1e-14)
    assert p.variance[0, 0] == 0.0


def test_predict_variance_when_sine_vanishes():
    p = seasonal_predict(_const_field((1, 2, 3), (0.5, 7.0, 0.25)), [[0, 0]], 0)
    assert p.variance[0, 0] == pytest.approx(0.75, rel=1e-14)


def test_annual_average_recovers_intercept():
    ds = seasonal_dataset(n_sites=20, seed=8)
    cf = fit_coeff_field(ds, "field")
    S = np.array([[0.4, 0.6]])
    p = seasonal_predict(cf, S, T365)
    mu, _ = cf.predict_coefficients(S)
    assert abs(p.mean.mean() - mu[0, 0]) <= 1e-6 * abs(mu[0, 0])


def test_variance_periodic_and_nonnegative():
    ds = seasonal_dataset(n_sites=15, seed=9)
    cf = fit_coeff_field(ds, "field")
    S = uniform_coords(5, np.random.default_rng(9))
    t = np.arange(0, 730, 7.0)
    a = seasonal_predict(cf, S, t)
    b = seasonal_predict(cf, S, t + 365)
    np.testing.assert_allclose(a.variance, b.variance, rtol=1e-9)
    assert np.all(a.variance >= 0)


def test_special_case_matches_gp_on_aggregates():
    ds = seasonal_dataset(n_sites=25, seed=10)
    cfg = FitConfig(seed=3)
    cf = fit_coeff_field(ds, "field", config=cfg, harmonics=False)
    agg = aggregate_time(ds, "field")
    model = fit_gp(agg.coords, agg.means, cfg)
    Q = uniform_coords(30, np.random.default_rng(11))
    p = seasonal_predict(cf, Q, [17.0])
    np.testing.assert_allclose(p.mean[:, 0], model.predict(Q).mean, rtol=0, atol=1e-8)


def test_pipeline_zero_bias():
    ds = seasonal_dataset(n_sites=20, seed=12)
    same = ds.with_source("simA", ds["field"])
    bm = seasonal_bias_pipeline(same, "simA", true_sim=True)
    Q = uniform_coords(40, np.random.default_rng(13), (0.1, 0.9, 0.1, 0.9))
    mu, var = bm.discrepancy.predict_coefficients(Q)
    assert np.all(np.abs(mu) <= 2 * np.sqrt(var) + 1e-9)


def test_pipeline_planted_cosine_bias():
    ds = seasonal_dataset(n_sites=30, seed=14)
    bm = seasonal_bias_pipeline(ds, "simA", true_sim=True)
    Q = uniform_coords(40, np.random.default_rng(15), (0.1, 0.9, 0.1, 0.9))
    mu, _ = bm.discrepancy.predict_coefficients(Q)
    assert np.all(np.abs(mu[:, 2] - 30) < 3)
    assert np.all(np.abs(mu[:, 1]) < 3)


def test_pipeline_corrected_beats_uncorrected():
    ds = seasonal_dataset(n_sites=36, seed=16, missing=0.1)
    train, test = np.arange(28), np.arange(28, 36)
    bm = seasonal_bias_pipeline(ds, "simA", idx=train)
    S = ds.coords[test]
    cor = bm.predict(S, ds.t).mean
    unc = seasonal_predict(bm.surrogate, S, ds.t).mean
    f = ds["field"][test]
    ok = ~np.isnan(f)
    rm = lambda p: math.sqrt(np.mean((p[ok] - f[ok]) ** 2))
    assert rm(cor) < rm(unc)
    tv = bm.predict(S, ds.t, true_sim=np.nan_to_num(ds["simA"][test]))
    assert tv.mean.shape == f.shape


def _ar_series(beta, n=200, noise=0.0, seed=0, sims=True):
    rng = np.random.default_rng(seed)
    t = np.arange(n, dtype=float)
    a = rng.normal(200, 30, n) if sims else np.zeros(n)
    b = rng.normal(190, 30, n) if sims else np.zeros(n)
    w = 2 * np.pi * t / 365
    eps = rng.normal(0, noise, n) if noise else np.zeros(n)
    f = np.empty(n)
    f[0] = 150.0
    for i in range(1, n):
        x = np.array([1.0, np.sin(w[i]), np.cos(w[i]), f[i - 1], a[i], b[i]])
        f[i] = x @ beta + eps[i]
    return t, f, a, b


def test_ar_exact_recovery():
    beta = np.array([20.0, 15.0, -10.0, 0.4, 0.3, 0.2])
    t, f, a, b = _ar_series(beta)
    co, fitted = fit_ar_seasonal(t, f, a, b)
    np.testing.assert_allclose(co.beta, beta, rtol=0, atol=1e-6)
    assert np.isnan(fitted[0]) and co.n_rows == 199


def test_ar_zero_sims_reduced_design():
    beta = np.array([50.0, 30.0, -20.0, 0.6, 0.0, 0.0])
    t, f, a, b = _ar_series(beta, noise=10.0, sims=False, seed=1)
    co, _ = fit_ar_seasonal(t, f, a, b)
    w = 2 * np.pi * t[1:] / 365
    A = np.column_stack([np.ones(199), np.sin(w), np.cos(w), f[:-1]])
    want = np.linalg.inv(A.T @ A) @ A.T @ f[1:]
    np.testing.assert_allclose(co.beta[:4], want, rtol=1e-8)
    assert co.dropped == ("simA", "simB")


def test_ar_seventeen_missing_days():
    beta = np.array([20.0, 15.0, -10.0, 0.4, 0.3, 0.2])
    t, f, a, b = _ar_series(beta, n=559, noise=5.0, seed=2)
    miss = np.random.default_rng(3).choice(np.arange(1, 559), 17, replace=False)
    f = f.copy()
    f[miss] = np.nan
    co, fitted = fit_ar_seasonal(t, f, a, b)
    lag = np.concatenate([[np.nan], f[:-1]])
    rows = ~np.isnan(f) & ~np.isnan(lag)
    assert co.n_rows == int(rows.sum())
    np.testing.assert_array_equal(~np.isnan(fitted), rows)


def test_ar_insufficient_rows():
    t, f, a, b = _ar_series(np.array([1, 0, 0, 0.5, 0, 0]), n=15)
    with pytest.raises(InsufficientDataError):
        fit_ar_seasonal(t, f, a, b)
