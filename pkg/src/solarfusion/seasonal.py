"""Space-time smoothing of per-site seasonal regressions.

Each site's daily series is fitted by ordinary least squares to
``b0 + b1 sin(2 pi t / 365) + b2 cos(2 pi t / 365)``. The three coefficient
estimates are then smoothed over space with independent GPs, and daily
predictions anywhere are obtained by pushing the smoothed coefficients back
through the harmonic regression. Coefficient posteriors are treated as
independent when propagating variance.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, SourceId, residual_series
from .errors import FitError, InsufficientDataError, ShapeError, SingularDesignError
from .gp import FitConfig, GPModel, Prediction, _as_matrix, fit_gp

PERIOD = 365.0
MIN_OBS = 10
TIME_CONVENTION = "t = day - first_day (days since first observation)"


@dataclass(frozen=True)
class HarmonicCoeffs:
    beta0: float
    beta1: float
    beta2: float
    resid_var: float
    n_obs: int

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.beta0, self.beta1, self.beta2])


def harmonic_design(t, period=PERIOD, harmonics=True) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    cols = [np.ones_like(t)]
    if harmonics:
        w = 2.0 * np.pi * t / period
        cols += [np.sin(w), np.cos(w)]
    return np.column_stack(cols)


def fit_site_ols(t, values, min_obs=MIN_OBS, harmonics=True, period=PERIOD) -> HarmonicCoeffs:
    """Least-squares harmonic fit to one site's series; missing values are dropped.

    With ``harmonics=False`` only the intercept is fitted (the site mean).
    """
    t = np.asarray(t, dtype=float).ravel()
    v = np.asarray(values, dtype=float).ravel()
    if t.shape != v.shape:
        raise ShapeError("t and values must have the same length")
    ok = ~np.isnan(v)
    t, v = t[ok], v[ok]
    n = len(v)
    if n < min_obs:
        raise InsufficientDataError(f"{n} observations, need at least {min_obs}")
    if not harmonics:
        b0 = float(np.sum(v)) / n
        r = v - b0
        rv = float(r @ r) / (n - 1) if n > 1 else 0.0
        return HarmonicCoeffs(b0, 0.0, 0.0, rv, n)
    A = harmonic_design(t, period)
    beta, _, rank, _ = np.linalg.lstsq(A, v, rcond=None)
    if rank < 3 or n <= 3:
        raise SingularDesignError(f"harmonic design has rank {rank} from {n} observations")
    r = v - A @ beta
    return HarmonicCoeffs(float(beta[0]), float(beta[1]), float(beta[2]), float(r @ r) / (n - 3), n)


def fit_sites(ds: Dataset, source, idx=None, min_obs=MIN_OBS, harmonics=True, period=PERIOD):
    """OLS coefficients for every site in ``idx``; returns ``(coeffs, excluded)``.

    ``coeffs[i]`` is ``None`` for sites that failed ``min_obs`` or were singular;
    those positions are also listed in ``excluded``.
    """
    vals = ds[source]
    idx = range(ds.n_sites) if idx is None else idx
    out, excluded = [], []
    for i in idx:
        try:
            out.append(fit_site_ols(ds.t, vals[i], min_obs, harmonics, period))
        except (InsufficientDataError, SingularDesignError):
            out.append(None)
            excluded.append(i)
    return out, excluded


@dataclass(frozen=True)
class CoeffField:
    """GP-smoothed coefficient surfaces for one source.

    ``models[k]`` is the GP for coefficient ``k``; with ``harmonics=False``
    there is only the intercept model.
    """

    models: tuple
    X: np.ndarray
    beta_hat: np.ndarray
    noise_var: float
    source: str = ""
    harmonics: bool = True
    period: float = PERIOD

    def predict_coefficients(self, S, include_noise=True):
        """Means and variances, each ``(m, 3)``, of the smoothed coefficients at ``S``."""
        S = _as_matrix(S, 2)
        mu = np.zeros((S.shape[0], 3))
        var = np.zeros((S.shape[0], 3))
        for k, model in enumerate(self.models):
            p = model.predict(S, include_noise=include_noise)
            mu[:, k] = p.mean
            var[:, k] = p.variance
        return mu, var


def smooth_coefficients(X, coeffs, config: FitConfig | None = None, harmonics=True, source="",
                        period=PERIOD, jobs=1) -> CoeffField:
    """Fit one GP per coefficient over site locations.

    ``coeffs`` is a sequence of :class:`HarmonicCoeffs` (``None`` entries
    are skipped) aligned with the rows of ``X``. ``config`` is a
    :class:`FitConfig` or a function of the coefficient index returning one.
    """
    X = _as_matrix(X, 2)
    if len(coeffs) != X.shape[0]:
        raise ShapeError("one coefficient record per site is required")
    keep = [i for i, c in enumerate(coeffs) if c is not None]
    if len(keep) < 5:
        raise InsufficientDataError(f"need at least 5 sites with valid coefficients, got {len(keep)}")
    Xk = X[keep]
    B = np.array([coeffs[i].beta for i in keep])
    noise = float(np.mean([coeffs[i].resid_var for i in keep]))
    ks = range(3 if harmonics else 1)

    def fit_k(k):
        try:
            return fit_gp(Xk, B[:, k], config(k) if callable(config) else config)
        except FitError as exc:
            raise FitError(f"coefficient {k}: {exc}", exc.diagnostics) from exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            models = tuple(ex.map(fit_k, ks))
    else:
        models = tuple(fit_k(k) for k in ks)
    Xk = Xk.copy()
    Xk.setflags(write=False)
    B.setflags(write=False)
    return CoeffField(models, Xk, B, noise, str(getattr(source, "value", source)), harmonics, period)


def seasonal_predict(cf: CoeffField, S, t, include_obs_noise=False, coef_noise=True) -> Prediction:
    """Daily predictions at locations ``S`` (``m x 2``) for days ``t``; arrays are ``(m, len(t))``.

    The variance is ``var_b0 + sin^2 var_b1 + cos^2 var_b2``; with
    ``include_obs_noise`` the pooled per-site residual variance is added.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    mu, var = cf.predict_coefficients(S, include_noise=coef_noise)
    w = 2.0 * np.pi * t / cf.period
    s, c = np.sin(w), np.cos(w)
    mean = mu[:, :1] + mu[:, 1:2] * s + mu[:, 2:3] * c
    v = var[:, :1] + var[:, 1:2] * s ** 2 + var[:, 2:3] * c ** 2
    if include_obs_noise:
        v = v + cf.noise_var
    return Prediction(mean, v)


def fit_coeff_field(ds: Dataset, source, idx=None, config=None, min_obs=MIN_OBS, harmonics=True, jobs=1):
    """OLS at each site in ``idx`` followed by :func:`smooth_coefficients`."""
    idx = np.arange(ds.n_sites) if idx is None else np.asarray(idx)
    coeffs, _ = fit_sites(ds, source, idx, min_obs, harmonics)
    return smooth_coefficients(ds.coords[idx], coeffs, config, harmonics, SourceId.parse(source), jobs=jobs)


@dataclass(frozen=True)
class SeasonalBiasModel:
    """Simulator surrogate field plus a discrepancy field trained on residuals.

    With ``uses_true_sim`` the discrepancy was trained on field minus the
    actual simulator output, and prediction requires simulator values.
    """

    surrogate: CoeffField | None
    discrepancy: CoeffField
    uses_true_sim: bool = False

    def predict(self, S, t, true_sim=None, include_obs_noise=False) -> Prediction:
        d = seasonal_predict(self.discrepancy, S, t, include_obs_noise=include_obs_noise)
        if true_sim is not None:
            sim = np.asarray(true_sim, dtype=float)
            if sim.shape != d.mean.shape:
                raise ShapeError(f"true simulator values must have shape {d.mean.shape}")
            return Prediction(sim + d.mean, d.variance)
        if self.surrogate is None:
            raise ValueError("no surrogate field; pass true simulator values")
        s = seasonal_predict(self.surrogate, S, t)
        return Prediction(s.mean + d.mean, s.variance + d.variance)


def seasonal_bias_pipeline(ds: Dataset, sim_source, idx=None, config=None, min_obs=MIN_OBS,
                           true_sim=False, surrogate: CoeffField | None = None, jobs=1) -> SeasonalBiasModel:
    """Surrogate on simulator series, then a discrepancy field on space-time residuals.

    Residuals are field minus the surrogate's fitted values at the training
    sites, or field minus the simulator itself when ``true_sim`` is set.
    A prefitted ``surrogate`` may be passed to avoid refitting it.
    """
    idx = np.arange(ds.n_sites) if idx is None else np.asarray(idx)
    sub = ds.subset(idx)
    if true_sim:
        sim = sub[sim_source]
        fld = np.where(np.isnan(sim), np.nan, sub[SourceId.FIELD])
        resid = residual_series(sub.with_source(SourceId.FIELD, fld), SourceId.FIELD, sim)
    else:
        if surrogate is None:
            surrogate = fit_coeff_field(sub, sim_source, config=config, min_obs=min_obs, jobs=jobs)
        fitted = seasonal_predict(surrogate, sub.coords, sub.t).mean
        resid = residual_series(sub, SourceId.FIELD, fitted)
    disc = fit_coeff_field(resid, SourceId.FIELD, config=config, min_obs=min_obs, jobs=jobs)
    disc = replace(disc, source=f"b[{SourceId.parse(sim_source).value}]")
    return SeasonalBiasModel(None if true_sim else surrogate, disc, bool(true_sim))


@dataclass(frozen=True)
class ARCoeffs:
    """Coefficients (intercept, sin, cos, lag-1 field, simA, simB) and residual variance."""

    beta: np.ndarray
    sigma2: float
    n_rows: int
    dropped: tuple = ()


AR_TERMS = ("intercept", "sin", "cos", "field_lag1", "simA", "simB")


def fit_ar_seasonal(t, field, sim_a, sim_b, min_rows=20, period=PERIOD):
    """In-sample OLS of field on harmonics, its own lag and both simulators.

    Arrays are aligned on a contiguous day grid. Only rows where the field is
    observed on the day and the day before and both simulators are observed
    are used. Columns that are identically zero on those rows are dropped
    (their coefficient is reported as 0). Returns ``(ARCoeffs, fitted)``
    where ``fitted`` is NaN outside the rows used.
    """
    t = np.asarray(t, dtype=float).ravel()
    f = np.asarray(field, dtype=float).ravel()
    a = np.asarray(sim_a, dtype=float).ravel()
    b = np.asarray(sim_b, dtype=float).ravel()
    if not (len(t) == len(f) == len(a) == len(b)):
        raise ShapeError("series must have equal lengths")
    if len(t) > 1 and not np.allclose(np.diff(t), 1.0):
        raise ValueError("t must be a contiguous daily grid")
    lag = np.concatenate([[np.nan], f[:-1]])
    rows = ~(np.isnan(f) | np.isnan(lag) | np.isnan(a) | np.isnan(b))
    n = int(rows.sum())
    if n < min_rows:
        raise InsufficientDataError(f"{n} complete rows, need at least {min_rows}")
    w = 2.0 * np.pi * t / period
    A = np.column_stack([np.ones_like(t), np.sin(w), np.cos(w), lag, a, b])[rows]
    live = [j for j in range(6) if np.any(A[:, j] != 0.0)]
    sol, _, rank, _ = np.linalg.lstsq(A[:, live], f[rows], rcond=None)
    if rank < len(live) or n <= len(live):
        raise SingularDesignError(f"autoregressive design has rank {rank} < {len(live)}")
    beta = np.zeros(6)
    beta[live] = sol
    fitted = np.full(len(t), np.nan)
    fitted[rows] = A @ beta
    r = f[rows] - fitted[rows]
    dropped = tuple(AR_TERMS[j] for j in range(6) if j not in live)
    return ARCoeffs(beta, float(r @ r) / (n - len(live)), n, dropped), fitted


def coefficient_rows(cf: CoeffField, S=None) -> list:
    """Rows ``lat,lon,k,beta_hat,beta_tilde,var_tilde`` at training sites (or ``S``)."""
    at_sites = S is None
    S = cf.X if at_sites else _as_matrix(S, 2)
    mu, var = cf.predict_coefficients(S)
    rows = []
    for i in range(S.shape[0]):
        for k in range(len(cf.models)):
            rows.append({"lat": float(S[i, 0]), "lon": float(S[i, 1]), "k": k,
                         "beta_hat": float(cf.beta_hat[i, k]) if at_sites else float("nan"),
                         "beta_tilde": float(mu[i, k]), "var_tilde": float(var[i, k])})
    return rows


def daily_rows(S, days, pred: Prediction) -> list:
    """Rows ``lat,lon,day,mean,var`` for a ``(m, T)`` prediction."""
    S = _as_matrix(S, 2)
    rows = []
    for i in range(S.shape[0]):
        for j, d in enumerate(days):
            rows.append({"lat": float(S[i, 0]), "lon": float(S[i, 1]), "day": int(d),
                         "mean": float(pred.mean[i, j]), "var": float(pred.variance[i, j])})
    return rows
