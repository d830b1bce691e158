"""Synthetic data generators with planted structure, for tests and demos."""

from __future__ import annotations

import numpy as np

from .data import Dataset, Site, SourceId
from .gp import KernelParams, kernel_matrix


def make_sites(coords, prefix="s") -> tuple:
    return tuple(Site(f"{prefix}{i:04d}", float(a), float(b)) for i, (a, b) in enumerate(np.asarray(coords)))


def uniform_coords(n, rng, box=(0.0, 1.0, 0.0, 1.0)) -> np.ndarray:
    lat0, lat1, lon0, lon1 = box
    return np.column_stack([rng.uniform(lat0, lat1, n), rng.uniform(lon0, lon1, n)])


def sample_gp(X, params: KernelParams, rng, mean=0.0) -> np.ndarray:
    """One draw from the GP prior (nugget included) at the rows of ``X``."""
    K = kernel_matrix(X, X, params)
    K[np.diag_indices_from(K)] += params.signal_variance * max(params.nugget, 1e-10)
    L = np.linalg.cholesky(K)
    return mean + L @ rng.standard_normal(len(K))


def smooth_surface(X, rng, n_bumps=6, width=0.15, amplitude=1.0) -> np.ndarray:
    """Sum of random Gaussian bumps over the unit square."""
    X = np.asarray(X, dtype=float)
    c = rng.uniform(0, 1, (n_bumps, 2))
    a = amplitude * rng.normal(0, 1, n_bumps)
    d2 = ((X[:, None, :] - c[None]) ** 2).sum(-1)
    return (a[None] * np.exp(-d2 / (2 * width ** 2))).sum(1)


def calibration_dataset(n_sites=200, seed=0, noise_sd=3.0, bias_scale=25.0, sim_noise_sd=0.5) -> Dataset:
    """Time-aggregated sites where the simulator misses a smooth additive bias.

    The truth is a wiggly surface around 200 W/m^2, the simulator sees the
    truth minus a broad planted bias (with little noise), and the field sees
    the truth plus larger measurement noise. One value per site.
    """
    rng = np.random.default_rng(seed)
    X = uniform_coords(n_sites, rng)
    truth = 200.0 + 30.0 * smooth_surface(X, rng, n_bumps=30, width=0.08)
    bias = bias_scale * (0.6 + 0.8 * X[:, 0] - 0.5 * X[:, 1] ** 2)
    sim = truth - bias + rng.normal(0, sim_noise_sd, n_sites)
    field = truth + rng.normal(0, noise_sd, n_sites)
    return Dataset.from_arrays(make_sites(X), 0, field=field[:, None], simA=sim[:, None],
                               simB=(sim + rng.normal(0, 3.0, n_sites))[:, None])


def two_regime_data(n=400, seed=0, ratio=10.0, theta=0.01, cut=0.2, noise_sd=0.05):
    """Blend of two GP draws whose lengthscales differ ``ratio``-fold.

    Below ``lon = cut`` the surface is a draw with squared-distance scale
    ``theta``; above it the scale is ``theta * ratio**2``. A steep logistic
    ramp joins the two. Returns ``(X, y, f)`` with ``f`` the noise-free
    surface.
    """
    rng = np.random.default_rng(seed)
    X = uniform_coords(n, rng)
    rough = sample_gp(X, KernelParams([theta, theta], 1.0, 1e-8), rng)
    smooth = sample_gp(X, KernelParams([theta * ratio ** 2] * 2, 1.0, 1e-8), rng)
    w = 1.0 / (1.0 + np.exp(-(X[:, 1] - cut) / 0.02))
    f = (1 - w) * rough + w * smooth
    return X, f + rng.normal(0, noise_sd, n), f


def harmonic_fields(S):
    """Planted smooth coefficient surfaces (intercept, sine, cosine) at ``S``."""
    S = np.asarray(S, dtype=float)
    b0 = 200.0 + 30.0 * S[:, 0] - 15.0 * S[:, 1] + 10.0 * np.sin(3.0 * S[:, 1])
    b1 = 40.0 + 20.0 * S[:, 1] * S[:, 0]
    b2 = -60.0 + 25.0 * np.cos(2.5 * S[:, 0])
    return np.column_stack([b0, b1, b2])


def seasonal_dataset(n_sites=40, n_days=365, seed=0, noise_sd=20.0, missing=0.0, first_day=0,
                     sim_bias=None, sim_noise_sd=5.0) -> Dataset:
    """Daily series from :func:`harmonic_fields` plus noise.

    ``sim_bias(S, t)`` returns the simulator's departure from the truth;
    by default the simulator is biased by ``-30 cos(2 pi t / 365)``.
    """
    rng = np.random.default_rng(seed)
    S = uniform_coords(n_sites, rng)
    t = np.arange(n_days, dtype=float)
    B = harmonic_fields(S)
    w = 2 * np.pi * t / 365.0
    truth = B[:, :1] + B[:, 1:2] * np.sin(w) + B[:, 2:3] * np.cos(w)
    field = truth + rng.normal(0, noise_sd, truth.shape)
    if sim_bias is None:
        bias = np.broadcast_to(-30.0 * np.cos(w), truth.shape)
    else:
        bias = np.broadcast_to(sim_bias(S, t), truth.shape)
    simA = truth + bias + rng.normal(0, sim_noise_sd, truth.shape)
    simB = truth + 0.5 * bias + rng.normal(0, 2 * sim_noise_sd, truth.shape)
    if missing > 0:
        for a in (field, simA, simB):
            a[rng.uniform(size=a.shape) < missing] = np.nan
    return Dataset.from_arrays(make_sites(S), first_day, field=field, simA=simA, simB=simB)


def correlated_estimators(n_trials, rng, rho=0.5, variances=(1.0, 1.0, 1.0)):
    """Unbiased estimators of 0 sharing a common error component with correlation ``rho``."""
    v = np.asarray(variances, dtype=float)
    sd = np.sqrt(v)
    common = rng.standard_normal(n_trials)
    own = rng.standard_normal((len(v), n_trials))
    err = sd[:, None] * (np.sqrt(rho) * common[None] + np.sqrt(1 - rho) * own)
    return err, np.broadcast_to(v[:, None], err.shape)


def dataset_with_sources(coords, prefix="s", first_day=0, **arrays) -> Dataset:
    """Convenience wrapper: sites from coordinates plus ``field``/``simA``/``simB`` arrays."""
    n = len(coords)
    arrays = {SourceId.parse(k).value: np.asarray(v, dtype=float).reshape(n, -1) for k, v in arrays.items()}
    return Dataset.from_arrays(make_sites(coords, prefix), first_day, **arrays)
