"""Exact Gaussian-process regression with a separable Gaussian kernel.

The covariance between two inputs is

    k(x, x') = signal_variance * exp(-sum_k (x_k - x'_k)**2 / lengthscale_k)

and the training covariance adds ``signal_variance * nugget`` on the
diagonal. Responses are centred on their sample mean before fitting, so the
GP itself has zero mean. Hyperparameters are estimated by maximising the
likelihood over log-transformed parameters with L-BFGS-B from several
Latin-hypercube starting points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import linalg, optimize
from scipy.stats import qmc

from .errors import ConditioningError, FitError, InsufficientDataError, ShapeError

JITTER_FLOOR = 1e-8
JITTER_MAX = 1e-4
MODEL_FORMAT_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)
_PREDICT_CHUNK = 4096


@dataclass(frozen=True)
class KernelParams:
    lengthscales: np.ndarray
    signal_variance: float
    nugget: float = JITTER_FLOOR

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "nugget", float(self.nugget))
        if ls.ndim != 1 or not np.all(ls > 0):
            raise ValueError("lengthscales must be a vector of positive values")
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be positive")
        if not self.nugget >= 0:
            raise ValueError("nugget must be nonnegative")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    def to_log(self) -> np.ndarray:
        return np.concatenate([np.log(self.lengthscales), [math.log(self.signal_variance), math.log(self.nugget)]])

    @classmethod
    def from_log(cls, phi) -> "KernelParams":
        phi = np.asarray(phi, dtype=float)
        return cls(np.exp(phi[:-2]), math.exp(phi[-2]), math.exp(phi[-1]))

    def to_dict(self) -> dict:
        return {"lengthscales": self.lengthscales.tolist(),
                "signal_variance": self.signal_variance,
                "nugget": self.nugget}

    @classmethod
    def from_dict(cls, d) -> "KernelParams":
        return cls(np.asarray(d["lengthscales"]), d["signal_variance"], d["nugget"])


@dataclass(frozen=True)
class Prediction:
    """Predictive mean and variance (and optionally the full covariance)."""

    mean: np.ndarray
    variance: np.ndarray
    cov: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "variance", np.asarray(self.variance, dtype=float))
        if self.mean.shape != self.variance.shape:
            raise ShapeError("mean and variance must have the same shape")

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def __len__(self):
        return len(self.mean)

    def __getitem__(self, idx) -> "Prediction":
        return Prediction(self.mean[idx], self.variance[idx])


def _as_matrix(X, p=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :] if p is not None and X.shape[0] == p else X[:, None]
    if X.ndim != 2:
        raise ShapeError(f"inputs must be a 2-d array, got shape {X.shape}")
    if p is not None and X.shape[1] != p:
        raise ShapeError(f"inputs have {X.shape[1]} columns, expected {p}")
    return X


def correlation(X1, X2, lengthscales) -> np.ndarray:
    """Correlation matrix ``exp(-sum_k d_k**2 / lengthscale_k)``."""
    ls = np.asarray(lengthscales, dtype=float)
    X1 = _as_matrix(X1, len(ls))
    X2 = _as_matrix(X2, len(ls))
    d2 = np.zeros((X1.shape[0], X2.shape[0]))
    for k in range(len(ls)):
        diff = X1[:, k, None] - X2[None, :, k]
        d2 += diff * diff / ls[k]
    return np.exp(-d2)


def kernel(x, x2, params: KernelParams) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != (params.dim,) or x2.shape != (params.dim,):
        raise ShapeError(f"kernel inputs must have length {params.dim}")
    return params.signal_variance * math.exp(-float(np.sum((x - x2) ** 2 / params.lengthscales)))


def kernel_matrix(X1, X2, params: KernelParams) -> np.ndarray:
    """Cross-covariance without the nugget."""
    return params.signal_variance * correlation(X1, X2, params.lengthscales)


def _factor(R, nugget, allow_jitter=True):
    """Cholesky of ``R + (nugget + jitter) I`` with escalating jitter.

    Returns ``(L, jitter)``. With ``allow_jitter=False`` a failure at the
    given nugget is immediately a :class:`ConditioningError`.
    """
    n = R.shape[0]
    ladder = [0.0]
    if allow_jitter:
        j = JITTER_FLOOR
        while j <= JITTER_MAX * (1 + 1e-9):
            ladder.append(j)
            j *= 10.0
    eye = np.eye(n)
    for jit in ladder:
        A = R + (nugget + jit) * eye
        try:
            L = linalg.cholesky(A, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        d = np.diag(L)
        if not np.all(np.isfinite(d)) or d.min() ** 2 <= n * np.finfo(float).eps * np.max(np.diag(A)):
            continue
        return L, jit
    raise ConditioningError(
        f"covariance not positive definite (n={n}, nugget={nugget:g}, jitter up to {ladder[-1]:g})")


def _chol_inverse(L) -> np.ndarray:
    """Inverse of ``L L'`` from its lower Cholesky factor."""
    inv, info = linalg.lapack.dpotri(L, lower=1)
    if info != 0:
        raise ConditioningError("inverse from Cholesky factor failed")
    return np.tril(inv) + np.tril(inv, -1).T


def _sq_diffs(X) -> np.ndarray:
    return np.stack([(X[:, k, None] - X[None, :, k]) ** 2 for k in range(X.shape[1])])


def _nll_log(phi, X, yc, D=None, jitter_ok=True):
    """Negative log likelihood and gradient in log-parameter coordinates."""
    n, p = X.shape
    theta = np.exp(phi[:p])
    sv = math.exp(phi[p])
    g = math.exp(phi[p + 1])
    if D is None:
        D = _sq_diffs(X)
    R = np.exp(-np.tensordot(1.0 / theta, D, axes=1))
    L, jit = _factor(R, g, allow_jitter=jitter_ok and g > 0)
    a = linalg.cho_solve((L, True), yc, check_finite=False)
    quad = float(yc @ a)
    logdet = n * math.log(sv) + 2.0 * float(np.sum(np.log(np.diag(L))))
    value = 0.5 * quad / sv + 0.5 * logdet + 0.5 * n * _LOG_2PI
    Ainv = _chol_inverse(L)
    grad = np.empty(p + 2)
    aa = np.outer(a, a) / sv
    W = Ainv - aa
    for k in range(p):
        M = R * D[k] / theta[k]
        grad[k] = 0.5 * float(np.sum(W * M))
    grad[p] = 0.5 * n - 0.5 * quad / sv
    grad[p + 1] = 0.5 * g * (float(np.trace(Ainv)) - float(a @ a) / sv)
    return value, grad


def neg_log_likelihood(X, y, params: KernelParams, center=True):
    """``(value, gradient)`` of the centred-response negative log likelihood.

    The gradient is with respect to ``params.to_log()``, i.e.
    ``(log lengthscales..., log signal_variance, log nugget)``.
    """
    X = _as_matrix(X, params.dim)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ShapeError("X and y have different numbers of rows")
    if X.shape[0] < 2:
        raise InsufficientDataError("need at least two observations")
    yc = y - y.mean() if center else y
    with np.errstate(divide="ignore"):
        phi = np.log(np.concatenate([params.lengthscales, [params.signal_variance, params.nugget]]))
    return _nll_log(phi, X, yc)


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings for :func:`fit_gp`.

    ``init`` seeds the first start (warm start); the remaining
    ``n_starts - 1`` come from a Latin hypercube over the start box. With
    ``optimize=False`` the model is conditioned on ``init`` as given.
    """

    n_starts: int = 5
    seed: int = 0
    maxiter: int = 200
    init: KernelParams | None = None
    min_n: int = 5
    optimize: bool = True
    ftol: float = 2.220446049250313e-09

    def with_seed(self, seed) -> "FitConfig":
        return replace(self, seed=int(seed))


def _scales(X, yc):
    """Per-dimension squared-distance scale and response variance scale."""
    n = X.shape[0]
    if n > 400:
        idx = np.random.default_rng(0).choice(n, 400, replace=False)
        Xs = X[np.sort(idx)]
    else:
        Xs = X
    iu = np.triu_indices(Xs.shape[0], 1)
    dscale = np.empty(X.shape[1])
    for k in range(X.shape[1]):
        d2 = ((Xs[:, k, None] - Xs[None, :, k]) ** 2)[iu]
        d2 = d2[d2 > 0]
        dscale[k] = float(np.median(d2)) if d2.size else 1.0
    v = float(np.var(yc))
    vscale = v if v > 1e-12 * (1.0 + float(np.mean(yc ** 2))) and v > 0 else 1.0
    return dscale, vscale


def _bounds_and_box(X, yc):
    dscale, vscale = _scales(X, yc)
    lo = np.concatenate([np.log(1e-3 * dscale), [math.log(1e-6 * vscale), math.log(JITTER_FLOOR)]])
    hi = np.concatenate([np.log(1e3 * dscale), [math.log(1e4 * vscale), math.log(1e2)]])
    start_lo = np.concatenate([np.log(1e-2 * dscale), [math.log(1e-2 * vscale), math.log(1e-4)]])
    start_hi = np.concatenate([np.log(1e2 * dscale), [math.log(1e2 * vscale), math.log(1.0)]])
    return lo, hi, start_lo, start_hi


@dataclass(frozen=True)
class GPModel:
    """Trained GP: data, hyperparameters and the factorised training covariance.

    ``chol @ chol.T`` equals ``signal_variance * (R + (nugget + jitter) I)``
    and ``alpha`` solves that system for ``y - mean_offset``.
    """

    X: np.ndarray
    y: np.ndarray
    params: KernelParams
    chol: np.ndarray
    alpha: np.ndarray
    mean_offset: float
    jitter: float = 0.0
    nll: float = float("nan")
    diagnostics: tuple = field(default=(), compare=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def effective_nugget(self) -> float:
        return self.params.nugget + self.jitter

    @property
    def noise_variance(self) -> float:
        return self.params.signal_variance * self.effective_nugget

    def predict(self, Xnew, include_noise=False, full_cov=False) -> Prediction:
        return predict_gp(self, Xnew, include_noise=include_noise, full_cov=full_cov)

    def covariance(self) -> np.ndarray:
        return self.chol @ self.chol.T

    def to_dict(self) -> dict:
        return {
            "format": "solarfusion.GPModel",
            "version": MODEL_FORMAT_VERSION,
            "params": self.params.to_dict(),
            "mean_offset": self.mean_offset,
            "jitter": self.jitter,
            "X": self.X.tolist(),
            "y": self.y.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "GPModel":
        if d.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')!r}")
        params = KernelParams.from_dict(d["params"])
        return condition_gp(np.asarray(d["X"]), np.asarray(d["y"]), params,
                            mean_offset=d["mean_offset"], jitter=d.get("jitter", 0.0))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GPModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def condition_gp(X, y, params: KernelParams, mean_offset=None, jitter=None) -> GPModel:
    """Build a :class:`GPModel` at fixed hyperparameters (no optimization)."""
    X = _as_matrix(X, params.dim)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ShapeError("X and y have different numbers of rows")
    if X.shape[0] < 1:
        raise InsufficientDataError("need at least one observation")
    offset = float(np.mean(y)) if mean_offset is None else float(mean_offset)
    R = correlation(X, X, params.lengthscales)
    if jitter is None:
        L, jit = _factor(R, params.nugget, allow_jitter=params.nugget > 0)
    else:
        L, jit = _factor(R + jitter * np.eye(len(R)), params.nugget, allow_jitter=False)
        jit = float(jitter)
    sv = params.signal_variance
    yc = y - offset
    a = linalg.cho_solve((L, True), yc, check_finite=False)
    X = X.copy()
    y = y.copy()
    chol = math.sqrt(sv) * L
    for arr in (X, y, chol, a):
        arr.setflags(write=False)
    alpha = a / sv
    alpha.setflags(write=False)
    n = len(y)
    nll = 0.5 * float(yc @ a) / sv + 0.5 * (n * math.log(sv) + 2 * float(np.sum(np.log(np.diag(L))))) \
        + 0.5 * n * _LOG_2PI
    return GPModel(X, y, params, chol, alpha, offset, jit, nll)


def fit_gp(X, y, config: FitConfig | None = None) -> GPModel:
    """Maximum-likelihood GP fit with multi-start L-BFGS-B on log parameters.

    The best of ``config.n_starts`` local optima is kept. Raises
    :class:`FitError` when every start fails.
    """
    config = config or FitConfig()
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ShapeError("X and y have different numbers of rows")
    if X.shape[0] < config.min_n:
        raise InsufficientDataError(f"need at least {config.min_n} observations, got {X.shape[0]}")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
        raise ValueError("X and y must be finite (drop missing values first)")
    offset = float(np.mean(y))
    if not config.optimize:
        if config.init is None:
            raise ValueError("optimize=False needs init parameters")
        return condition_gp(X, y, config.init, mean_offset=offset)
    yc = y - offset
    p = X.shape[1]
    lo, hi, slo, shi = _bounds_and_box(X, yc)
    D = _sq_diffs(X)
    n_lhs = config.n_starts - (1 if config.init is not None else 0)
    starts = []
    if config.init is not None:
        if config.init.dim != p:
            raise ShapeError("init params dimension does not match X")
        starts.append(np.clip(config.init.to_log(), lo, hi))
    if n_lhs > 0:
        u = qmc.LatinHypercube(d=p + 2, seed=np.random.default_rng(config.seed)).random(n_lhs)
        starts.extend(slo + u * (shi - slo))
    diagnostics = []
    best = None
    for i, phi0 in enumerate(starts):
        try:
            res = optimize.minimize(_nll_log, phi0, args=(X, yc, D), jac=True, method="L-BFGS-B",
                                    bounds=list(zip(lo, hi)), options={"maxiter": config.maxiter, "ftol": config.ftol})
            if not np.isfinite(res.fun):
                raise FloatingPointError("non-finite likelihood")
            diagnostics.append({"start": i, "nll": float(res.fun), "nit": int(res.nit),
                                "message": str(res.message)})
            if best is None or res.fun < best.fun:
                best = res
        except (ConditioningError, FloatingPointError, ValueError, linalg.LinAlgError) as exc:
            diagnostics.append({"start": i, "error": f"{type(exc).__name__}: {exc}"})
    if best is None:
        raise FitError(f"all {len(starts)} optimizer starts failed", diagnostics)
    params = KernelParams.from_log(best.x)
    model = condition_gp(X, y, params, mean_offset=offset)
    return replace(model, diagnostics=tuple(diagnostics))


def predict_gp(model: GPModel, Xnew, include_noise=False, full_cov=False) -> Prediction:
    """Predictive mean and variance at the rows of ``Xnew``.

    ``include_noise`` adds the (effective) nugget variance, giving the
    predictive distribution of a new noisy observation.
    """
    p = model.params.dim
    Xnew = _as_matrix(Xnew, p)
    sv = model.params.signal_variance
    noise = model.noise_variance if include_noise else 0.0
    m = Xnew.shape[0]
    mean = np.empty(m)
    var = np.empty(m)
    cov = None
    if full_cov:
        k = kernel_matrix(Xnew, model.X, model.params)
        v = linalg.solve_triangular(model.chol, k.T, lower=True, check_finite=False)
        mean[:] = model.mean_offset + k @ model.alpha
        cov = kernel_matrix(Xnew, Xnew, model.params) - v.T @ v
        cov = 0.5 * (cov + cov.T) + noise * np.eye(m)
        var[:] = np.maximum(np.diag(cov), 0.0)
        return Prediction(mean, var, cov)
    for start in range(0, m, _PREDICT_CHUNK):
        sl = slice(start, min(m, start + _PREDICT_CHUNK))
        k = kernel_matrix(Xnew[sl], model.X, model.params)
        v = linalg.solve_triangular(model.chol, k.T, lower=True, check_finite=False)
        mean[sl] = model.mean_offset + k @ model.alpha
        var[sl] = np.maximum(sv - np.einsum("ij,ij->j", v, v), 0.0) + noise
    return Prediction(mean, var)
