"""Local approximate GP prediction.

Each query point gets its own small GP, trained by maximum likelihood on a
sub-design of ``n`` training points chosen near the query. Two sub-design
rules are provided: plain nearest neighbours, and a greedy search that
adds, one at a time, the candidate giving the largest reduction in
predictive variance at the query.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from .errors import FitError, InsufficientDataError, ShapeError
from .gp import FitConfig, KernelParams, Prediction, _as_matrix, correlation, fit_gp, predict_gp

NEAREST = "nn"
GREEDY = "alc"


@dataclass(frozen=True)
class LocalConfig:
    """Sub-design size and search rule for local prediction.

    ``method`` is ``"nn"`` (nearest neighbours) or ``"alc"`` (greedy
    variance reduction seeded with ``n_start`` neighbours, drawing candidates
    from the ``pool_factor * n`` nearest points).
    """

    n: int = 50
    method: str = NEAREST
    n_start: int = 6
    pool_factor: int = 10
    greedy_nugget: float = 1e-4
    fit: FitConfig = field(default_factory=lambda: FitConfig(n_starts=2))

    def __post_init__(self):
        if self.method not in (NEAREST, GREEDY):
            raise ValueError(f"method must be 'nn' or 'alc', got {self.method!r}")
        if self.n < 3:
            raise ValueError("sub-design size n must be at least 3")
        if self.method == GREEDY and not 1 <= self.n_start <= self.n:
            raise ValueError("need 1 <= n_start <= n for the greedy search")

    def describe(self) -> dict:
        return {"n": self.n, "method": self.method, "n_start": self.n_start,
                "pool_factor": self.pool_factor, "fit_starts": self.fit.n_starts}


def _criterion_params(Xpool) -> KernelParams:
    """Isotropic working parameters for the greedy search (sv = 1)."""
    iu = np.triu_indices(len(Xpool), 1)
    d2 = np.sum((Xpool[:, None, :] - Xpool[None, :, :]) ** 2, axis=-1)[iu]
    d2 = d2[d2 > 0]
    theta = float(np.quantile(d2, 0.1)) if d2.size else 1.0
    return KernelParams(np.full(Xpool.shape[1], theta), 1.0)


def local_variance(X, idx, x, params: KernelParams, nugget) -> float:
    """Noise-free predictive variance at ``x`` from design rows ``idx``, in units of sv."""
    Xd = X[np.asarray(idx)]
    A = correlation(Xd, Xd, params.lengthscales) + nugget * np.eye(len(Xd))
    k = correlation(Xd, x[None, :], params.lengthscales)[:, 0]
    return float(1.0 - k @ linalg.solve(A, k, assume_a="pos"))


def variance_reductions(X, design, candidates, x, params: KernelParams, nugget) -> np.ndarray:
    """Drop in predictive variance at ``x`` from adding each candidate (noisy) to ``design``."""
    ls = params.lengthscales
    Xd = X[design]
    Xc = X[candidates]
    A = correlation(Xd, Xd, ls) + nugget * np.eye(len(design))
    L = linalg.cholesky(A, lower=True)
    kx = correlation(Xd, x[None, :], ls)[:, 0]
    Kc = correlation(Xd, Xc, ls)
    vx = linalg.solve_triangular(L, kx, lower=True)
    Vc = linalg.solve_triangular(L, Kc, lower=True)
    cov_xc = correlation(x[None, :], Xc, ls)[0] - vx @ Vc
    var_c = 1.0 + nugget - np.einsum("ij,ij->j", Vc, Vc)
    return cov_xc ** 2 / np.maximum(var_c, 1e-300)


def select_subdesign(X, x, cfg: LocalConfig, tree: cKDTree | None = None, params: KernelParams | None = None):
    """Indices (ascending) of the local sub-design for query ``x``."""
    X = _as_matrix(X)
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != X.shape[1]:
        raise ShapeError(f"query has {x.shape[0]} coordinates, expected {X.shape[1]}")
    N = X.shape[0]
    if N < cfg.n:
        raise InsufficientDataError(f"sub-design size {cfg.n} exceeds the {N} available points")
    if tree is None:
        tree = cKDTree(X)
    if cfg.n == N:
        return np.arange(N)
    if cfg.method == NEAREST:
        _, idx = tree.query(x, k=cfg.n)
        return np.sort(np.atleast_1d(idx))
    pool_size = min(N, cfg.pool_factor * cfg.n)
    _, pool = tree.query(x, k=pool_size)
    pool = np.atleast_1d(pool)
    if params is None:
        params = _criterion_params(X[pool])
    design = list(pool[: cfg.n_start])
    remaining = list(pool[cfg.n_start:])
    while len(design) < cfg.n:
        red = variance_reductions(X, np.array(design), np.array(remaining), x, params, cfg.greedy_nugget)
        best = int(np.argmax(red))
        design.append(remaining.pop(best))
    return np.sort(np.array(design))


def _predict_one(X, y, xq, cfg, tree, include_noise):
    idx = select_subdesign(X, xq, cfg, tree)
    model = fit_gp(X[idx], y[idx], cfg.fit)
    pred = predict_gp(model, xq[None, :], include_noise=include_noise)
    return pred.mean[0], pred.variance[0]


def local_predict(X, y, Xnew, cfg: LocalConfig | None = None, include_noise=False, jobs=1) -> Prediction:
    """Per-query local GP predictions; queries are independent of each other.

    No ``N x N`` matrix is formed: each query costs ``O(n^3)``.
    """
    cfg = cfg or LocalConfig()
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float).ravel()
    Xnew = _as_matrix(Xnew, X.shape[1])
    if X.shape[0] != y.shape[0]:
        raise ShapeError("X and y have different numbers of rows")
    tree = cKDTree(X)

    def work(i):
        try:
            return _predict_one(X, y, Xnew[i], cfg, tree, include_noise)
        except FitError as exc:
            raise FitError(f"query {i}: {exc}", exc.diagnostics) from exc
        except InsufficientDataError as exc:
            raise InsufficientDataError(f"query {i}: {exc}") from exc

    m = Xnew.shape[0]
    if jobs > 1 and m > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            out = list(ex.map(work, range(m)))
    else:
        out = [work(i) for i in range(m)]
    arr = np.array(out, dtype=float).reshape(m, 2)
    return Prediction(arr[:, 0], arr[:, 1])


@dataclass(frozen=True)
class LocalSurrogate:
    """Training data plus settings; predicts with :func:`local_predict`."""

    X: np.ndarray
    y: np.ndarray
    cfg: LocalConfig = field(default_factory=LocalConfig)
    jobs: int = 1

    def __post_init__(self):
        X = np.array(_as_matrix(self.X))
        y = np.array(self.y, dtype=float).ravel()
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if len(y) < self.cfg.n:
            object.__setattr__(self, "cfg", LocalConfig(
                n=len(y), method=self.cfg.method, n_start=min(self.cfg.n_start, len(y)),
                pool_factor=self.cfg.pool_factor, greedy_nugget=self.cfg.greedy_nugget, fit=self.cfg.fit))

    @property
    def n(self) -> int:
        return len(self.y)

    def predict(self, Xnew, include_noise=False) -> Prediction:
        return local_predict(self.X, self.y, Xnew, self.cfg, include_noise=include_noise, jobs=self.jobs)
