"""Modular discrepancy correction and inverse-variance fusion.

Field observations are modelled as simulator output plus a smooth bias plus
noise. The simulator surrogate is trained on its own and frozen; the bias is
a second GP fitted to field-minus-surrogate residuals. Independently built
predictors are then combined with inverse-variance weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import CoverageError, EmptyInputError, InsufficientDataError, ShapeError
from .gp import FitConfig, GPModel, Prediction, _as_matrix, fit_gp
from .localgp import LocalConfig, LocalSurrogate

VARIANCE_FLOOR = 1e-10


@dataclass(frozen=True)
class BiasModel:
    """Frozen surrogate, discrepancy predictor and field-noise estimate.

    ``surrogate`` and ``discrepancy`` are anything with a
    ``predict(X, include_noise=...)`` method returning a :class:`Prediction`
    (a :class:`GPModel` or a :class:`LocalSurrogate`). ``surrogate`` may be
    ``None`` when only true simulator values will be supplied.
    """

    surrogate: Any
    discrepancy: Any
    noise_var: float


def _nn_noise_estimate(X, r) -> float:
    """Half the mean squared difference between nearest-neighbour residuals."""
    if len(r) < 2:
        return 0.0
    _, idx = cKDTree(X).query(X, k=2)
    return float(0.5 * np.mean((r - r[idx[:, 1]]) ** 2))


def fit_bias(field_X, field_y, surrogate_pred, surrogate=None, config: FitConfig | None = None,
             local: LocalConfig | None = None) -> BiasModel:
    """Fit the discrepancy to ``field_y - surrogate_pred.mean`` at the field sites.

    ``surrogate_pred`` is the (in-sample) surrogate prediction at each field
    site, or an array of true simulator values. The surrogate itself is not
    refitted. With ``local`` the discrepancy is a local approximate GP.
    """
    X = _as_matrix(field_X)
    y = np.asarray(field_y, dtype=float).ravel()
    mean = surrogate_pred.mean if isinstance(surrogate_pred, Prediction) else np.asarray(surrogate_pred, float)
    mean = np.asarray(mean, dtype=float).ravel()
    if not (len(X) == len(y) == len(mean)):
        raise ShapeError("field inputs, field outputs and surrogate predictions must align")
    if np.isnan(mean).any():
        raise CoverageError("surrogate prediction missing at some field sites",
                            np.nonzero(np.isnan(mean))[0].tolist())
    resid = y - mean
    if len(resid) < 5:
        raise InsufficientDataError(f"need at least 5 residuals to fit a discrepancy, got {len(resid)}")
    if local is not None:
        disc = LocalSurrogate(X, resid, local)
        noise = _nn_noise_estimate(X, resid)
    else:
        disc = fit_gp(X, resid, config)
        noise = disc.noise_variance
    return BiasModel(surrogate, disc, noise)


def bias_corrected_predict(bm: BiasModel, Xnew, true_sim=None, include_noise=True) -> Prediction:
    """Surrogate plus discrepancy, with summed variances.

    When ``true_sim`` (simulator values at every row of ``Xnew``) is given,
    the mean is ``true_sim + b(x)`` and the variance is the discrepancy's
    alone.
    """
    Xnew = _as_matrix(Xnew)
    b = bm.discrepancy.predict(Xnew, include_noise=include_noise)
    if true_sim is not None:
        sim = np.asarray(true_sim, dtype=float).ravel()
        if sim.shape[0] != Xnew.shape[0] or np.isnan(sim).any():
            missing = np.nonzero(np.isnan(sim))[0].tolist() if sim.shape[0] == Xnew.shape[0] else []
            raise CoverageError(f"true simulator values must cover all {Xnew.shape[0]} query rows", missing)
        return Prediction(sim + b.mean, b.variance)
    if bm.surrogate is None:
        raise CoverageError("bias model has no surrogate; true simulator values are required")
    s = bm.surrogate.predict(Xnew, include_noise=include_noise)
    return Prediction(s.mean + b.mean, s.variance + b.variance)


@dataclass(frozen=True)
class FusionInput:
    """Per-source means and variances (shape ``(n_sources, m)``) with labels."""

    means: np.ndarray
    variances: np.ndarray
    labels: tuple = ()

    @classmethod
    def from_predictions(cls, preds: Sequence[Prediction], labels=()) -> "FusionInput":
        if len(preds) == 0:
            raise EmptyInputError("nothing to fuse")
        return cls(np.stack([np.asarray(p.mean, float) for p in preds]),
                   np.stack([np.asarray(p.variance, float) for p in preds]), tuple(labels))


def ivw_fuse(inputs, floor=VARIANCE_FLOOR) -> Prediction:
    """Inverse-variance weighted mean; fused variance is ``1 / sum(1 / v_j)``.

    ``inputs`` is a :class:`FusionInput` or a sequence of predictions.
    Variances below ``floor`` are raised to it before inversion.
    """
    if not isinstance(inputs, FusionInput):
        inputs = FusionInput.from_predictions(list(inputs))
    m = np.asarray(inputs.means, dtype=float)
    v = np.asarray(inputs.variances, dtype=float)
    if m.size == 0 or m.shape[0] == 0:
        raise EmptyInputError("nothing to fuse")
    if m.shape != v.shape:
        raise ShapeError("means and variances must have the same shape")
    if m.shape[0] == 1:
        return Prediction(m[0].copy(), np.maximum(v[0], floor))
    w = 1.0 / np.maximum(v, floor)
    wsum = w.sum(axis=0)
    return Prediction((w * m).sum(axis=0) / wsum, 1.0 / wsum)
