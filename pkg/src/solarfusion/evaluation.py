"""Accuracy metrics, paired significance tests and comparison reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg, stats

from .errors import ConditioningError, ShapeError
from .gp import Prediction

Z95 = 1.959963984540054
LOG_FLOOR = 1e-12


def _pair(pred, obs):
    pred = np.asarray(pred, dtype=float).ravel()
    obs = np.asarray(obs, dtype=float).ravel()
    if pred.shape != obs.shape:
        raise ShapeError(f"length mismatch: {pred.size} predictions, {obs.size} observations")
    if pred.size == 0:
        raise ShapeError("need at least one prediction")
    return pred, obs


def rmse(pred, obs) -> float:
    pred, obs = _pair(pred, obs)
    return math.sqrt(float(np.mean((pred - obs) ** 2)))


def coverage95(pred: Prediction, obs) -> float:
    """Fraction of ``obs`` inside ``mean +/- 1.959964 sd``."""
    mean, obs = _pair(pred.mean, obs)
    var = np.asarray(pred.variance, dtype=float).ravel()
    if np.any(var < 0):
        raise ValueError("variances must be nonnegative")
    half = Z95 * np.sqrt(var)
    return float(np.mean(np.abs(obs - mean) <= half))


def paired_log_t_test(errors_a, errors_b) -> float:
    """One-tailed paired t-test on log squared errors.

    Tests ``H0: mean log error of A >= that of B`` against ``H1: A < B``;
    small p-values favour A. Zeros are floored at 1e-12 before the log. When
    the differences have zero variance the p-value is 1 if the mean
    difference is nonnegative and 0 otherwise.
    """
    a = np.asarray(errors_a, dtype=float).ravel()
    b = np.asarray(errors_b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ShapeError("error vectors must have equal length")
    if a.size < 2:
        raise ShapeError("need at least two paired errors")
    d = np.log(np.maximum(a, LOG_FLOOR)) - np.log(np.maximum(b, LOG_FLOOR))
    mean = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    if sd == 0.0 or sd <= 1e-14 * max(1.0, abs(mean)):
        return 1.0 if mean >= 0 else 0.0
    t = mean / (sd / math.sqrt(d.size))
    return float(stats.t.cdf(t, df=d.size - 1))


def proper_score(mean, cov, obs) -> float:
    """``-log|C| - (y - m)' C^{-1} (y - m)``; higher is better."""
    m = np.atleast_1d(np.asarray(mean, dtype=float))
    y = np.atleast_1d(np.asarray(obs, dtype=float))
    C = np.atleast_2d(np.asarray(cov, dtype=float))
    if m.shape != y.shape or C.shape != (m.size, m.size):
        raise ShapeError("mean, covariance and observations are not conformable")
    try:
        L = linalg.cholesky(C, lower=True)
    except linalg.LinAlgError:
        raise ConditioningError("predictive covariance is not positive definite") from None
    r = linalg.solve_triangular(L, y - m, lower=True)
    return float(-2.0 * np.sum(np.log(np.diag(L))) - r @ r)


@dataclass
class FoldResult:
    """Accuracy on one held-out site."""

    site: str
    rmse: float
    covered_frac: float
    log_sq_errors: np.ndarray
    n_obs: int = 0
    failed: bool = False
    error: str = ""

    @property
    def mse(self) -> float:
        return self.rmse ** 2

    @classmethod
    def from_predictions(cls, site, pred: Prediction, obs) -> "FoldResult":
        mean = np.asarray(pred.mean, dtype=float).ravel()
        var = np.asarray(pred.variance, dtype=float).ravel()
        obs = np.asarray(obs, dtype=float).ravel()
        ok = ~np.isnan(obs) & ~np.isnan(mean)
        if not ok.any():
            return cls.failure(site, "no observations to score")
        sq = (mean[ok] - obs[ok]) ** 2
        cov = float("nan")
        if not np.isnan(var[ok]).any():
            cov = coverage95(Prediction(mean[ok], var[ok]), obs[ok])
        return cls(site, rmse(mean[ok], obs[ok]), cov, np.log(np.maximum(sq, LOG_FLOOR)), int(ok.sum()))

    @classmethod
    def failure(cls, site, message) -> "FoldResult":
        return cls(site, float("nan"), float("nan"), np.empty(0), 0, True, message)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["log_sq_errors"] = self.log_sq_errors.tolist()
        return d

    @classmethod
    def from_dict(cls, d) -> "FoldResult":
        d = dict(d)
        d["log_sq_errors"] = np.asarray(d["log_sq_errors"], dtype=float)
        return cls(**d)


def _paired_mse(fa, fb):
    """Per-fold MSEs for folds that succeeded in both result lists (matched by site)."""
    mb = {f.site: f.mse for f in fb if not f.failed}
    pairs = [(f.mse, mb[f.site]) for f in fa if not f.failed and f.site in mb]
    if len(pairs) < 2:
        return None
    a, b = zip(*pairs)
    return np.array(a), np.array(b)


def compare_folds(fa, fb) -> float:
    """p-value that result list ``fa`` has lower log squared error than ``fb``."""
    ab = _paired_mse(fa, fb)
    return float("nan") if ab is None else paired_log_t_test(*ab)


@dataclass
class ReportRow:
    row: str
    target: str
    comparator: str
    rmse: float
    cov95: float
    p: float = float("nan")
    ref_row: str = ""
    p_cross: float = float("nan")
    n_folds: int = 0
    n_failed: int = 0
    local: bool = False


@dataclass
class ComparisonReport:
    rows: list
    pairwise: list = field(default_factory=list)
    folds: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def row(self, name) -> ReportRow:
        for r in self.rows:
            if r.comparator == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "pairwise": self.pairwise,
            "folds": {k: [f.to_dict() for f in v] for k, v in self.folds.items()},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d) -> "ComparisonReport":
        return cls([ReportRow(**r) for r in d["rows"]], d.get("pairwise", []),
                   {k: [FoldResult.from_dict(f) for f in v] for k, v in d.get("folds", {}).items()},
                   d.get("metadata", {}))

    def to_json(self) -> str:
        return json.dumps(_nan_to_none(self.to_dict()), indent=1, sort_keys=False)

    @classmethod
    def from_json(cls, text) -> "ComparisonReport":
        return cls.from_dict(_none_to_nan(json.loads(text)))

    @property
    def has_cross(self) -> bool:
        return any(not math.isnan(r.p_cross) for r in self.rows)

    def columns(self) -> list:
        cols = ["target", "comparator", "rmse", "cov95", "p", "ref_row"]
        return cols + ["p_cross"] if self.has_cross else cols

    def table_rows(self) -> list:
        return [{c: getattr(r, c) for c in self.columns()} for r in self.rows]

    def to_text(self) -> str:
        cols = self.columns()
        cells = [cols] + [[_cell(getattr(r, c)) for c in cols] for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
        lines = ["  ".join(v.rjust(w) if i >= 2 else v.ljust(w) for i, (v, w) in enumerate(zip(row, widths)))
                 for row in cells]
        return "\n".join(line.rstrip() for line in lines) + "\n"


def _cell(v):
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        if v != 0 and abs(v) < 1e-3:
            return f"{v:.3e}"
        return f"{v:.4f}"
    return str(v)


def _nan_to_none(o):
    if isinstance(o, float) and math.isnan(o):
        return None
    if isinstance(o, dict):
        return {k: _nan_to_none(v) for k, v in o.items()}
    if isinstance(o, list):
        return [_nan_to_none(v) for v in o]
    return o


_FLOAT_KEYS = {"rmse", "cov95", "p", "p_cross", "covered_frac"}


def _none_to_nan(o, key=None):
    if o is None and key in _FLOAT_KEYS:
        return float("nan")
    if isinstance(o, dict):
        return {k: _none_to_nan(v, k) for k, v in o.items()}
    if isinstance(o, list):
        return [_none_to_nan(v, key) for v in o]
    return o


def summarize(comparators, results, baseline: ComparisonReport | None = None, metadata=None) -> ComparisonReport:
    """Assemble a report from per-comparator fold results.

    Each row's ``p`` compares it with the lowest-RMSE earlier row that has the
    same target and the same global/local setting. When both the global and
    the local variant of a row are present, the better is tested against the
    worse and recorded in ``pairwise``. ``baseline`` adds the ``p_cross``
    column: the same comparator against the baseline run's folds.
    """
    rows = []
    pairwise = []
    for c in comparators:
        folds = results[c.name]
        ok = [f for f in folds if not f.failed]
        rm = float(np.mean([f.rmse for f in ok])) if ok else float("nan")
        covs = [f.covered_frac for f in ok if not math.isnan(f.covered_frac)]
        cv = float(np.mean(covs)) if covs and len(covs) == len(ok) else float("nan")
        rows.append(ReportRow(c.row, c.target.value, c.name, rm, cv, n_folds=len(folds),
                              n_failed=len(folds) - len(ok), local=c.local))
    by_name = {c.name: c for c in comparators}
    for i, r in enumerate(rows):
        earlier = [q for q in rows[:i] if q.target == r.target and q.local == r.local and not math.isnan(q.rmse)]
        if earlier and not math.isnan(r.rmse):
            ref = min(earlier, key=lambda q: q.rmse)
            r.p = compare_folds(results[r.comparator], results[ref.comparator])
            r.ref_row = ref.row
            pairwise.append({"a": r.comparator, "b": ref.comparator, "p": r.p, "kind": "row"})
    for r in rows:
        if r.local:
            continue
        twin = by_name.get(r.comparator + "@local")
        if twin is None:
            continue
        tr = next(q for q in rows if q.comparator == twin.name)
        if math.isnan(r.rmse) or math.isnan(tr.rmse):
            continue
        best, worst = (tr, r) if tr.rmse <= r.rmse else (r, tr)
        pairwise.append({"a": best.comparator, "b": worst.comparator, "kind": "locvglob",
                         "p": compare_folds(results[best.comparator], results[worst.comparator])})
    if baseline is not None:
        for r in rows:
            if r.comparator in baseline.folds:
                r.p_cross = compare_folds(results[r.comparator], baseline.folds[r.comparator])
                pairwise.append({"a": r.comparator, "b": f"baseline:{r.comparator}", "p": r.p_cross,
                                 "kind": "cross"})
    return ComparisonReport(rows, pairwise, {c.name: results[c.name] for c in comparators}, dict(metadata or {}))
