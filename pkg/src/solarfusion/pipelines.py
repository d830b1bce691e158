"""Comparator registry and leave-one-site-out cross-validation.

A comparator names a complete prediction pipeline (which data it trains on,
which target it predicts and how the pieces are combined). ``loo_cv`` holds
out each station site in turn, refits every stage of the pipeline on the
remaining sites and scores the prediction at the held-out site.

Two resolutions are supported. ``"aggregated"`` works with per-site time
means and plain GPs; ``"daily"`` uses the seasonal model and scores every
day of the held-out site.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .calibrate import VARIANCE_FLOOR, bias_corrected_predict, fit_bias
from .data import Dataset, SourceId
from .errors import InfeasibleComparatorError, InsufficientDataError, SolarFusionError
from .evaluation import FoldResult, summarize
from .gp import FitConfig, GPModel, Prediction, fit_gp
from .localgp import LocalConfig, LocalSurrogate
from .seasonal import MIN_OBS, TIME_CONVENTION, fit_coeff_field, seasonal_bias_pipeline, seasonal_predict

AGGREGATED = "aggregated"
DAILY = "daily"
RESOLUTIONS = (AGGREGATED, DAILY)
REFIT_MODES = ("full", "warm", "fixed")
LOCAL_SUFFIX = "@local"

FIELD, SIM_A, SIM_B = SourceId.FIELD, SourceId.SIM_A, SourceId.SIM_B


@dataclass(frozen=True)
class Comparator:
    """One row of a comparison table.

    ``kind`` is one of ``mean`` (training mean), ``gp`` (surrogate of
    ``source`` predicting ``source``), ``nob`` (surrogate of ``source``
    predicting the field), ``hat+b`` (surrogate plus discrepancy),
    ``true-nob`` (the simulator output itself), ``true+b`` (simulator output
    plus discrepancy), ``ivw-hat`` and ``ivw`` (fusion of the field GP with
    the two corrected simulators, emulated or true).
    """

    key: str
    row: str
    label: str
    target: SourceId
    kind: str
    source: SourceId | None = None
    local: bool = False

    @property
    def name(self) -> str:
        return self.key + (LOCAL_SUFFIX if self.local else "")

    @property
    def needs_true_sim(self) -> bool:
        return self.kind in ("true-nob", "true+b", "ivw")

    def localized(self) -> "Comparator":
        return replace(self, local=True)


REGISTRY = {c.key: c for c in (
    Comparator("field-mean", "0", "mean(field)", FIELD, "mean", FIELD),
    Comparator("field-hat", "1", "field^", FIELD, "gp", FIELD),
    Comparator("simA-hat", "2", "simA^", SIM_A, "gp", SIM_A),
    Comparator("simB-hat", "3", "simB^", SIM_B, "gp", SIM_B),
    Comparator("simB-hat-nob", "4", "simB^ no b", FIELD, "nob", SIM_B),
    Comparator("simA-hat-nob", "5", "simA^ no b", FIELD, "nob", SIM_A),
    Comparator("simA-hat+b", "6", "simA^ + b^", FIELD, "hat+b", SIM_A),
    Comparator("simB-hat+b", "6b", "simB^ + b^", FIELD, "hat+b", SIM_B),
    Comparator("ivw-hat", "7", "IVW^", FIELD, "ivw-hat"),
    Comparator("simB-nob", "8", "simB no b", FIELD, "true-nob", SIM_B),
    Comparator("simA-nob", "9", "simA no b", FIELD, "true-nob", SIM_A),
    Comparator("simA+b", "10", "simA + b", FIELD, "true+b", SIM_A),
    Comparator("simB+b", "10b", "simB + b", FIELD, "true+b", SIM_B),
    Comparator("ivw", "11", "IVW", FIELD, "ivw"),
)}

DEFAULT_COMPARATORS = tuple(k for k in REGISTRY if k != "field-mean")


def get_comparator(name) -> Comparator:
    """Look up a registry entry; a trailing ``@local`` selects the local variant."""
    if isinstance(name, Comparator):
        return name
    name = str(name).strip()
    local = name.endswith(LOCAL_SUFFIX)
    key = name[: -len(LOCAL_SUFFIX)] if local else name
    if key not in REGISTRY:
        raise KeyError(f"unknown comparator {name!r}; known: {', '.join(REGISTRY)}")
    c = REGISTRY[key]
    return c.localized() if local else c


def comparator_list(names) -> list:
    if isinstance(names, (str, Comparator)):
        names = [names]
    return [get_comparator(n) for n in names]


def fuse_available(preds, floor=VARIANCE_FLOOR) -> Prediction:
    """Inverse-variance fusion that skips components with a missing mean."""
    m = np.stack([np.asarray(p.mean, float) for p in preds])
    v = np.stack([np.asarray(p.variance, float) for p in preds])
    ok = ~np.isnan(m) & ~np.isnan(v)
    w = np.where(ok, 1.0 / np.maximum(np.where(ok, v, 1.0), floor), 0.0)
    wsum = w.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(wsum > 0, (w * np.where(ok, m, 0.0)).sum(axis=0) / wsum, np.nan)
        var = np.where(wsum > 0, 1.0 / wsum, np.nan)
    return Prediction(mean, var)


@dataclass
class Tuning:
    """Per-stage optimizer settings.

    ``refit="full"`` optimizes every fold from scratch. ``"warm"`` starts a
    single optimization at the full-data estimate for the same stage.
    ``"fixed"`` reuses the full-data estimate with no optimization (a fast
    approximation, not a faithful refit).
    """

    base: FitConfig = field(default_factory=FitConfig)
    refit: str = "full"
    book: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.refit not in REFIT_MODES:
            raise ValueError(f"refit must be one of {REFIT_MODES}, got {self.refit!r}")

    def config(self, key) -> FitConfig:
        init = self.book.get(key)
        if self.refit == "full" or init is None:
            return self.base
        if self.refit == "warm":
            return replace(self.base, init=init, n_starts=1)
        return replace(self.base, init=init, n_starts=1, optimize=False)


class _Fold:
    """Lazily fitted pipeline stages for one training set."""

    def __init__(self, tuning: Tuning, local: LocalConfig | None, jobs=1):
        self.tuning = tuning
        self.local = local
        self.jobs = jobs
        self.cache = {}
        self.params = {}

    def _get(self, key, build):
        if key not in self.cache:
            self.cache[key] = build()
        return self.cache[key]

    def predict(self, comp: Comparator, Q, sim_at, t=None) -> Prediction:
        loc = comp.local
        if loc and self.local is None:
            raise ValueError(f"{comp.name} needs a local configuration")
        k = comp.kind
        if k == "mean":
            return self.mean_pred(comp.source, Q, t)
        if k in ("gp", "nob"):
            return self.base(comp.source, Q, t, loc)
        if k == "hat+b":
            return self.corrected(comp.source, Q, t, loc)
        if k == "true-nob":
            s = np.asarray(sim_at[comp.source], dtype=float)
            return Prediction(s, np.full(s.shape, self.nob_var(comp.source)))
        if k == "true+b":
            return self.true_corrected(comp.source, Q, t, sim_at[comp.source], loc)
        if k == "ivw-hat":
            return fuse_available([self.base(FIELD, Q, t, loc)] +
                                  [self.corrected(s, Q, t, loc) for s in (SIM_A, SIM_B)])
        if k == "ivw":
            return fuse_available([self.base(FIELD, Q, t, loc)] +
                                  [self.true_corrected(s, Q, t, sim_at[s], loc) for s in (SIM_A, SIM_B)])
        raise ValueError(f"unknown comparator kind {k!r}")


class AggregatedFold(_Fold):
    """Stages fitted to per-site time means at the rows flagged in ``train``."""

    def __init__(self, X, values, train, tuning, local=None, jobs=1):
        super().__init__(tuning, local, jobs)
        self.X = X
        self.values = values
        self.train = np.asarray(train, dtype=bool)

    def _rows(self, *srcs):
        ok = self.train.copy()
        for s in srcs:
            ok &= ~np.isnan(self.values[s])
        return np.nonzero(ok)[0]

    def _fit(self, key, X, y):
        m = fit_gp(X, y, self.tuning.config(key))
        self.params[key] = m.params
        return m

    def surrogate(self, src, local=False):
        def build():
            i = self._rows(src)
            if local:
                return LocalSurrogate(self.X[i], self.values[src][i], self.local, self.jobs)
            return self._fit(("gp", src.value), self.X[i], self.values[src][i])
        return self._get(("gp", src.value, local), build)

    def bias(self, sim, true, local=False):
        mode = "true" if true else "hat"

        def build():
            if true:
                i = self._rows(FIELD, sim)
                sur, pred = None, self.values[sim][i]
            else:
                i = self._rows(FIELD)
                sur = self.surrogate(sim, local)
                pred = sur.predict(self.X[i])
            bm = fit_bias(self.X[i], self.values[FIELD][i], pred, surrogate=sur,
                          config=self.tuning.config(("bias", mode, sim.value)),
                          local=self.local if local else None)
            if isinstance(bm.discrepancy, GPModel):
                self.params[("bias", mode, sim.value)] = bm.discrepancy.params
            return bm
        return self._get(("bias", mode, sim.value, local), build)

    def mean_pred(self, src, Q, t=None):
        y = self.values[src][self._rows(src)]
        if len(y) < 2:
            raise InsufficientDataError("need two training values for the mean predictor")
        m = len(Q)
        return Prediction(np.full(m, float(np.mean(y))), np.full(m, float(np.var(y, ddof=1))))

    def base(self, src, Q, t=None, local=False):
        return self.surrogate(src, local).predict(Q, include_noise=True)

    def corrected(self, sim, Q, t=None, local=False):
        return bias_corrected_predict(self.bias(sim, False, local), Q, include_noise=True)

    def true_corrected(self, sim, Q, t, sim_vals, local=False):
        return bias_corrected_predict(self.bias(sim, True, local), Q, true_sim=sim_vals, include_noise=True)

    def nob_var(self, sim):
        i = self._rows(FIELD, sim)
        if len(i) == 0:
            raise InsufficientDataError("no training sites with both field and simulator values")
        return float(np.mean((self.values[FIELD][i] - self.values[sim][i]) ** 2))


class DailyFold(_Fold):
    """Seasonal stages fitted to the daily series of the sites in ``idx``."""

    def __init__(self, ds: Dataset, idx, tuning, min_obs=MIN_OBS, jobs=1):
        super().__init__(tuning, None, jobs)
        self.ds = ds
        self.idx = np.asarray(idx, dtype=int)
        self.min_obs = min_obs

    def _record(self, prefix, cf):
        for k, m in enumerate(cf.models):
            self.params[prefix + (k,)] = m.params

    def field_of(self, src):
        def build():
            key = ("cf", src.value)
            cf = fit_coeff_field(self.ds, src, self.idx, lambda k: self.tuning.config(key + (k,)), self.min_obs,
                                 jobs=self.jobs)
            self._record(key, cf)
            return cf
        return self._get(("cf", src.value), build)

    def bias(self, sim, true):
        mode = "true" if true else "hat"

        def build():
            key = ("disc", mode, sim.value)
            sbm = seasonal_bias_pipeline(self.ds, sim, self.idx, lambda k: self.tuning.config(key + (k,)),
                                         self.min_obs, true_sim=true,
                                         surrogate=None if true else self.field_of(sim), jobs=self.jobs)
            self._record(key, sbm.discrepancy)
            return sbm
        return self._get(("sbm", mode, sim.value), build)

    def mean_pred(self, src, Q, t):
        y = self.ds[src][self.idx]
        y = y[~np.isnan(y)]
        if len(y) < 2:
            raise InsufficientDataError("need two training values for the mean predictor")
        shape = (len(Q), len(t))
        return Prediction(np.full(shape, float(np.mean(y))), np.full(shape, float(np.var(y, ddof=1))))

    def base(self, src, Q, t, local=False):
        return seasonal_predict(self.field_of(src), Q, t, include_obs_noise=True)

    def corrected(self, sim, Q, t, local=False):
        return self.bias(sim, False).predict(Q, t, include_obs_noise=True)

    def true_corrected(self, sim, Q, t, sim_vals, local=False):
        return self.bias(sim, True).predict(Q, t, true_sim=np.atleast_2d(sim_vals), include_obs_noise=True)

    def nob_var(self, sim):
        d = self.ds[FIELD][self.idx] - self.ds[sim][self.idx]
        d = d[~np.isnan(d)]
        if d.size == 0:
            raise InsufficientDataError("no training days with both field and simulator values")
        return float(np.mean(d ** 2))


def aggregated_values(ds: Dataset) -> dict:
    """Per-site time means for every source as ``(n_sites,)`` arrays, NaN where unobserved."""
    out = {}
    for src in (FIELD, SIM_A, SIM_B):
        vals = ds[src]
        ok = ~np.isnan(vals)
        counts = ok.sum(axis=1)
        a = np.full(ds.n_sites, np.nan)
        for i in np.nonzero(counts)[0]:
            a[i] = float(np.sum(vals[i][ok[i]])) / counts[i]
        out[src] = a
    return out


def station_sites(ds: Dataset) -> np.ndarray:
    """Positions of sites with at least one field observation (the CV folds)."""
    return np.nonzero((~np.isnan(ds[FIELD])).any(axis=1))[0]


def _make_fold(ds, resolution, train, tuning, local, min_obs, agg, jobs=1):
    if resolution == AGGREGATED:
        return AggregatedFold(ds.coords, agg, train, tuning, local, jobs)
    return DailyFold(ds, np.nonzero(train)[0], tuning, min_obs, jobs)


def _targets(ds, resolution, agg, i):
    if resolution == AGGREGATED:
        return {s: agg[s][i:i + 1] for s in (FIELD, SIM_A, SIM_B)}
    return {s: ds[s][i:i + 1] for s in (FIELD, SIM_A, SIM_B)}


def _score(fold, comp, ds, resolution, agg, i) -> FoldResult:
    site = ds.sites[i].id
    vals = _targets(ds, resolution, agg, i)
    obs = vals[comp.target]
    if np.isnan(obs).all():
        return FoldResult.failure(site, f"{comp.target.value} not observed at held-out site")
    try:
        pred = fold.predict(comp, ds.coords[i:i + 1], vals, ds.t if resolution == DAILY else None)
    except SolarFusionError as exc:
        return FoldResult.failure(site, f"{type(exc).__name__}: {exc}")
    return FoldResult.from_predictions(site, pred, obs)


def _check(comps, resolution, local):
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS}")
    if any(c.local for c in comps):
        if resolution == DAILY:
            raise ValueError("local comparators are only available for aggregated data")
        if local is None:
            raise ValueError("local comparators need a LocalConfig")


def full_data_tuning(ds, comps, resolution=AGGREGATED, fit_config=None, local=None, min_obs=MIN_OBS) -> dict:
    """Hyperparameters of every global stage fitted to all sites (for warm/fixed refits)."""
    agg = aggregated_values(ds) if resolution == AGGREGATED else None
    fold = _make_fold(ds, resolution, np.ones(ds.n_sites, bool), Tuning(fit_config or FitConfig()),
                      local, min_obs, agg)
    st = station_sites(ds)
    if len(st) == 0:
        return {}
    i = st[0]
    for c in comps:
        if c.local:
            continue
        try:
            fold.predict(c, ds.coords[i:i + 1], _targets(ds, resolution, agg, i),
                         ds.t if resolution == DAILY else None)
        except SolarFusionError:
            pass
    return dict(fold.params)


def loo_cv(ds: Dataset, comparators, resolution=AGGREGATED, refit="full", fit_config: FitConfig | None = None,
           local: LocalConfig | None = None, jobs=1, min_obs=MIN_OBS, folds=None):
    """Leave-one-site-out cross-validation.

    Every station site (one with field data) is held out in turn; sites
    carrying only simulator data always stay in training. All stages of each
    comparator are refitted per fold, sharing fitted stages between
    comparators within a fold. A comparator that fails on a fold yields a
    failed :class:`FoldResult` and the run continues.

    Returns a list of fold results when given one comparator, otherwise a
    dict keyed by comparator name. Results do not depend on ``jobs``.
    """
    single = isinstance(comparators, (str, Comparator))
    comps = comparator_list(comparators)
    _check(comps, resolution, local)
    base = fit_config or FitConfig()
    book = full_data_tuning(ds, comps, resolution, base, local, min_obs) if refit != "full" else {}
    tuning = Tuning(base, refit, book)
    agg = aggregated_values(ds) if resolution == AGGREGATED else None
    held = station_sites(ds) if folds is None else np.asarray(folds, dtype=int)

    def run(i):
        train = np.ones(ds.n_sites, bool)
        train[i] = False
        fold = _make_fold(ds, resolution, train, tuning, local, min_obs, agg)
        return [_score(fold, c, ds, resolution, agg, i) for c in comps]

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            per_fold = list(ex.map(run, held))
    else:
        per_fold = [run(i) for i in held]
    results = {c.name: [r[j] for r in per_fold] for j, c in enumerate(comps)}
    return results[comps[0].name] if single else results


def run_comparison(ds: Dataset, comparators=DEFAULT_COMPARATORS, resolution=AGGREGATED, refit="full",
                   fit_config: FitConfig | None = None, local: LocalConfig | None = None, jobs=1,
                   min_obs=MIN_OBS, baseline=None, metadata=None):
    """:func:`loo_cv` followed by :func:`summarize`, with run settings in the metadata."""
    comps = comparator_list(comparators)
    base = fit_config or FitConfig()
    results = loo_cv(ds, comps, resolution, refit, base, local, jobs, min_obs)
    if len(comps) == 1:
        results = {comps[0].name: results}
    meta = {
        "resolution": resolution,
        "refit": refit,
        "refit_note": "" if refit == "full" else "hyperparameters seeded from the full-data fit (approximation)",
        "fit": {"n_starts": base.n_starts, "seed": base.seed, "maxiter": base.maxiter},
        "local": local.describe() if local is not None else None,
        "n_sites": ds.n_sites,
        "n_folds": len(station_sites(ds)),
        "comparators": [c.name for c in comps],
    }
    if resolution == DAILY:
        meta["time_convention"] = TIME_CONVENTION
        meta["min_obs"] = min_obs
    meta.update(metadata or {})
    return summarize(comps, results, baseline=baseline, metadata=meta)


def predict_comparator(ds: Dataset, comparator, Q, resolution=AGGREGATED, days=None,
                       fit_config: FitConfig | None = None, local: LocalConfig | None = None,
                       min_obs=MIN_OBS, jobs=1) -> Prediction:
    """Train ``comparator`` on all sites and predict at locations ``Q``.

    For daily resolution ``days`` are absolute day indices (default: the
    dataset's days) and the result has shape ``(len(Q), len(days))``.
    Comparators that need simulator output at the query locations cannot
    be evaluated off-station. ``jobs`` threads are used for local
    predictions and coefficient-field fits; results do not depend on it.
    """
    comp = get_comparator(comparator)
    if comp.needs_true_sim:
        raise InfeasibleComparatorError(
            f"{comp.name} needs simulator output at every query location, which is unavailable off-station")
    _check([comp], resolution, local)
    Q = np.asarray(Q, dtype=float).reshape(-1, 2)
    agg = aggregated_values(ds) if resolution == AGGREGATED else None
    fold = _make_fold(ds, resolution, np.ones(ds.n_sites, bool), Tuning(fit_config or FitConfig()),
                      local, min_obs, agg, jobs)
    t = None
    if resolution == DAILY:
        d = ds.days if days is None else np.asarray(days, dtype=float)
        t = d - ds.first_day
    return fold.predict(comp, Q, {}, t)


def fold_summary(results) -> dict:
    """Mean RMSE and coverage over successful folds of one comparator."""
    ok = [f for f in results if not f.failed]
    return {
        "rmse": float(np.mean([f.rmse for f in ok])) if ok else math.nan,
        "cov95": float(np.mean([f.covered_frac for f in ok])) if ok else math.nan,
        "n_failed": len(results) - len(ok),
    }
