"""Command-line entry point: ``solarfusion <command> [options]``.

Every CSV or JSON artifact starts with a metadata header recording the
command, the seed and a hash of the settings that affect results. Settings
may also be given in a ``key = value`` file via ``--config``; keys mirror
the long flag names (``n-new`` or ``n_new``) and command-line flags win.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import bias_corrected_predict, fit_bias, ivw_fuse
from .data import (Dataset, SourceId, aggregate_time, load_csv, quality_report, read_points, read_rows,
                   write_rows)
from .design import (CONUS_BOX, PAIRS_GRID, BoundingBox, PolygonRegion, build_pairs_query, maximin_design,
                     simulate_rejections, write_design_csv)
from .errors import (EmptyInputError, IncompleteYearError, InfeasibleComparatorError, ParseError,
                     SolarFusionError)
from .gp import FitConfig, Prediction, fit_gp
from .localgp import LocalConfig, LocalSurrogate
from .pipelines import (AGGREGATED, DAILY, DEFAULT_COMPARATORS, REFIT_MODES, aggregated_values,
                        get_comparator, predict_comparator, run_comparison)
from .evaluation import ComparisonReport
from .seasonal import MIN_OBS, TIME_CONVENTION, coefficient_rows, daily_rows, fit_coeff_field

Z90 = 1.6448536269514722
_NOT_HASHED = {"jobs", "out_dir", "config", "func", "command"}


# ---------------------------------------------------------------- helpers

def parse_kv(text) -> dict:
    """``key=value`` pairs separated by spaces or commas."""
    out = {}
    for tok in str(text).replace(",", " ").split():
        k, sep, v = tok.partition("=")
        if not sep:
            raise ValueError(f"expected key=value, got {tok!r}")
        out[k.strip()] = v.strip()
    return out


def parse_local(text) -> LocalConfig | None:
    if text is None or text == "":
        return None
    kv = parse_kv(text)
    cfg = LocalConfig(n=int(kv.get("n", 50)), method=kv.get("method", "nn"),
                      n_start=int(kv.get("n_start", kv.get("n-start", 6))))
    return cfg


def read_config_file(path) -> dict:
    """Parse a ``key = value`` file (``#`` comments allowed)."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            k, sep, v = line.partition("=")
            if not sep:
                raise ParseError(f"{path}: expected key = value", n)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def config_hash(args) -> str:
    items = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_HASHED}
    blob = json.dumps(items, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def header(args, **extra) -> list:
    lines = [f"command: {args.command}", f"seed: {args.seed}", f"config_hash: {config_hash(args)}",
             f"version: {__version__}"]
    lines += [f"{k}: {v}" for k, v in extra.items()]
    return lines


def out_path(args, name) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _need_file(path):
    if path is None:
        raise FileNotFoundError("an input path is required")
    if not Path(path).is_file():
        raise FileNotFoundError(f"input not found: {path}")
    return path


def load_input(args) -> Dataset:
    ds = load_csv(_need_file(args.input), args.schema)
    for extra in getattr(args, "augment", None) or []:
        ds = ds.merge_sites(load_csv(_need_file(extra), args.schema))
    return ds


def fit_config(args) -> FitConfig:
    return FitConfig(n_starts=args.starts, seed=args.seed)


def region_of(args):
    if getattr(args, "polygon", None):
        return PolygonRegion.from_csv(_need_file(args.polygon))
    if getattr(args, "box", None):
        v = [float(x) for x in args.box.replace(",", " ").split()]
        if len(v) != 4:
            raise ValueError("--box needs lat_min lat_max lon_min lon_max")
        return BoundingBox(*v)
    return CONUS_BOX


def grid_points(args) -> np.ndarray:
    """Prediction grid from ``--points``, or a lattice over the region."""
    if getattr(args, "points", None):
        return read_points(_need_file(args.points))
    region = region_of(args)
    box = region.bounds
    if args.grid_points:
        area = (box.lat_max - box.lat_min) * (box.lon_max - box.lon_min)
        res = math.sqrt(area / float(args.grid_points))
    else:
        res = float(args.grid_resolution)
    G = box.grid(res)
    return G[region.contains(G)]


def write_prediction_csv(path, Q, pred: Prediction, header_lines):
    rows = [{"lat": q[0], "lon": q[1], "mean": m, "var": v}
            for q, m, v in zip(Q.tolist(), pred.mean.tolist(), pred.variance.tolist())]
    write_rows(path, rows, ["lat", "lon", "mean", "var"], header_lines)


def read_prediction_csv(path):
    rows = read_rows(_need_file(path))
    if not rows:
        raise EmptyInputError(f"{path}: no rows")
    for col in ("lat", "lon", "mean", "var"):
        if col not in rows[0]:
            raise ParseError(f"{path}: missing column {col!r}", 1)
    Q = np.array([[float(r["lat"]), float(r["lon"])] for r in rows])
    return Q, Prediction(np.array([float(r["mean"]) for r in rows]), np.array([float(r["var"]) for r in rows]))


# ---------------------------------------------------------------- commands

def cmd_aggregate(args):
    ds = load_input(args)
    written = []
    for src in SourceId:
        try:
            agg = aggregate_time(ds, src)
        except EmptyInputError:
            continue
        rows = [{"site_id": s.id, "lat": s.lat, "lon": s.lon, "mean": m, "n_obs": int(n), "n_zero_days": int(z)}
                for (s, m), n, z in zip(agg, agg.n_obs, agg.n_zero_days)]
        p = out_path(args, f"aggregate_{src.value}.csv")
        write_rows(p, rows, ["site_id", "lat", "lon", "mean", "n_obs", "n_zero_days"],
                   header(args, source=src.value))
        excl = [{"site_id": s.id, "lat": s.lat, "lon": s.lon, "source": src.value, "reason": "no observations"}
                for s in agg.excluded]
        pe = out_path(args, f"excluded_{src.value}.csv")
        write_rows(pe, excl, ["site_id", "lat", "lon", "source", "reason"], header(args, source=src.value))
        written += [p, pe]
    report = Path(args.report) if args.report else out_path(args, "quality.csv")
    report.parent.mkdir(parents=True, exist_ok=True)
    write_rows(report, quality_report(ds),
               ["site_id", "source", "n_obs", "n_missing", "frac_missing", "n_zero", "flag"], header(args))
    return written + [report]


def cmd_fit(args):
    ds = load_input(args)
    src = SourceId.parse(args.source)
    cfg = fit_config(args)
    if args.resolution == DAILY:
        cf = fit_coeff_field(ds, src, config=cfg, min_obs=args.min_obs, jobs=args.jobs)
        p = out_path(args, f"coefficients_{src.value}.csv")
        write_rows(p, coefficient_rows(cf), ["lat", "lon", "k", "beta_hat", "beta_tilde", "var_tilde"],
                   header(args, source=src.value, time_convention=TIME_CONVENTION, min_obs=args.min_obs))
        return [p]
    vals = aggregated_values(ds)[src]
    ok = ~np.isnan(vals)
    model = fit_gp(ds.coords[ok], vals[ok], cfg)
    p = out_path(args, f"model_{src.value}.json")
    doc = {"metadata": {"command": args.command, "seed": args.seed, "config_hash": config_hash(args),
                        "source": src.value}, "model": model.to_dict()}
    p.write_text(json.dumps(doc, indent=1))
    return [p]


def cmd_calibrate(args):
    fld = load_csv(_need_file(args.field), args.schema)
    sim = load_csv(_need_file(args.sim), args.schema) if args.sim else fld
    s = SourceId.parse(args.sim_source)
    fa = aggregated_values(fld)[SourceId.FIELD]
    sa = aggregated_values(sim)[s]
    fx, sx = fld.coords, sim.coords
    fok, sok = ~np.isnan(fa), ~np.isnan(sa)
    cfg = fit_config(args)
    local = parse_local(args.local)
    if args.true_sim:
        # simulator values are needed at the field sites themselves
        sim_at = {tuple(c): v for c, v in zip(sx.tolist(), sa.tolist())}
        paired = np.array([sim_at.get(tuple(c), np.nan) for c in fx.tolist()])
        use = fok & ~np.isnan(paired)
        bm = fit_bias(fx[use], fa[use], paired[use], config=cfg, local=local)
        Q = fx[use]
        pred = bias_corrected_predict(bm, Q, true_sim=paired[use])
    else:
        if local is not None:
            sur = LocalSurrogate(sx[sok], sa[sok], local, args.jobs)
        else:
            sur = fit_gp(sx[sok], sa[sok], cfg)
        bm = fit_bias(fx[fok], fa[fok], sur.predict(fx[fok]), surrogate=sur, config=cfg, local=local)
        Q = read_points(_need_file(args.points)) if args.points else fx[fok]
        pred = bias_corrected_predict(bm, Q)
    p = Path(args.out) if args.out else out_path(args, "calibrated.csv")
    p.parent.mkdir(parents=True, exist_ok=True)
    write_prediction_csv(p, Q, pred, header(args, sim_source=s.value, true_sim=bool(args.true_sim),
                                            noise_var=repr(bm.noise_var)))
    return [p]


def cmd_fuse(args):
    if not args.inputs:
        raise EmptyInputError("fuse needs at least one prediction CSV")
    loaded = [read_prediction_csv(p) for p in args.inputs]
    Q = loaded[0][0]
    for path, (Qi, _) in zip(args.inputs, loaded):
        if Qi.shape != Q.shape or not np.array_equal(Qi, Q):
            raise ParseError(f"{path}: locations differ from {args.inputs[0]}", 1)
    pred = ivw_fuse([p for _, p in loaded])
    p = Path(args.out) if args.out else out_path(args, "fused.csv")
    p.parent.mkdir(parents=True, exist_ok=True)
    write_prediction_csv(p, Q, pred, header(args, inputs=" ".join(Path(x).name for x in args.inputs)))
    return [p]


def _report_files(args, report: ComparisonReport, stem):
    pc = out_path(args, f"{stem}.csv")
    write_rows(pc, report.table_rows(), report.columns(), header(args))
    pt = out_path(args, f"{stem}.txt")
    pt.write_text("".join(f"# {h}\n" for h in header(args)) + report.to_text())
    pj = out_path(args, f"{stem}.json")
    report.metadata.update({"command": args.command, "seed": args.seed, "config_hash": config_hash(args)})
    pj.write_text(report.to_json())
    return [pc, pt, pj]


def cmd_cv(args):
    names = [n for n in args.comparators.replace(",", " ").split()] if args.comparators else list(
        DEFAULT_COMPARATORS)
    local = parse_local(args.local)
    cfg = fit_config(args)
    baseline = None
    if args.baseline:
        baseline = ComparisonReport.from_json(Path(_need_file(args.baseline)).read_text())
    kw = dict(resolution=args.resolution, refit=args.refit, fit_config=cfg, local=local, jobs=args.jobs,
              min_obs=args.min_obs)
    written = []
    if args.augment and baseline is None:
        base_ds = load_csv(_need_file(args.input), args.schema)
        baseline = run_comparison(base_ds, names, **kw)
        written += _report_files(args, baseline, "report_baseline")
    ds = load_input(args)
    report = run_comparison(ds, names, baseline=baseline, **kw)
    return written + _report_files(args, report, "report")


def _daily_days(args, ds):
    if not args.days:
        return None
    a, sep, b = args.days.partition(":")
    lo = int(a) if a else ds.first_day
    hi = int(b) if sep and b else (lo if not sep else ds.day_range[1])
    return np.arange(lo, hi + 1)


def cmd_predict_grid(args):
    comp = get_comparator(args.comparator)
    if comp.needs_true_sim:
        raise InfeasibleComparatorError(
            f"{comp.name} conditions on simulator output at every grid point, which is unavailable off-station")
    ds = load_input(args)
    Q = grid_points(args)
    local = parse_local(args.local)
    cfg = fit_config(args)
    meta = dict(comparator=comp.name, resolution=args.resolution, n_points=len(Q),
                local=json.dumps(local.describe()) if local else "none")
    if args.resolution == AGGREGATED:
        pred = predict_comparator(ds, comp, Q, AGGREGATED, fit_config=cfg, local=local, jobs=args.jobs)
        p = out_path(args, "grid.csv")
        write_prediction_csv(p, Q, pred, header(args, **meta))
        return [p]
    days = _daily_days(args, ds)
    if days is None:
        days = ds.days
    pred = predict_comparator(ds, comp, Q, DAILY, days=days, fit_config=cfg, min_obs=args.min_obs, jobs=args.jobs)
    written = []
    for j, d in enumerate(days):
        p = out_path(args, f"grid_day{int(d):04d}.csv")
        rows = daily_rows(Q, [d], Prediction(pred.mean[:, j:j + 1], pred.variance[:, j:j + 1]))
        write_rows(p, rows, ["lat", "lon", "day", "mean", "var"],
                   header(args, day=int(d), time_convention=TIME_CONVENTION, **meta))
        written.append(p)
    return written


def top_region_fractions(means, variances):
    """Per-point fractions over days (columns) of the top-decile and confident-upper-quartile events.

    ``means`` and ``variances`` are ``(n_points, n_days)``. Thresholds are
    per-day quantiles of the predictive means across points.
    """
    M = np.asarray(means, dtype=float)
    V = np.asarray(variances, dtype=float)
    q90 = np.quantile(M, 0.9, axis=0)
    q75 = np.quantile(M, 0.75, axis=0)
    q25 = np.quantile(M, 0.25, axis=0)
    top = M >= q90[None]
    lower = M - Z90 * np.sqrt(np.maximum(V, 0.0))
    confident = (M >= q75[None]) & (lower >= q25[None])
    return top.mean(axis=1), confident.mean(axis=1)


def cmd_top_regions(args):
    files = list(args.inputs or [])
    if args.grid_dir:
        files += sorted(glob.glob(os.path.join(args.grid_dir, "grid_day*.csv")))
    if not files:
        raise EmptyInputError("top-regions needs daily grid files")
    by_day = {}
    Q = None
    for f in files:
        rows = read_rows(_need_file(f))
        if not rows or "day" not in rows[0]:
            raise ParseError(f"{f}: expected lat,lon,day,mean,var columns", 1)
        for r in rows:
            key = (float(r["lat"]), float(r["lon"]))
            by_day.setdefault(int(r["day"]), {})[key] = (float(r["mean"]), float(r["var"]))
    missing = [d for d in range(365) if d not in by_day]
    if missing:
        raise IncompleteYearError(f"daily predictions missing for {len(missing)} of days 0..364 "
                                  f"(first missing: {missing[0]})")
    Q = sorted(by_day[0])
    for d in range(365):
        if set(by_day[d]) != set(Q):
            raise ParseError(f"day {d}: grid locations differ from day 0", 1)
    M = np.array([[by_day[d][q][0] for d in range(365)] for q in Q])
    V = np.array([[by_day[d][q][1] for d in range(365)] for q in Q])
    top, conf = top_region_fractions(M, V)
    rows = [{"lat": q[0], "lon": q[1], "frac_top10": a, "frac_confident_q75": b} for q, a, b in zip(Q, top, conf)]
    p = out_path(args, "top_regions.csv")
    write_rows(p, rows, ["lat", "lon", "frac_top10", "frac_confident_q75"], header(args, n_points=len(Q)))
    return [p]


def cmd_design(args):
    existing = read_points(_need_file(args.existing)) if args.existing else np.empty((0, 2))
    res = maximin_design(args.n_new, existing, region_of(args), args.candidates, args.seed,
                         None if args.no_snap else PAIRS_GRID)
    p = out_path(args, "design.csv")
    extra = dict(n_new=args.n_new, n_existing=len(existing), n_candidates=res.n_candidates,
                 achieved_min_dist=repr(res.achieved_min_dist), snapped=not args.no_snap)
    write_design_csv(p, res, header(args, **extra))
    written = [p]
    if args.reject:
        answered = simulate_rejections(res.points, args.reject, args.reject_mode, args.seed)
        rows = [{"lat": a, "lon": b, "answered": int(ok)} for (a, b), ok in zip(res.points.tolist(), answered)]
        pr = out_path(args, "design_responses.csv")
        write_rows(pr, rows, ["lat", "lon", "answered"], header(args, **extra))
        written.append(pr)
    return written


def cmd_pairs_query(args):
    if args.points:
        coords = read_points(_need_file(args.points)).tolist()
    elif args.coords:
        v = [float(x) for x in args.coords.replace(",", " ").split()]
        if len(v) % 2:
            raise ValueError("--coords needs lat lon pairs")
        coords = [(v[i], v[i + 1]) for i in range(0, len(v), 2)]
    else:
        coords = []
    doc = build_pairs_query(args.layer, args.start, args.end, coords)
    p = Path(args.out) if args.out else out_path(args, "query.json")
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(doc + "\n")
    return [p]


# ---------------------------------------------------------------- parser

def _common(sp, data=True):
    if data:
        sp.add_argument("--input", help="dataset CSV")
        sp.add_argument("--schema", choices=["long", "wide"], default="long")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="solarfusion", description="GP surrogates, bias correction and fusion.")
    ap.add_argument("--version", action="version", version=__version__)
    glob_opts = argparse.ArgumentParser(add_help=False)
    glob_opts.add_argument("--seed", type=int, default=0)
    glob_opts.add_argument("--jobs", type=int, default=1)
    glob_opts.add_argument("--out-dir", default=".")
    glob_opts.add_argument("--config", help="key = value settings file")
    glob_opts.add_argument("--starts", type=int, default=5, help="optimizer restarts per GP fit")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("aggregate", parents=[glob_opts], help="per-site time means and data-quality report")
    _common(sp)
    sp.add_argument("--report", help="quality report path (default OUT_DIR/quality.csv)")
    sp.set_defaults(func=cmd_aggregate)

    sp = sub.add_parser("fit", parents=[glob_opts], help="fit a GP (aggregated) or coefficient fields (daily)")
    _common(sp)
    sp.add_argument("--source", default="field")
    sp.add_argument("--resolution", choices=[AGGREGATED, DAILY], default=AGGREGATED)
    sp.add_argument("--min-obs", type=int, default=MIN_OBS)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("calibrate", parents=[glob_opts], help="surrogate plus discrepancy predictions")
    sp.add_argument("--field")
    sp.add_argument("--sim", help="simulator CSV (default: the --field file)")
    sp.add_argument("--sim-source", default="simA")
    sp.add_argument("--schema", choices=["long", "wide"], default="long")
    sp.add_argument("--true-sim", action="store_true")
    sp.add_argument("--points", help="lat,lon CSV of prediction locations")
    sp.add_argument("--local", help="local GP settings, e.g. 'n=50 method=nn'")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("fuse", parents=[glob_opts], help="inverse-variance fusion of prediction CSVs")
    sp.add_argument("inputs", nargs="*")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("cv", parents=[glob_opts], help="leave-one-site-out comparison report")
    _common(sp)
    sp.add_argument("--comparators", help="comma-separated registry names (suffix @local for local)")
    sp.add_argument("--resolution", choices=[AGGREGATED, DAILY], default=AGGREGATED)
    sp.add_argument("--refit", choices=REFIT_MODES, default="full")
    sp.add_argument("--local", help="local GP settings, e.g. 'n=50 method=nn'")
    sp.add_argument("--augment", action="append", help="extra simulator-only sites (CSV); adds p_cross")
    sp.add_argument("--baseline", help="report JSON to compare against (adds p_cross)")
    sp.add_argument("--min-obs", type=int, default=MIN_OBS)
    sp.set_defaults(func=cmd_cv)

    sp = sub.add_parser("design", parents=[glob_opts], help="greedy maximin design snapped to the PAIRS grid")
    sp.add_argument("--n-new", type=int, default=1000)
    sp.add_argument("--existing", help="lat,lon CSV of existing sites")
    sp.add_argument("--candidates", type=int)
    sp.add_argument("--box", help="lat_min lat_max lon_min lon_max")
    sp.add_argument("--polygon", help="lat,lon vertex CSV")
    sp.add_argument("--no-snap", action="store_true")
    sp.add_argument("--reject", type=int, default=0, help="simulate this many unanswered requests")
    sp.add_argument("--reject-mode", choices=["northeast", "random"], default="northeast")
    sp.set_defaults(func=cmd_design)

    sp = sub.add_parser("predict-grid", parents=[glob_opts], help="train a comparator and predict on a grid")
    _common(sp)
    sp.add_argument("--comparator", default="ivw-hat")
    sp.add_argument("--resolution", choices=[AGGREGATED, DAILY], default=AGGREGATED)
    sp.add_argument("--grid-resolution", type=float, default=0.05, help="lattice step in degrees")
    sp.add_argument("--grid-points", type=int, help="approximate number of grid points (overrides step)")
    sp.add_argument("--box", help="lat_min lat_max lon_min lon_max")
    sp.add_argument("--polygon", help="lat,lon vertex CSV")
    sp.add_argument("--points", help="lat,lon CSV instead of a lattice")
    sp.add_argument("--days", help="day range a:b for daily output (one file per day)")
    sp.add_argument("--local", help="local GP settings, e.g. 'n=50 method=nn'")
    sp.add_argument("--augment", action="append")
    sp.add_argument("--min-obs", type=int, default=MIN_OBS)
    sp.set_defaults(func=cmd_predict_grid)

    sp = sub.add_parser("top-regions", parents=[glob_opts], help="sunniest-location summary over a year")
    sp.add_argument("inputs", nargs="*", help="daily grid CSVs")
    sp.add_argument("--grid-dir", help="directory of grid_day*.csv files")
    sp.set_defaults(func=cmd_top_regions)

    sp = sub.add_parser("pairs-query", parents=[glob_opts], help="PAIRS point-query document")
    sp.add_argument("--layer", default="1400")
    sp.add_argument("--start", required=False, default="2016-04-14T23:00:00Z")
    sp.add_argument("--end", required=False, default="2016-04-15T00:00:00Z")
    sp.add_argument("--coords", help="lat lon lat lon ...")
    sp.add_argument("--points", help="lat,lon CSV")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_pairs_query)
    return ap


def _apply_config(ap, argv):
    """Re-parse with values from ``--config`` as defaults under the command line."""
    args = ap.parse_args(argv)
    if not args.config:
        return args
    conf = read_config_file(_need_file(args.config))
    sub = ap._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in conf.items():
        if k not in known:
            raise ParseError(f"{args.config}: unknown setting {k!r} for {args.command}", 0)
        act = known[k]
        if isinstance(act, argparse._StoreTrueAction):
            defaults[k] = v.lower() in ("1", "true", "yes", "on")
        elif act.nargs in ("*", "+") or isinstance(act, argparse._AppendAction):
            defaults[k] = v.replace(",", " ").split()
        else:
            defaults[k] = act.type(v) if act.type else v
    sub.set_defaults(**defaults)
    return ap.parse_args(argv)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = _apply_config(ap, argv)
        args.out_dir = str(Path(args.out_dir).resolve())
        written = args.func(args)
    except (SolarFusionError, FileNotFoundError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"solarfusion {getattr(exc, '__class__').__name__}: {msg}", file=sys.stderr)
        return 2
    for p in written:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
