"""Co-located field and simulator irradiance records.

A :class:`Dataset` stores one dense ``(n_sites, n_days)`` array per source,
with ``NaN`` marking missing cells. Day indices are integer offsets; the
harmonic argument used downstream is ``t = day - first_day``.
"""

from __future__ import annotations

import csv
import enum
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import CoverageError, DuplicateKeyError, EmptyInputError, ParseError


class SourceId(str, enum.Enum):
    FIELD = "field"
    SIM_A = "simA"
    SIM_B = "simB"

    @classmethod
    def parse(cls, text) -> "SourceId":
        if isinstance(text, cls):
            return text
        for member in cls:
            if member.value.lower() == str(text).strip().lower():
                return member
        raise ValueError(f"unknown source {text!r}; expected one of field, simA, simB")


SOURCES = (SourceId.FIELD, SourceId.SIM_A, SourceId.SIM_B)
SIMULATORS = (SourceId.SIM_A, SourceId.SIM_B)

LONG_COLUMNS = ("site_id", "lat", "lon", "day", "source", "value")
WIDE_COLUMNS = ("site_id", "lat", "lon", "day", "field", "simA", "simB")


@dataclass(frozen=True)
class Site:
    id: str
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"site {self.id}: latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"site {self.id}: longitude {self.lon} outside [-180, 180]")


class Observation(NamedTuple):
    site: Site
    day: int
    source: SourceId
    value: float  # NaN when recorded as missing


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Immutable site-by-day table for the three sources.

    ``values[source]`` holds irradiance with ``NaN`` for missing cells and
    ``recorded[source]`` marks cells that appeared in the input (possibly as
    explicit missing values).
    """

    sites: tuple
    first_day: int
    values: Mapping
    recorded: Mapping = field(default=None)

    def __post_init__(self):
        if len(self.sites) == 0:
            raise EmptyInputError("dataset has no sites")
        ids = [s.id for s in self.sites]
        if len(set(ids)) != len(ids):
            raise DuplicateKeyError("site ids must be unique")
        shape = None
        vals = {}
        for src in SOURCES:
            arr = self.values.get(src)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=float)
            if arr.ndim != 2 or arr.shape[0] != len(self.sites):
                raise ValueError(f"{src.value}: expected shape (n_sites, n_days), got {arr.shape}")
            if shape is not None and arr.shape != shape:
                raise ValueError("all sources must share the same (n_sites, n_days) shape")
            shape = arr.shape
            vals[src] = _frozen(arr)
        if shape is None:
            raise EmptyInputError("dataset has no source arrays")
        for src in SOURCES:
            if src not in vals:
                vals[src] = _frozen(np.full(shape, np.nan))
        rec = {}
        given = self.recorded or {}
        for src in SOURCES:
            r = given.get(src)
            r = ~np.isnan(vals[src]) if r is None else np.asarray(r, dtype=bool)
            r = r | ~np.isnan(vals[src])
            r.setflags(write=False)
            rec[src] = r
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "recorded", rec)

    @classmethod
    def from_arrays(cls, sites, first_day=0, **arrays) -> "Dataset":
        """Build from keyword arrays ``field=``, ``simA=``, ``simB=``."""
        vals = {SourceId.parse(k): v for k, v in arrays.items() if v is not None}
        return cls(tuple(sites), int(first_day), vals)

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def n_days(self) -> int:
        return self.values[SourceId.FIELD].shape[1]

    @property
    def day_range(self) -> tuple:
        return (self.first_day, self.first_day + self.n_days - 1)

    @property
    def days(self) -> np.ndarray:
        return np.arange(self.first_day, self.first_day + self.n_days)

    @property
    def t(self) -> np.ndarray:
        """Day offsets from the first day, the harmonic time argument."""
        return np.arange(self.n_days, dtype=float)

    @property
    def coords(self) -> np.ndarray:
        return np.array([[s.lat, s.lon] for s in self.sites], dtype=float)

    @property
    def site_ids(self) -> list:
        return [s.id for s in self.sites]

    def __getitem__(self, source) -> np.ndarray:
        return self.values[SourceId.parse(source)]

    def site_index(self, site_id) -> int:
        for i, s in enumerate(self.sites):
            if s.id == site_id:
                return i
        raise KeyError(site_id)

    def n_observed(self, source) -> int:
        return int(np.count_nonzero(~np.isnan(self[source])))

    def n_missing(self, source=None) -> int:
        """Count recorded-but-missing cells (all sources when ``source`` is None)."""
        srcs = SOURCES if source is None else (SourceId.parse(source),)
        return int(sum(np.count_nonzero(self.recorded[s] & np.isnan(self.values[s])) for s in srcs))

    def observations(self, source=None) -> Iterator[Observation]:
        srcs = SOURCES if source is None else (SourceId.parse(source),)
        for src in srcs:
            rows, cols = np.nonzero(self.recorded[src])
            for i, j in zip(rows, cols):
                yield Observation(self.sites[i], self.first_day + int(j), src, float(self.values[src][i, j]))

    def subset(self, idx) -> "Dataset":
        """Dataset restricted to the sites at positions ``idx`` (same day grid)."""
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            tuple(self.sites[i] for i in idx),
            self.first_day,
            {s: self.values[s][idx] for s in SOURCES},
            {s: self.recorded[s][idx] for s in SOURCES},
        )

    def with_source(self, source, array, recorded=None) -> "Dataset":
        src = SourceId.parse(source)
        vals = dict(self.values)
        rec = dict(self.recorded)
        vals[src] = array
        rec[src] = recorded if recorded is not None else ~np.isnan(np.asarray(array, dtype=float))
        return Dataset(self.sites, self.first_day, vals, rec)

    def merge_sites(self, other: "Dataset") -> "Dataset":
        """Append the sites of ``other`` (same day grid, disjoint site ids)."""
        if other.first_day != self.first_day or other.n_days != self.n_days:
            raise ValueError("datasets must share the same day grid to merge")
        return Dataset(
            self.sites + other.sites,
            self.first_day,
            {s: np.vstack([self.values[s], other.values[s]]) for s in SOURCES},
            {s: np.vstack([self.recorded[s], other.recorded[s]]) for s in SOURCES},
        )


def _parse_float(text, what, line, allow_missing=False):
    text = text.strip()
    if text == "" or text.upper() == "NA":
        if allow_missing:
            return math.nan
        raise ParseError(f"missing {what}", line)
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"cannot parse {what} {text!r}", line) from None
    if math.isnan(v) and not allow_missing:
        raise ParseError(f"missing {what}", line)
    return v


def _parse_day(text, line):
    try:
        return int(text.strip())
    except ValueError:
        raise ParseError(f"day must be an integer, got {text!r}", line) from None


def load_csv(path, schema="long") -> Dataset:
    """Read a long- or wide-format CSV into a :class:`Dataset`.

    Empty value cells become missing observations. Raises :class:`ParseError`
    (with the offending line number) on malformed rows and
    :class:`DuplicateKeyError` on a repeated (site, day, source) triple.
    """
    if schema not in ("long", "wide"):
        raise ValueError(f"schema must be 'long' or 'wide', got {schema!r}")
    required = LONG_COLUMNS if schema == "long" else WIDE_COLUMNS
    site_pos = {}
    site_list = []
    cells = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        missing = [c for c in required if c not in header]
        if missing:
            raise ParseError(f"header lacks columns {missing}", 1)
        col = {name: header.index(name) for name in required}
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            sid = row[col["site_id"]].strip()
            if not sid:
                raise ParseError("empty site_id", line)
            lat = _parse_float(row[col["lat"]], "lat", line)
            lon = _parse_float(row[col["lon"]], "lon", line)
            day = _parse_day(row[col["day"]], line)
            if sid in site_pos:
                s = site_list[site_pos[sid]]
                if (s.lat, s.lon) != (lat, lon):
                    raise ParseError(f"site {sid} has inconsistent coordinates", line)
            else:
                try:
                    site_list.append(Site(sid, lat, lon))
                except ValueError as exc:
                    raise ParseError(str(exc), line) from None
                site_pos[sid] = len(site_list) - 1
            if schema == "long":
                try:
                    src = SourceId.parse(row[col["source"]])
                except ValueError as exc:
                    raise ParseError(str(exc), line) from None
                entries = [(src, row[col["value"]])]
            else:
                entries = [(src, row[col[src.value]]) for src in SOURCES]
            for src, text in entries:
                v = _parse_float(text, f"{src.value} value", line, allow_missing=True)
                if v < 0:
                    raise ParseError(f"negative irradiance {v}", line)
                key = (sid, day, src)
                if key in cells:
                    raise DuplicateKeyError(f"duplicate observation for site={sid}, day={day}, source={src.value}", line)
                cells[key] = v
    if not site_list:
        raise EmptyInputError(f"{path}: no data rows")
    days = [k[1] for k in cells]
    first, last = min(days), max(days)
    shape = (len(site_list), last - first + 1)
    vals = {s: np.full(shape, np.nan) for s in SOURCES}
    rec = {s: np.zeros(shape, dtype=bool) for s in SOURCES}
    for (sid, day, src), v in cells.items():
        i, j = site_pos[sid], day - first
        vals[src][i, j] = v
        rec[src][i, j] = True
    return Dataset(tuple(site_list), first, vals, rec)


def write_csv(ds: Dataset, path, schema="long"):
    """Write ``ds`` back out; only recorded cells are emitted in long format."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if schema == "long":
            w.writerow(LONG_COLUMNS)
            for obs in sorted(ds.observations(), key=lambda o: (ds.site_index(o.site.id), o.day, SOURCES.index(o.source))):
                w.writerow([obs.site.id, repr(obs.site.lat), repr(obs.site.lon), obs.day, obs.source.value,
                            "" if math.isnan(obs.value) else repr(obs.value)])
        elif schema == "wide":
            w.writerow(WIDE_COLUMNS)
            for i, s in enumerate(ds.sites):
                for j in range(ds.n_days):
                    if not any(ds.recorded[src][i, j] for src in SOURCES):
                        continue
                    cells = []
                    for src in SOURCES:
                        v = ds.values[src][i, j]
                        cells.append("" if math.isnan(v) else repr(float(v)))
                    w.writerow([s.id, repr(s.lat), repr(s.lon), ds.first_day + j, *cells])
        else:
            raise ValueError(f"unknown schema {schema!r}")


@dataclass(frozen=True)
class Aggregate:
    """Per-site time means for one source."""

    source: SourceId
    sites: tuple
    means: np.ndarray
    n_obs: np.ndarray
    excluded: tuple
    n_zero_days: np.ndarray

    def __iter__(self):
        return iter(zip(self.sites, self.means.tolist()))

    def __len__(self):
        return len(self.sites)

    @property
    def coords(self) -> np.ndarray:
        return np.array([[s.lat, s.lon] for s in self.sites], dtype=float).reshape(-1, 2)


def aggregate_time(ds: Dataset, source) -> Aggregate:
    """Arithmetic mean over non-missing days at each site.

    Sites with no observations for ``source`` are dropped from the result and
    listed in ``excluded``; nothing is imputed.
    """
    src = SourceId.parse(source)
    vals = ds.values[src]
    if vals.size == 0 or not ds.recorded[src].any():
        raise EmptyInputError(f"no recorded {src.value} observations")
    ok = ~np.isnan(vals)
    counts = ok.sum(axis=1)
    keep = counts > 0
    means = np.array([float(np.sum(vals[i][ok[i]])) / counts[i] for i in np.nonzero(keep)[0]])
    zeros = (ok & (vals == 0.0)).sum(axis=1)
    return Aggregate(
        source=src,
        sites=tuple(s for s, k in zip(ds.sites, keep) if k),
        means=means,
        n_obs=counts[keep],
        excluded=tuple(s for s, k in zip(ds.sites, keep) if not k),
        n_zero_days=zeros[keep],
    )


def residual_series(ds: Dataset, source, fitted) -> Dataset:
    """Observed-minus-fitted values for ``source`` with the same missingness.

    ``fitted`` is either an ``(n_sites, n_days)`` array or a mapping from
    ``(site_id, day)`` to a value. The returned dataset carries the residuals
    in the ``source`` slot and nothing in the others.
    """
    src = SourceId.parse(source)
    obs = ds.values[src]
    observed = ~np.isnan(obs)
    if isinstance(fitted, Mapping):
        f = np.full(obs.shape, np.nan)
        for i, j in zip(*np.nonzero(observed)):
            key = (ds.sites[i].id, ds.first_day + int(j))
            if key in fitted:
                f[i, j] = fitted[key]
    else:
        f = np.asarray(fitted, dtype=float)
        if f.shape != obs.shape:
            raise ValueError(f"fitted array has shape {f.shape}, expected {obs.shape}")
    gaps = observed & np.isnan(f)
    if gaps.any():
        cells = [(ds.sites[i].id, ds.first_day + int(j)) for i, j in zip(*np.nonzero(gaps))]
        raise CoverageError(f"no fitted value for observed cell(s) {cells[:5]}"
                            + (f" and {len(cells) - 5} more" if len(cells) > 5 else ""), cells)
    resid = np.where(observed, obs - np.where(observed, f, 0.0), np.nan)
    empty = np.full(obs.shape, np.nan)
    return Dataset(ds.sites, ds.first_day,
                   {s: (resid if s is src else empty) for s in SOURCES},
                   {s: (ds.recorded[src] if s is src else np.zeros(obs.shape, bool)) for s in SOURCES})


def quality_report(ds: Dataset) -> list:
    """One row per (site, source): counts, missing fraction, zero-valued days, flag."""
    rows = []
    for src in SOURCES:
        vals = ds.values[src]
        ok = ~np.isnan(vals)
        for i, s in enumerate(ds.sites):
            n = int(ok[i].sum())
            nz = int((vals[i][ok[i]] == 0.0).sum())
            flags = []
            if n == 0:
                flags.append("excluded")
            if nz:
                flags.append("zero_values")
            rows.append({
                "site_id": s.id,
                "source": src.value,
                "n_obs": n,
                "n_missing": ds.n_days - n,
                "frac_missing": (ds.n_days - n) / ds.n_days,
                "n_zero": nz,
                "flag": ";".join(flags),
            })
    return rows


def write_rows(path, rows, columns=None, header_lines=()):
    """Write dict rows as CSV, preceded by ``# ...`` metadata lines."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def read_rows(path) -> list:
    """Read a CSV written by :func:`write_rows`, skipping ``#`` lines."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def read_metadata(path) -> dict:
    meta = {}
    with open(path) as fh:
        for ln in fh:
            if not ln.startswith("#"):
                break
            key, _, val = ln[1:].strip().partition(":")
            meta[key.strip()] = val.strip()
    return meta


def read_points(path) -> np.ndarray:
    """``lat,lon`` columns of a CSV as an ``(m, 2)`` array."""
    rows = read_rows(path)
    if not rows:
        raise EmptyInputError(f"{path}: no rows")
    if "lat" not in rows[0] or "lon" not in rows[0]:
        raise ParseError(f"{Path(path).name}: needs lat and lon columns", 1)
    return np.array([[float(r["lat"]), float(r["lon"])] for r in rows])
