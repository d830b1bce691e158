"""Placement and retrieval of new simulator runs.

Covers greedy maximin site selection, snapping to the fixed PAIRS lat/lon
grid, bilinear interpolation from the four surrounding grid nodes, and the
JSON point-query documents the PAIRS service accepts. Distances are plain
Euclidean distances in degrees.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Mapping

import numpy as np
import shapely
from scipy.spatial import cKDTree

from .data import Site, read_rows, write_rows
from .errors import CoverageError, EmptyInputError, InfeasibleDesignError, OutOfCellError, ParseError

PAIRS_STEP = 1e-6 * 2 ** 15  # 0.032768 degrees
_CELL_TOL = 1e-9
_TIME_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


@dataclass(frozen=True)
class GridSpec:
    step: float = PAIRS_STEP
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("grid step must be positive")

    def index(self, p) -> np.ndarray:
        """Integer indices of the nearest grid node (ties toward +inf)."""
        p = np.asarray(p, dtype=float)
        return np.floor((p - np.asarray(self.origin)) / self.step + 0.5).astype(np.int64)

    def coord(self, idx) -> np.ndarray:
        # rounding strips float noise such as -121.56927999999999
        return np.round(np.asarray(self.origin) + np.asarray(idx, dtype=float) * self.step, 10)


PAIRS_GRID = GridSpec()


def snap_to_grid(p, g: GridSpec = PAIRS_GRID):
    """Nearest grid node of ``p`` (a ``(lat, lon)`` pair or an ``(m, 2)`` array)."""
    arr = np.asarray(p, dtype=float)
    out = g.coord(g.index(arr))
    if arr.shape == (2,) and not isinstance(p, np.ndarray):
        return (float(out[0]), float(out[1]))
    return out


def _cell(p, g):
    """Lower-left node index and fractional offsets of the cell holding ``p``."""
    rel = (np.asarray(p, dtype=float) - np.asarray(g.origin)) / g.step
    i0 = np.floor(rel)
    frac = rel - i0
    # points within rounding of the upper node belong to that node's cell
    up = frac > 1.0 - _CELL_TOL
    i0 = np.where(up, i0 + 1, i0)
    frac = np.where(up, 0.0, frac)
    frac = np.where(frac < _CELL_TOL, 0.0, frac)
    return i0.astype(np.int64), frac


def bilinear_interpolate(corners, p, cell_origin, g: GridSpec = PAIRS_GRID) -> float:
    """Bilinear interpolation inside one grid cell.

    ``corners[i][j]`` is the value at ``cell_origin + (i, j) * step`` with
    ``i`` indexing latitude and ``j`` longitude; a flat sequence of four is
    read in the order (lat0 lon0, lat0 lon1, lat1 lon0, lat1 lon1).
    """
    c = np.asarray(corners, dtype=float).reshape(2, 2)
    u, w = (np.asarray(p, dtype=float) - np.asarray(cell_origin, dtype=float)) / g.step
    if not (-_CELL_TOL <= u <= 1 + _CELL_TOL and -_CELL_TOL <= w <= 1 + _CELL_TOL):
        raise OutOfCellError(f"point {tuple(p)} lies outside the cell at {tuple(cell_origin)}")
    u = min(max(u, 0.0), 1.0)
    w = min(max(w, 0.0), 1.0)
    # nested lerps keep constant fields exact
    lo = c[0, 0] + w * (c[0, 1] - c[0, 0])
    hi = c[1, 0] + w * (c[1, 1] - c[1, 0])
    return float(lo + u * (hi - lo))


def cell_corners(p, g: GridSpec = PAIRS_GRID) -> list:
    """The four grid nodes surrounding ``p`` as ``(lat, lon)`` pairs."""
    i0, _ = _cell(p, g)
    return [tuple(float(v) for v in g.coord(i0 + np.array(d))) for d in ((0, 0), (0, 1), (1, 0), (1, 1))]


def interpolate_offgrid(site, grid_values: Mapping, g: GridSpec = PAIRS_GRID) -> float:
    """Value at an off-grid site from the nodes of its enclosing cell.

    ``grid_values`` maps ``(lat, lon)`` node coordinates to values. Corners
    with zero weight (e.g. the site is on a grid line) are not required.
    """
    p = np.array([site.lat, site.lon] if isinstance(site, Site) else site, dtype=float)
    lookup = {tuple(int(i) for i in g.index(k)): v for k, v in grid_values.items()}
    i0, (u, w) = _cell(p, g)
    weights = {(0, 0): (1 - u) * (1 - w), (0, 1): (1 - u) * w, (1, 0): u * (1 - w), (1, 1): u * w}
    corners = np.zeros((2, 2))
    missing = []
    for (a, b), wt in weights.items():
        key = (int(i0[0]) + a, int(i0[1]) + b)
        if key in lookup:
            corners[a, b] = lookup[key]
        elif wt > 0:
            missing.append(tuple(float(v) for v in g.coord(key)))
    if missing:
        raise CoverageError(f"grid values missing at {missing}", missing)
    return bilinear_interpolate(corners, p, g.coord(i0), g)


def read_grid_csv(path) -> dict:
    """``lat,lon,value`` rows as a ``{(lat, lon): value}`` mapping."""
    out = {}
    for n, r in enumerate(read_rows(path), start=2):
        try:
            out[(float(r["lat"]), float(r["lon"]))] = float(r["value"])
        except (KeyError, TypeError, ValueError):
            raise ParseError("expected numeric lat,lon,value", n) from None
    return out


@dataclass(frozen=True)
class BoundingBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ValueError("empty bounding box")

    @property
    def bounds(self):
        return self

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.lat_min + self.lat_max) / 2, (self.lon_min + self.lon_max) / 2])

    def corners(self) -> np.ndarray:
        return np.array([[self.lat_min, self.lon_min], [self.lat_min, self.lon_max],
                         [self.lat_max, self.lon_min], [self.lat_max, self.lon_max]])

    def contains(self, P) -> np.ndarray:
        P = np.atleast_2d(P)
        return ((P[:, 0] >= self.lat_min) & (P[:, 0] <= self.lat_max)
                & (P[:, 1] >= self.lon_min) & (P[:, 1] <= self.lon_max))

    def grid(self, resolution) -> np.ndarray:
        """Regular lattice at ``resolution`` degrees, row-major in latitude."""
        lats = np.arange(self.lat_min, self.lat_max + resolution * 1e-9, resolution)
        lons = np.arange(self.lon_min, self.lon_max + resolution * 1e-9, resolution)
        la, lo = np.meshgrid(lats, lons, indexing="ij")
        return np.column_stack([la.ravel(), lo.ravel()])


CONUS_BOX = BoundingBox(24.0, 50.0, -125.0, -66.0)


@dataclass(frozen=True)
class PolygonRegion:
    """Region given by a ``(lat, lon)`` vertex ring, e.g. a land mask."""

    vertices: tuple

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[0] < 3:
            raise ValueError("polygon needs at least three vertices")
        object.__setattr__(self, "_shape", shapely.Polygon(v))

    @property
    def bounds(self) -> BoundingBox:
        v = np.asarray(self.vertices, dtype=float)
        return BoundingBox(v[:, 0].min(), v[:, 0].max(), v[:, 1].min(), v[:, 1].max())

    @property
    def center(self) -> np.ndarray:
        return self.bounds.center

    def contains(self, P) -> np.ndarray:
        P = np.atleast_2d(P)
        return shapely.intersects_xy(self._shape, P[:, 0], P[:, 1])

    @classmethod
    def from_csv(cls, path) -> "PolygonRegion":
        rows = read_rows(path)
        return cls(tuple((float(r["lat"]), float(r["lon"])) for r in rows))


@dataclass(frozen=True)
class DesignResult:
    points: np.ndarray
    achieved_min_dist: float
    seed: int = 0
    n_candidates: int = 0
    answered: np.ndarray | None = field(default=None, compare=False)

    def rows(self) -> list:
        return [{"lat": float(a), "lon": float(b)} for a, b in self.points]


def candidate_pool(region, n, rng) -> np.ndarray:
    """Bounding-box corners inside ``region`` followed by uniform draws, ``n`` in total."""
    box = region.bounds
    corners = box.corners()
    pool = [corners[region.contains(corners)]]
    have = len(pool[0])
    tries = 0
    while have < n:
        draw = np.column_stack([rng.uniform(box.lat_min, box.lat_max, 2 * (n - have) + 16),
                                rng.uniform(box.lon_min, box.lon_max, 2 * (n - have) + 16)])
        draw = draw[region.contains(draw)]
        pool.append(draw[: n - have])
        have += len(pool[-1])
        tries += 1
        if tries > 1000:
            raise InfeasibleDesignError("could not draw candidates inside the region")
    return np.vstack(pool)[:n]


def _min_dist(points, existing) -> float:
    d = math.inf
    if len(points) > 1:
        tree = cKDTree(points)
        dd, _ = tree.query(points, k=2)
        d = min(d, float(dd[:, 1].min()))
    if existing is not None and len(existing) and len(points):
        dd, _ = cKDTree(existing).query(points)
        d = min(d, float(dd.min()))
    return d


def greedy_maximin(pool, n_new, existing=None) -> np.ndarray:
    """Indices into ``pool`` chosen one at a time to maximise the minimum distance.

    Without existing points the first pick is the candidate farthest from the
    pool's bounding-box centre.
    """
    pool = np.asarray(pool, dtype=float)
    if n_new > len(pool):
        raise InfeasibleDesignError(f"{n_new} points requested from a pool of {len(pool)} candidates")
    chosen = []
    if existing is not None and len(existing):
        d, _ = cKDTree(np.asarray(existing, dtype=float)).query(pool)
        d = np.asarray(d, dtype=float)
    else:
        center = (pool.min(axis=0) + pool.max(axis=0)) / 2
        first = int(np.argmax(np.sum((pool - center) ** 2, axis=1)))
        d = np.sqrt(np.sum((pool - pool[first]) ** 2, axis=1))
        d[first] = -1.0
        chosen.append(first)
    chosen += _greedy_steps(pool, d, n_new - len(chosen))
    return np.array(chosen, dtype=int)


def _greedy_steps(pool, d, k):
    chosen = []
    for _ in range(k):
        i = int(np.argmax(d))
        if d[i] < 0:
            raise InfeasibleDesignError("candidate pool exhausted")
        chosen.append(i)
        d = np.minimum(d, np.sqrt(np.sum((pool - pool[i]) ** 2, axis=1)))
        d[i] = -1.0
    return chosen


def maximin_design(n_new, existing=(), region=CONUS_BOX, candidates=None, seed=0,
                   g: GridSpec | None = PAIRS_GRID) -> DesignResult:
    """Greedy maximin selection of ``n_new`` sites, snapped to ``g`` afterwards.

    Candidates (default ``100 * n_new``) are drawn uniformly in ``region``;
    each step picks the one farthest from the existing sites and the points
    already chosen. ``achieved_min_dist`` is measured after snapping.
    """
    if n_new < 1:
        raise ValueError("n_new must be at least 1")
    existing = _coords(existing)
    n_cand = 100 * n_new if candidates is None else int(candidates)
    rng = np.random.default_rng(seed)
    pool = candidate_pool(region, n_cand, rng)
    idx = greedy_maximin(pool, n_new, existing)
    pts = pool[idx]
    if g is not None:
        pts = snap_to_grid(pts, g)
    return DesignResult(pts, _min_dist(pts, existing), int(seed), len(pool))


def _coords(existing):
    if existing is None or len(existing) == 0:
        return np.empty((0, 2))
    first = existing[0]
    if isinstance(first, Site):
        return np.array([[s.lat, s.lon] for s in existing], dtype=float)
    return np.asarray(existing, dtype=float).reshape(-1, 2)


def design_min_dist(points, existing=()) -> float:
    return _min_dist(np.asarray(points, dtype=float).reshape(-1, 2), _coords(existing))


def simulate_rejections(points, n_reject, mode="northeast", seed=0) -> np.ndarray:
    """Boolean ``answered`` mask with ``n_reject`` points marked unanswered.

    ``mode="northeast"`` rejects the points with the largest ``lat + lon``;
    ``mode="random"`` rejects a seeded random subset.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    answered = np.ones(len(pts), dtype=bool)
    if n_reject <= 0:
        return answered
    if mode == "northeast":
        order = np.argsort(-(pts[:, 0] + pts[:, 1]), kind="stable")
    elif mode == "random":
        order = np.random.default_rng(seed).permutation(len(pts))
    else:
        raise ValueError(f"unknown rejection mode {mode!r}")
    answered[order[:n_reject]] = False
    return answered


def _timestamp(ts) -> str:
    if isinstance(ts, str):
        ts = _parse_time(ts)
    if ts.tzinfo is not None:
        ts = ts.astimezone(timezone.utc).replace(tzinfo=None)
    return ts.strftime(_TIME_FORMAT)


def _parse_time(text) -> datetime:
    text = text.strip()
    for fmt in (_TIME_FORMAT, "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d"):
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            pass
    raise ParseError(f"cannot parse timestamp {text!r}")


def build_pairs_query(layer_id, start, end, coords) -> str:
    """JSON point-query document for one layer over one time interval.

    ``coords`` is a sequence of ``(lat, lon)`` pairs, emitted as a flat
    ``lat, lon, lat, lon, ...`` list.
    """
    coords = [tuple(c) for c in coords]
    if not coords:
        raise EmptyInputError("at least one coordinate is required")
    s, e = _timestamp(start), _timestamp(end)
    if not _parse_time(s) < _parse_time(e):
        raise ValueError("start must precede end")
    flat = []
    for lat, lon in coords:
        flat += [float(lat), float(lon)]
    doc = {
        "layers": [{"id": str(layer_id)}],
        "temporal": {"intervals": [{"start": s, "end": e}]},
        "spatial": {"type": "point", "coordinates": flat},
    }
    return json.dumps(doc, separators=(",", ":"))


def parse_pairs_query(text) -> dict:
    """Inverse of :func:`build_pairs_query`."""
    try:
        doc = json.loads(text)
        layer = doc["layers"][0]["id"]
        iv = doc["temporal"]["intervals"][0]
        flat = doc["spatial"]["coordinates"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ParseError(f"not a point-query document: {exc}") from None
    if doc["spatial"].get("type") != "point" or len(flat) % 2:
        raise ParseError("spatial part must be type 'point' with an even number of values")
    return {
        "layer_id": layer,
        "start": _parse_time(iv["start"]),
        "end": _parse_time(iv["end"]),
        "coords": [(float(flat[i]), float(flat[i + 1])) for i in range(0, len(flat), 2)],
    }


def parse_pairs_response(text) -> list:
    """Point-query response records as ``(lat, lon, timestamp, value)`` tuples.

    Accepts a JSON object with a ``data`` list (or a bare list) of records
    carrying ``latitude``, ``longitude``, ``timestamp`` and ``value``.
    """
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise ParseError(f"response is not JSON: {exc}") from None
    recs = doc.get("data", []) if isinstance(doc, dict) else doc
    out = []
    for n, r in enumerate(recs):
        try:
            out.append((float(r["latitude"]), float(r["longitude"]), r.get("timestamp"), float(r["value"])))
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"record {n} lacks numeric latitude/longitude/value") from None
    return out


def match_responses(coords, records, g: GridSpec = PAIRS_GRID) -> np.ndarray:
    """Values for each requested coordinate by grid node; NaN where unanswered."""
    got = {tuple(int(i) for i in g.index((lat, lon))): v for lat, lon, _, v in records}
    return np.array([got.get(tuple(int(i) for i in g.index(c)), np.nan) for c in coords], dtype=float)


def write_design_csv(path, result: DesignResult, header_lines=()):
    write_rows(path, result.rows(), ["lat", "lon"], header_lines)
