import itertools
import json
import math
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from solarfusion.data import Site
from solarfusion.design import (CONUS_BOX, PAIRS_GRID, PAIRS_STEP, BoundingBox, GridSpec, PolygonRegion,
                                bilinear_interpolate, build_pairs_query, candidate_pool, cell_corners,
                                design_min_dist, interpolate_offgrid, match_responses, maximin_design,
                                parse_pairs_query, parse_pairs_response, read_grid_csv, simulate_rejections,
                                snap_to_grid)
from solarfusion.errors import CoverageError, EmptyInputError, InfeasibleDesignError, OutOfCellError

import oracles

FIXTURES = Path(__file__).parent / "fixtures"
UNIT = BoundingBox(0.0, 1.0, 0.0, 1.0)


def test_step_value():
    assert PAIRS_STEP == 0.032768


def test_snap_examples():
    assert snap_to_grid((0.0, 0.0)) == (0.0, 0.0)
    assert snap_to_grid((0.032768 * 3 + 1e-9, 0.0)) == (0.098304, 0.0)
    got = snap_to_grid((37.69, -121.6))
    assert got == pytest.approx((oracles.snap_int(37.69, PAIRS_STEP), oracles.snap_int(-121.6, PAIRS_STEP)),
                                abs=1e-9)
    assert got == (37.6832, -121.602048)


def test_snap_ties_go_up():
    assert snap_to_grid((0.5, -0.5), GridSpec(1.0)) == (1.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-90, 90), st.floats(-180, 180))
def test_snap_idempotent_and_matches_oracle(lat, lon):
    s = snap_to_grid((lat, lon))
    assert snap_to_grid(s) == s
    assert s[0] == pytest.approx(oracles.snap_int(lat, PAIRS_STEP), abs=1e-9)
    assert abs(s[0] - lat) <= PAIRS_STEP / 2 + 1e-9


def test_bilinear_cases():
    g = GridSpec(1.0)
    assert bilinear_interpolate([7, 7, 7, 7], (0.3, 0.8), (0, 0), g) == 7.0
    for (i, j), v in zip(itertools.product((0, 1), (0, 1)), (0, 1, 2, 3)):
        assert bilinear_interpolate([0, 1, 2, 3], (i, j), (0, 0), g) == v
    assert bilinear_interpolate([0, 1, 2, 3], (0.5, 0.5), (0, 0), g) == 1.5
    with pytest.raises(OutOfCellError):
        bilinear_interpolate([0, 1, 2, 3], (1.2, 0.5), (0, 0), g)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5),
       st.floats(0, 1), st.floats(0, 1), st.integers(-3000, 3000), st.integers(-3000, 3000))
def test_bilinear_reproduces_bilinear_functions(a, b, c, d, u, w, i, j):
    f = lambda la, lo: a + b * la + c * lo + d * la * lo
    origin = PAIRS_GRID.coord((i, j))
    nodes = [origin + PAIRS_STEP * np.array(o) for o in ((0, 0), (0, 1), (1, 0), (1, 1))]
    p = origin + PAIRS_STEP * np.array([u, w])
    got = bilinear_interpolate([f(*n) for n in nodes], p, origin)
    want = oracles.bilinear(*(f(*n) for n in (nodes[0], nodes[2], nodes[1], nodes[3])), u, w)
    assert got == pytest.approx(f(*p), abs=1e-6)
    assert got == pytest.approx(want, abs=1e-9)


def test_offgrid_on_grid_site():
    node = tuple(PAIRS_GRID.coord((1000, -3000)))
    assert interpolate_offgrid(Site("a", *node), {node: 42.0}) == 42.0


def test_offgrid_worked_case_fixture():
    grid = read_grid_csv(FIXTURES / "pairs_cell_375.csv")
    assert sorted(grid) == sorted(cell_corners((37.69, -121.6)))
    assert interpolate_offgrid(Site("x", 37.69, -121.6), grid) == pytest.approx(375.37, abs=1e-9)
    u = 37.69 / PAIRS_STEP - 1150
    w = -121.6 / PAIRS_STEP + 3711
    vals = [grid[(37.6832, -121.602048)], grid[(37.715968, -121.602048)],
            grid[(37.6832, -121.56928)], grid[(37.715968, -121.56928)]]
    assert oracles.bilinear(*vals, u, w) == pytest.approx(375.37, abs=1e-9)


def test_offgrid_linear_in_lat():
    p = (40.01, -100.02)
    grid = {c: 3.0 + 2.0 * c[0] for c in cell_corners(p)}
    assert interpolate_offgrid(p, grid) == pytest.approx(3.0 + 2.0 * 40.01, abs=1e-9)


def test_offgrid_missing_corner_listed():
    p = (40.01, -100.02)
    corners = cell_corners(p)
    grid = {c: 1.0 for c in corners[:3]}
    with pytest.raises(CoverageError) as e:
        interpolate_offgrid(p, grid)
    assert e.value.missing == [corners[3]]


# the query listing as printed, with the opening bracket of the coordinate list restored
REFERENCE_QUERY = ('{"layers":[{"id":"1400"}],"temporal": {"intervals":'
               '  [{"start":"2016-04-14T23:00:00Z","end":"2016-04-15T00:00:00Z"}]},'
               '"spatial":{"type":"point","coordinates":'
               '  [37.6642,-121.6073,37.6969,-121.6073,37.6642,-121.5746,37.6969,-121.5746]}}')
REFERENCE_COORDS = [(37.6642, -121.6073), (37.6969, -121.6073), (37.6642, -121.5746), (37.6969, -121.5746)]


def test_query_matches_listing():
    q = build_pairs_query("1400", "2016-04-14T23:00:00Z", "2016-04-15T00:00:00Z", REFERENCE_COORDS)
    strip = lambda s: "".join(s.split())
    assert strip(q) == strip(REFERENCE_QUERY)
    assert list(json.loads(q)) == ["layers", "temporal", "spatial"]


def test_query_single_and_errors():
    q = json.loads(build_pairs_query("7", datetime(2020, 1, 1), datetime(2020, 1, 2), [(1.5, -2.5)]))
    assert q["spatial"]["coordinates"] == [1.5, -2.5]
    with pytest.raises(EmptyInputError):
        build_pairs_query("7", "2020-01-01", "2020-01-02", [])
    with pytest.raises(ValueError):
        build_pairs_query("7", "2020-01-02", "2020-01-01", [(1, 2)])


@settings(max_examples=100, deadline=None)
@given(st.text("0123456789abc", min_size=1, max_size=6),
       st.datetimes(datetime(1990, 1, 1), datetime(2040, 1, 1)), st.integers(1, 10 ** 6),
       st.lists(st.tuples(st.floats(-90, 90), st.floats(-180, 180)), min_size=1, max_size=8))
def test_query_round_trip(layer, start, secs, coords):
    start = start.replace(microsecond=0)
    end = start + timedelta(seconds=secs)
    q = parse_pairs_query(build_pairs_query(layer, start, end, coords))
    assert q == {"layer_id": layer, "start": start, "end": end, "coords": [tuple(map(float, c)) for c in coords]}


def test_response_matching_and_rejections():
    coords = [snap_to_grid(c) for c in REFERENCE_COORDS]
    text = json.dumps({"data": [{"latitude": c[0], "longitude": c[1], "timestamp": 0, "value": 10.0 + k}
                                for k, c in enumerate(coords) if k != 2]})
    vals = match_responses(coords, parse_pairs_response(text))
    assert np.isnan(vals[2]) and vals[3] == 13.0
    pts = np.array(REFERENCE_COORDS)
    mask = simulate_rejections(pts, 1)
    assert mask.sum() == 3 and not mask[3]
    assert simulate_rejections(pts, 2, "random", seed=1).sum() == 2


def test_single_point_goes_to_corner():
    r = maximin_design(1, [UNIT.center], region=UNIT, candidates=500, g=None)
    assert any(np.allclose(r.points[0], c) for c in UNIT.corners())
    assert r.achieved_min_dist == pytest.approx(math.sqrt(0.5))


def test_two_points_opposite_corners_vs_exhaustive():
    r = maximin_design(2, region=UNIT, candidates=400, g=None, seed=3)
    pool = candidate_pool(UNIT, 400, np.random.default_rng(3))
    best = max(np.linalg.norm(a - b) for a, b in itertools.combinations(pool, 2))
    assert r.achieved_min_dist == pytest.approx(best) == pytest.approx(math.sqrt(2))


def test_single_point_equals_exhaustive_argmax():
    rng = np.random.default_rng(4)
    existing = rng.uniform(0, 1, (15, 2))
    r = maximin_design(1, existing, region=UNIT, candidates=300, seed=5, g=None)
    pool = candidate_pool(UNIT, 300, np.random.default_rng(5))
    scores = [min(np.linalg.norm(p - e) for e in existing) for p in pool]
    np.testing.assert_array_equal(r.points[0], pool[int(np.argmax(scores))])


def test_min_dist_non_increasing_in_n():
    rng = np.random.default_rng(6)
    existing = rng.uniform(0, 1, (10, 2))
    d = [maximin_design(n, existing, region=UNIT, candidates=800, seed=7, g=GridSpec(0.01)).achieved_min_dist
         for n in range(1, 12)]
    assert all(a >= b for a, b in zip(d, d[1:]))


def test_conus_thousand_points():
    rng = np.random.default_rng(8)
    stations = np.column_stack([rng.uniform(25, 49, 1535), rng.uniform(-124, -67, 1535)])
    r = maximin_design(1000, stations, region=CONUS_BOX, seed=0)
    assert r.points.shape == (1000, 2) and r.n_candidates == 100_000
    assert r.achieved_min_dist > 0
    d = np.sqrt(((r.points[:, None] - stations[None]) ** 2).sum(-1))
    assert d.min() >= r.achieved_min_dist - 1e-12
    idx = PAIRS_GRID.index(r.points)
    np.testing.assert_allclose(r.points, PAIRS_GRID.coord(idx), atol=1e-9)
    assert r.achieved_min_dist == pytest.approx(design_min_dist(r.points, stations))


def test_pool_exhausted():
    with pytest.raises(InfeasibleDesignError):
        maximin_design(20, region=UNIT, candidates=10)


def test_polygon_region():
    tri = PolygonRegion(((0.0, 0.0), (1.0, 0.0), (0.0, 1.0)))
    r = maximin_design(15, region=tri, candidates=600, g=None)
    assert tri.contains(r.points).all()
