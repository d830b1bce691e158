import argparse
import json

import numpy as np
import pytest

from solarfusion.cli import grid_points, main, top_region_fractions
from solarfusion.data import read_metadata, read_rows, write_csv, write_rows
from solarfusion.evaluation import ComparisonReport
from solarfusion.synthetic import calibration_dataset, dataset_with_sources, uniform_coords

from test_design import REFERENCE_QUERY


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    ds = calibration_dataset(n_sites=20, seed=1)
    write_csv(ds, d / "long.csv", "long")
    write_csv(ds, d / "wide.csv", "wide")
    extra = dataset_with_sources(uniform_coords(6, np.random.default_rng(9)), prefix="aug",
                                 simA=np.random.default_rng(9).normal(200, 10, 6),
                                 simB=np.random.default_rng(10).normal(200, 10, 6))
    write_csv(extra, d / "augment.csv", "long")
    return d


def run(*argv):
    return main([str(a) for a in argv])


def body(path):
    return [ln for ln in open(path) if not ln.startswith("#")]


def test_aggregate_deterministic(data_dir, tmp_path):
    for k in ("a", "b"):
        assert run("aggregate", "--input", data_dir / "long.csv", "--out-dir", tmp_path / k) == 0
    for name in ("aggregate_field.csv", "excluded_field.csv", "quality.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    meta = read_metadata(tmp_path / "a" / "aggregate_field.csv")
    assert meta["command"] == "aggregate" and meta["seed"] == "0" and "config_hash" in meta


def test_missing_input(tmp_path, capsys):
    assert run("aggregate", "--input", tmp_path / "nope.csv", "--out-dir", tmp_path) != 0
    assert "nope.csv" in capsys.readouterr().err


def test_wide_equals_long(data_dir, tmp_path):
    run("aggregate", "--input", data_dir / "long.csv", "--out-dir", tmp_path / "l")
    run("aggregate", "--input", data_dir / "wide.csv", "--schema", "wide", "--out-dir", tmp_path / "w")
    for src in ("field", "simA", "simB"):
        name = f"aggregate_{src}.csv"
        assert body(tmp_path / "l" / name) == body(tmp_path / "w" / name)


def test_predict_grid_shape(data_dir, tmp_path):
    rc = run("predict-grid", "--input", data_dir / "long.csv", "--comparator", "field-hat",
             "--box", "0 0.9 0 0.9", "--grid-resolution", 0.1, "--starts", 2, "--out-dir", tmp_path)
    assert rc == 0
    rows = read_rows(tmp_path / "grid.csv")
    assert len(rows) == 100 and list(rows[0]) == ["lat", "lon", "mean", "var"]
    assert read_metadata(tmp_path / "grid.csv")["comparator"] == "field-hat"


def test_predict_grid_true_sim_infeasible(data_dir, tmp_path, capsys):
    rc = run("predict-grid", "--input", data_dir / "long.csv", "--comparator", "ivw", "--out-dir", tmp_path)
    assert rc == 2
    assert "InfeasibleComparatorError" in capsys.readouterr().err
    assert not (tmp_path / "grid.csv").exists()


def test_continental_grid_scale():
    ns = argparse.Namespace(points=None, polygon=None, box=None, grid_points=80_000, grid_resolution=0.05)
    assert abs(len(grid_points(ns)) - 80_000) < 0.03 * 80_000


def test_cv_report_and_rerun(data_dir, tmp_path):
    args = ["cv", "--input", data_dir / "long.csv", "--comparators", "field-hat,simA-hat+b", "--starts", 2]
    assert run(*args, "--out-dir", tmp_path / "a") == 0
    assert run(*args, "--out-dir", tmp_path / "b") == 0
    for name in ("report.json", "report.csv", "report.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    text = (tmp_path / "a" / "report.json").read_text()
    rep = ComparisonReport.from_json("\n".join(ln for ln in text.splitlines() if not ln.startswith("#")))
    assert len([p for p in rep.pairwise if p["kind"] == "row"]) == 1
    assert rep.metadata["refit"] == "full"


def test_cv_augmented_adds_cross_column(data_dir, tmp_path):
    rc = run("cv", "--input", data_dir / "long.csv", "--augment", data_dir / "augment.csv",
             "--comparators", "simA-hat,simA-hat+b", "--starts", 2, "--out-dir", tmp_path)
    assert rc == 0
    assert (tmp_path / "report_baseline.json").exists()
    rows = read_rows(tmp_path / "report.csv")
    assert "p_cross" in rows[0] and all(r["p_cross"] != "" for r in rows)
    assert len(rows[0]) == 7


def test_config_file(data_dir, tmp_path, capsys):
    conf = tmp_path / "run.conf"
    conf.write_text("# design settings\nn-new = 4\ncandidates = 200\nbox = 30 40 -110 -100\nseed = 5\n")
    assert run("design", "--config", conf, "--out-dir", tmp_path) == 0
    meta = read_metadata(tmp_path / "design.csv")
    assert meta["seed"] == "5" and meta["n_new"] == "4"
    assert len(read_rows(tmp_path / "design.csv")) == 4
    conf.write_text("n-nwe = 4\n")
    assert run("design", "--config", conf, "--out-dir", tmp_path) == 2


def test_pairs_query_default(tmp_path):
    coords = "37.6642 -121.6073 37.6969 -121.6073 37.6642 -121.5746 37.6969 -121.5746"
    assert run("pairs-query", "--coords", coords, "--out", tmp_path / "q.json") == 0
    got = (tmp_path / "q.json").read_text()
    assert "".join(got.split()) == "".join(REFERENCE_QUERY.split())
    assert json.loads(got)["layers"][0]["id"] == "1400"


def test_calibrate_and_fuse(data_dir, tmp_path):
    pts = tmp_path / "pts.csv"
    write_rows(pts, [{"lat": 0.2, "lon": 0.3}, {"lat": 0.7, "lon": 0.6}], ["lat", "lon"])
    assert run("calibrate", "--field", data_dir / "long.csv", "--points", pts, "--starts", 2,
               "--out", tmp_path / "a.csv") == 0
    assert run("calibrate", "--field", data_dir / "long.csv", "--sim-source", "simB", "--points", pts,
               "--starts", 2, "--out", tmp_path / "b.csv") == 0
    assert run("fuse", tmp_path / "a.csv", tmp_path / "b.csv", "--out", tmp_path / "f.csv") == 0
    va = [float(r["var"]) for r in read_rows(tmp_path / "a.csv")]
    vb = [float(r["var"]) for r in read_rows(tmp_path / "b.csv")]
    vf = [float(r["var"]) for r in read_rows(tmp_path / "f.csv")]
    assert all(f < min(a, b) for a, b, f in zip(va, vb, vf))


# top-regions

def test_single_point_fractions():
    top, conf = top_region_fractions(np.full((1, 365), 200.0), np.zeros((1, 365)))
    assert top[0] == 1.0 and conf[0] == 1.0


def test_dominant_point():
    rng = np.random.default_rng(0)
    M = rng.uniform(100, 200, (30, 365))
    M[7] = 500.0
    top, conf = top_region_fractions(M, np.ones_like(M))
    assert top[7] == 1.0 and conf[7] == 1.0
    others = np.delete(top, 7)
    assert others.max() <= 0.2 and others.mean() <= 0.1


def test_alternating_pair():
    M = np.tile([[1.0, 0.0], [0.0, 1.0]], (1, 183))[:, :365] + 200
    top, _ = top_region_fractions(M, np.zeros_like(M))
    np.testing.assert_allclose(top, 0.5, atol=0.01)


def _write_days(d, days, n=3):
    for day in days:
        rows = [{"lat": float(i), "lon": 0.0, "day": day, "mean": 100.0 + i, "var": 1.0} for i in range(n)]
        write_rows(d / f"grid_day{day:04d}.csv", rows, ["lat", "lon", "day", "mean", "var"])


def test_top_regions_command(tmp_path, capsys):
    g = tmp_path / "grid"
    g.mkdir()
    _write_days(g, range(364))
    assert run("top-regions", "--grid-dir", g, "--out-dir", tmp_path) == 2
    assert "IncompleteYearError" in capsys.readouterr().err
    _write_days(g, [364])
    assert run("top-regions", "--grid-dir", g, "--out-dir", tmp_path) == 0
    rows = read_rows(tmp_path / "top_regions.csv")
    assert [float(r["frac_top10"]) for r in rows] == [0.0, 0.0, 1.0]
