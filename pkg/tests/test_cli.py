import csv
import io
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from evpoi.cli import main

FAST = ["--iterations", "5", "--m", "10", "--step-size", "0.05"]


def run(args, code=0):
    res = CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)
    assert res.exit_code == code, res.output
    return res


def last_path(res) -> Path:
    return Path(res.output.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    syn = last_path(run(["synth", "--out", base, "--n-stations", 40, "--seed", 3]))
    ing = last_path(run(["ingest", "--stations", syn / "stations.csv", "--pois", syn / "pois.csv", "--out", base]))
    tr = last_path(run(["train", "--bundle", ing / "dataset.json", "--out", base, *FAST]))
    return base, syn, ing, tr


def test_synth_outputs(pipeline):
    _, syn, _, _ = pipeline
    assert {p.name for p in syn.iterdir()} == {"dataset.json", "truth.json", "stations.csv", "pois.csv"}
    assert json.loads((syn / "truth.json").read_text())["config"]["n_stations"] == 40


def test_ingest_outputs(pipeline):
    _, _, ing, _ = pipeline
    report = (ing / "ingest_report.txt").read_text()
    assert "stations: 40" in report and "bundle_sha256:" in report


def test_train_outputs(pipeline):
    _, _, _, tr = pipeline
    assert (tr / "model.json").exists()
    rows = list(csv.DictReader(io.StringIO((tr / "trace.csv").read_text())))
    assert len(rows) == 6 and "grad_theta" in rows[0]
    assert "final_elbo" in (tr / "summary.txt").read_text()


def test_interpret_and_predict(pipeline):
    base, _, ing, tr = pipeline
    out = last_path(run(["interpret", "--model", tr / "model.json", "--out", base, "--component", "h0",
                         "--component", "Education", "--cell", 0.5]))
    assert (out / "type_summary.csv").read_text().startswith("type,cutoff_km,avg_effect,sd\n")
    assert (out / "raster_Education.csv").exists() and (out / "raster_h0.geojson").exists()
    pred = last_path(run(["predict", "--model", tr / "model.json", "--bundle", ing / "dataset.json", "--out", base]))
    lines = (pred / "predictions.csv").read_text().splitlines()
    assert lines[0].startswith("id,mean,variance,utilization,g,h0") and len(lines) == 41


def test_predict_from_station_csv(pipeline):
    base, syn, _, tr = pipeline
    pred = last_path(run(["predict", "--model", tr / "model.json", "--stations", syn / "stations.csv",
                          "--out", base]))
    assert len((pred / "predictions.csv").read_text().splitlines()) == 41


def test_predict_needs_one_source(pipeline):
    base, _, _, tr = pipeline
    run(["predict", "--model", tr / "model.json", "--out", base], code=2)


def test_rerun_is_byte_identical(pipeline):
    base, _, ing, tr = pipeline
    before = (tr / "model.json").read_bytes()
    again = last_path(run(["train", "--bundle", ing / "dataset.json", "--out", base, *FAST]))
    assert again == tr and (again / "model.json").read_bytes() == before


def test_config_file_overrides_flags(pipeline, tmp_path):
    base, _, ing, _ = pipeline
    conf = tmp_path / "c.txt"
    conf.write_text("# fast run\niterations = 3\nm = 8\n")
    out = last_path(run(["train", "--bundle", ing / "dataset.json", "--out", base, "--iterations", 50,
                         "--config", conf]))
    assert "inducing_points: 8" in (out / "summary.txt").read_text()
    assert len((out / "trace.csv").read_text().splitlines()) == 5


def test_unknown_config_key(pipeline, tmp_path):
    base, _, ing, _ = pipeline
    conf = tmp_path / "c.txt"
    conf.write_text("learning_rate = 3\n")
    res = run(["train", "--bundle", ing / "dataset.json", "--out", base, "--config", conf], code=2)
    assert "unknown config key" in res.output


def test_bad_model_file_is_exit_4(pipeline, tmp_path):
    base, _, _, _ = pipeline
    bad = tmp_path / "m.json"
    bad.write_text(json.dumps({"format": "evpoi-model", "version": 99}))
    res = run(["interpret", "--model", bad, "--out", base], code=4)
    assert "version" in res.output


def test_invalid_station_file_is_exit_2(tmp_path):
    st = tmp_path / "s.csv"
    st.write_text("id,lon,lat,utilization,pop_density,income,car_density,major_road\n"
                  "a,4.9,52.3,-0.5,1,1,1,0\n")
    po = tmp_path / "p.csv"
    po.write_text("id,lon,lat,type\nr1,4.9,52.3,Restaurant\n")
    res = run(["ingest", "--stations", st, "--pois", po, "--out", tmp_path], code=2)
    assert "validation" in res.output


def test_empty_poi_file_is_exit_2(pipeline, tmp_path):
    _, syn, _, _ = pipeline
    po = tmp_path / "p.csv"
    po.write_text("id,lon,lat,type\n")
    run(["ingest", "--stations", syn / "stations.csv", "--pois", po, "--out", tmp_path], code=2)


def test_missing_file_and_unknown_flag(tmp_path):
    run(["train", "--bundle", tmp_path / "nope.json", "--out", tmp_path], code=2)
    run(["train", "--bogus"], code=2)


def test_help_lists_commands():
    out = run(["--help"]).output
    for cmd in ("ingest", "train", "interpret", "predict", "benchmark", "sensitivity", "synth"):
        assert cmd in out
