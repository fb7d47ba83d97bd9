import csv
import hashlib
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from stefnet.cli import main
from stefnet.grid import DemandSeries, FactorSeries

GRID = {"min_lat": 40.0, "max_lat": 41.0, "min_lon": -74.0, "max_lon": -73.0,
        "width": 2, "height": 2, "resolution_minutes": 60}
ACCEPTANCE_SYNTH = {"W": 8, "H": 8, "M": 2, "T": 1440, "base_rate": 5.0, "factor_boost": [8, 12],
                    "daily_amplitude": 0.5, "noise": "poisson", "seed": 7}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else out), err


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture
def small_dataset(tmp_path, capsys):
    cfg = write_json(tmp_path / "synth.json", {"W": 3, "H": 3, "M": 1, "T": 336, "factor_boost": [6],
                                               "daily_amplitude": 0.5, "seed": 2})
    code, _, _ = run(capsys, "synth", "--config", cfg, "--out", tmp_path / "ds")
    assert code == 0
    return tmp_path / "ds"


def test_synth_happy_path(tmp_path, capsys, small_dataset):
    for name in ("demand.bin", "factors.bin", "pois.json", "grid.json", "manifest.json"):
        assert (small_dataset / name).exists()
    manifest = json.loads((small_dataset / "manifest.json").read_text())
    cfg = tmp_path / "synth.json"
    assert manifest["command"] == "synth" and manifest["config"]["seed"] == 2
    assert manifest["inputs"] == {str(cfg): hashlib.sha256(cfg.read_bytes()).hexdigest()}
    assert set(manifest) == {"command", "config", "inputs", "seed", "version", "outputs", "wall_time"}
    assert DemandSeries.load(small_dataset / "demand.bin").counts.shape == (336, 3, 3)


def test_synth_malformed_config(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"W": 3,')
    code, _, err = run(capsys, "synth", "--config", cfg, "--out", tmp_path / "ds")
    assert code == 1 and "malformed JSON" in err
    assert not (tmp_path / "ds").exists()
    write_json(cfg, {"W": -1})
    code, _, err = run(capsys, "synth", "--config", cfg, "--out", tmp_path / "ds")
    assert code == 1 and not (tmp_path / "ds").exists()


def test_synth_byte_identical(tmp_path, capsys):
    cfg = write_json(tmp_path / "s.json", {"W": 3, "H": 2, "T": 48})
    for out in ("a", "b"):
        assert run(capsys, "synth", "--config", cfg, "--seed", 9, "--out", tmp_path / out)[0] == 0
    for name in ("demand.bin", "factors.bin", "pois.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["rasterize", "--out", "x"])
    assert exc.value.code == 1


# --- rasterize / encode-factors --------------------------------------------

def trips_csv(path, rows, header=("pickup_datetime", "pickup_latitude", "pickup_longitude")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def test_rasterize_three_trip_fixture(tmp_path, capsys):
    grid = write_json(tmp_path / "grid.json", GRID)
    trips = trips_csv(tmp_path / "t.csv", [
        ("2024-01-01T00:10:00", 40.25, -73.25),   # slot 0, w=1 (lon), h=0 (lat)
        ("2024-01-01T01:59:59", 40.75, -73.25),   # slot 1, w=1, h=1
        ("2024-01-01T01:00:00", 40.75, -73.25),   # slot 1, w=1, h=1
        ("2024-01-01T05:00:00", 40.75, -73.75),   # outside the 3-hour range
    ])
    out = tmp_path / "d.bin"
    code, report, _ = run(capsys, "rasterize", "--trips", trips, "--grid", grid,
                          "--start", "2024-01-01T00:00:00Z", "--hours", 3, "--out", out)
    assert code == 0
    assert report == {"out": str(out), "trips": 4, "rasterized": 3, "dropped": 1}
    expect = np.zeros((3, 2, 2), int)
    expect[0, 1, 0] = 1
    expect[1, 1, 1] = 2
    np.testing.assert_array_equal(DemandSeries.load(out).counts, expect)
    assert (tmp_path / "d.bin.manifest.json").exists()


def test_rasterize_missing_column(tmp_path, capsys):
    grid = write_json(tmp_path / "grid.json", GRID)
    trips = trips_csv(tmp_path / "t.csv", [], header=("time", "pickup_latitude", "pickup_longitude"))
    code, _, err = run(capsys, "rasterize", "--trips", trips, "--grid", grid,
                       "--start", "2024-01-01T00:00:00", "--hours", 3, "--out", tmp_path / "d.bin")
    assert code == 1 and "pickup_datetime" in err
    assert not (tmp_path / "d.bin").exists()


def test_rasterize_empty_body(tmp_path, capsys):
    grid = write_json(tmp_path / "grid.json", GRID)
    trips = trips_csv(tmp_path / "t.csv", [])
    code, report, err = run(capsys, "rasterize", "--trips", trips, "--grid", grid,
                            "--start", "2024-01-01T00:00:00", "--hours", 5, "--out", tmp_path / "d.bin")
    assert code == 0 and "no trip rows" in err and report["trips"] == 0
    np.testing.assert_array_equal(DemandSeries.load(tmp_path / "d.bin").counts, np.zeros((5, 2, 2)))


def test_encode_factors(tmp_path, capsys):
    grid = write_json(tmp_path / "grid.json", GRID)
    pois = tmp_path / "p.json"
    pois.write_text(json.dumps([
        {"name": "arena", "lat": 40.9, "lon": -73.1, "factor_index": 1,
         "active_hours": [2], "active_days": [0]},
        {"name": "offmap", "lat": 10.0, "lon": 10.0, "factor_index": 0,
         "active_hours": [2], "active_days": [0]},
    ]))
    out = tmp_path / "f.bin"
    code, report, _ = run(capsys, "encode-factors", "--pois", pois, "--grid", grid,
                          "--start", "2024-01-01T00:00:00", "--hours", 4, "--out", out)
    assert code == 0 and report["skipped"] == ["offmap"] and report["M"] == 2
    f = FactorSeries.load(out).factors
    assert f.sum() == 1 and f[2, 1, 1, 1] == 1


# --- train / evaluate / roll -----------------------------------------------

@pytest.fixture
def trained(tmp_path, capsys, small_dataset):
    ckpt = tmp_path / "m.ckpt"
    code, report, _ = run(capsys, "train", "--demand", small_dataset / "demand.bin",
                          "--factors", small_dataset / "factors.bin", "--out", ckpt,
                          "--K", 3, "--d", 6, "--u", 6, "--max-epochs", 2, "--window", 24,
                          "--seed", 1)
    assert code == 0
    return ckpt, report


def data_args(ds):
    return ["--demand", ds / "demand.bin", "--factors", ds / "factors.bin"]


def test_train_outputs(tmp_path, trained):
    ckpt, report = trained
    assert report["epochs"] == 2 and report["stopped_reason"] == "max_epochs"
    assert json.loads((tmp_path / "m.ckpt.report.json").read_text())["val_loss"] == report["val_loss"]
    manifest = json.loads((tmp_path / "m.ckpt.manifest.json").read_text())
    assert manifest["seed"] == 1
    assert manifest["config"]["train"]["learning_rate"] == 0.001
    assert manifest["config"]["train"]["batch_size"] == 256
    assert manifest["config"]["split_ratios"] == [0.65, 0.15, 0.2]
    for path, digest in manifest["inputs"].items():
        assert hashlib.sha256(open(path, "rb").read()).hexdigest() == digest


def test_train_malformed_config(tmp_path, capsys, small_dataset):
    cfg = write_json(tmp_path / "t.json", {"train": {"learning_rate": -1}})
    code, _, _ = run(capsys, "train", *data_args(small_dataset), "--config", cfg,
                     "--out", tmp_path / "x.ckpt")
    assert code == 1 and not (tmp_path / "x.ckpt").exists()


def test_evaluate_split_tag(tmp_path, capsys, small_dataset, trained):
    ckpt, _ = trained
    code, report, _ = run(capsys, "evaluate", *data_args(small_dataset), "--checkpoint", ckpt,
                          "--split", "train", "--out", tmp_path / "e.json")
    assert code == 0
    assert report["horizon"] == "one_step" and report["dataset_tag"] == "train"
    assert json.loads((tmp_path / "e.json").read_text()) == report


def test_evaluate_baseline(tmp_path, capsys, small_dataset):
    code, report, _ = run(capsys, "evaluate", *data_args(small_dataset), "--baseline",
                          "--out", tmp_path / "b.json", "--window", 24)
    assert code == 0 and report["dataset_tag"] == "test" and report["mae"] > 0


def test_roll(tmp_path, capsys, small_dataset, trained):
    ckpt, _ = trained
    out = tmp_path / "r.json"
    code, report, _ = run(capsys, "roll", *data_args(small_dataset), "--checkpoint", ckpt,
                          "--window", 24, "--out", out)
    assert code == 0 and report["horizon"] == "rolling" and report["window"] == 24
    lines = (tmp_path / "r.trace.csv").read_text().splitlines()
    assert lines[0] == "step,mae,rmse" and len(lines) == 25


def test_roll_window_too_large(tmp_path, capsys, small_dataset, trained):
    ckpt, _ = trained
    code, _, err = run(capsys, "roll", *data_args(small_dataset), "--checkpoint", ckpt,
                       "--window", 10_000, "--out", tmp_path / "r.json")
    assert code == 1 and "does not fit" in err
    assert not (tmp_path / "r.json").exists()


def test_checkpoint_dataset_mismatch(tmp_path, capsys, trained):
    ckpt, _ = trained
    cfg = write_json(tmp_path / "s4.json", {"W": 4, "H": 3, "M": 1, "T": 240, "factor_boost": [6]})
    assert run(capsys, "synth", "--config", cfg, "--out", tmp_path / "ds4")[0] == 0
    code, _, err = run(capsys, "evaluate", *data_args(tmp_path / "ds4"), "--checkpoint", ckpt,
                       "--out", tmp_path / "e.json", "--window", 24)
    assert code == 1 and "W=3" in err


def test_module_entry_point(tmp_path):
    cfg = write_json(tmp_path / "s.json", {"W": 2, "H": 2, "T": 24})
    proc = subprocess.run([sys.executable, "-m", "stefnet", "synth", "--config", str(cfg),
                           "--out", str(tmp_path / "ds")], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["T"] == 24


def test_acceptance_config_pipeline(tmp_path, capsys):
    cfg = write_json(tmp_path / "synth.json", ACCEPTANCE_SYNTH)
    ds = tmp_path / "ds"
    assert run(capsys, "synth", "--config", cfg, "--out", ds)[0] == 0
    ckpt = tmp_path / "m.ckpt"
    code, report, _ = run(capsys, "train", *data_args(ds), "--d", 32, "--u", 32, "--patience", 20,
                          "--max-epochs", 2, "--out", ckpt)
    assert code == 0 and all(math.isfinite(v) for v in report["val_loss"])
    for argv in (["evaluate", "--checkpoint", ckpt, "--out", tmp_path / "e.json"],
                 ["roll", "--checkpoint", ckpt, "--out", tmp_path / "r.json"]):
        code, metrics, _ = run(capsys, *argv, *data_args(ds))
        assert code == 0
        for key in ("mae", "rmse", "mape"):
            assert math.isfinite(metrics[key])
        assert {"mape_excluded_cells", "horizon", "dataset_tag"} <= set(metrics)
