from __future__ import annotations

import filecmp
import json
import subprocess
import sys

import numpy as np
import pytest

from rbflio.cli import main, read_trajectory
from rbflio.evaluation import evaluate
from rbflio.sim import write_bundle


@pytest.fixture(scope="module")
def bundle_dir(small_bundle, tmp_path_factory):
    return write_bundle(small_bundle, tmp_path_factory.mktemp("cli") / "seq")


@pytest.fixture(scope="module")
def run_dir(bundle_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "est"
    assert main(["run", "--bundle", str(bundle_dir), "--out", str(out)]) == 0
    return out


def test_usage_errors(capsys, tmp_path):
    assert main([]) == 1
    assert main(["simulate", "--scene", "moon", "--out", str(tmp_path / "x")]) == 1
    assert main(["simulate", "--bogus"]) == 1
    assert main(["run", "--out", str(tmp_path / "x")]) == 1  # no bundle
    assert main(["run", "--bundle", "b", "--out", "o", "--set", "novalue"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_data_errors(bundle_dir, tmp_path):
    assert main(["run", "--bundle", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "--bundle", str(bundle_dir), "--out", str(tmp_path / "o"), "--set", "solver.nope=1"]) == 2
    assert main(["run", "--config", str(tmp_path / "none.yaml"), "--bundle", str(bundle_dir),
                 "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "bad.rbft").write_bytes(b"junk")
    assert main(["export-terrain", "--snapshot", str(tmp_path / "bad.rbft"), "--out", str(tmp_path / "g.csv")]) == 2


def test_simulate_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--scene", "flat", "--seed", "5", "--out", str(tmp_path / name)]) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert not filecmp.dircmp(tmp_path / "a" / "scans", tmp_path / "b" / "scans").diff_files


def test_run_outputs(run_dir):
    for f in ("trajectory.csv", "diagnostics.jsonl", "terrain.rbft", "config.yaml"):
        assert (run_dir / f).exists()


def test_run_with_config_and_toggles(bundle_dir, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"bundle: {bundle_dir}\nsolver:\n  lambda_manifold: 0.0\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "zero")]) == 0
    assert main(["run", "--bundle", str(bundle_dir), "--no-manifold", "--out", str(tmp_path / "off")]) == 0
    a = np.loadtxt(tmp_path / "zero" / "trajectory.csv", delimiter=",", skiprows=1)
    b = np.loadtxt(tmp_path / "off" / "trajectory.csv", delimiter=",", skiprows=1)
    assert np.array_equal(a, b)
    assert "manifold: false" in (tmp_path / "off" / "config.yaml").read_text()


def test_eval_zero_report(bundle_dir, tmp_path, capsys):
    assert main(["eval", "--est", str(bundle_dir / "traj_gt.csv"), "--gt", str(bundle_dir),
                 "--out", str(tmp_path / "ev")]) == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert rep["ate_rmse"] == 0.0 and rep["rte_rmse"] == 0.0 and rep["z_ate_max"] == 0.0
    assert "ate_rmse" in capsys.readouterr().out


def test_eval_matches_module(run_dir, bundle_dir, tmp_path):
    assert main(["eval", "--est", str(run_dir / "trajectory.csv"), "--gt", str(bundle_dir),
                 "--out", str(tmp_path / "ev"), "--terrain", str(run_dir / "terrain.rbft")]) == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    direct = evaluate(read_trajectory(run_dir / "trajectory.csv"), read_trajectory(bundle_dir)).as_dict()
    for k, v in direct.items():
        assert rep[k] == v
    assert 0.0 < rep["terrain_fraction_below_0.05"] <= 1.0
    for f in ("errors.csv", "ate_histogram.csv", "terrain_histogram.csv", "report.txt"):
        assert (tmp_path / "ev" / f).exists()
    hist = np.loadtxt(tmp_path / "ev" / "ate_histogram.csv", delimiter=",", skiprows=1)
    assert hist[:, 2].sum() == rep["n_pairs"]


def test_eval_thresholds(run_dir, bundle_dir, tmp_path):
    args = ["eval", "--est", str(run_dir / "trajectory.csv"), "--gt", str(bundle_dir), "--out", str(tmp_path / "ev")]
    assert main(args + ["--max", "ate_rmse=1.0"]) == 0
    assert main(args + ["--max", "ate_rmse=1e-9"]) == 3
    assert main(args + ["--max", "ate_rmse=1.0", "--max", "z_ate_max=0"]) == 3
    assert main(args + ["--max", "sharpness=1"]) == 1
    assert main(args + ["--max", "ate_rmse=abc"]) == 1


def test_fit_and_export_terrain(bundle_dir, tmp_path):
    snap = tmp_path / "t" / "terrain.rbft"
    assert main(["fit-terrain", "--bundle", str(bundle_dir), "--out", str(snap)]) == 0
    grid = tmp_path / "grid.csv"
    assert main(["export-terrain", "--snapshot", str(snap), "--out", str(grid), "--step", "0.1",
                 "--bounds", "0", "-0.5", "3", "0.5", "--supported-only"]) == 0
    rows = np.loadtxt(grid, delimiter=",", skiprows=1)
    assert rows.shape[1] == 3 and 0 < len(rows) <= 31 * 11
    assert main(["export-terrain", "--snapshot", str(snap), "--out", str(tmp_path / "all.csv")]) == 0


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rbflio", "simulate", "--scene", "nowhere", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    proc = subprocess.run([sys.executable, "-m", "rbflio", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("simulate", "run", "eval", "fit-terrain", "export-terrain"):
        assert cmd in proc.stdout
