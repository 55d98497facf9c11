from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

from rbflio.config import RunConfig
from rbflio.imu import PreintegratedDelta, predict_pose, preintegrate
from rbflio.kinematics import RobotState
from rbflio.pipeline import effective_config, fit_terrain, gravity_term, ground_observation, run_odometry
from rbflio.sim.scene import Scan
from rbflio.so3 import euler_zyx
from rbflio.terrain_io import load_snapshot


@pytest.fixture(scope="module")
def base_run(small_bundle):
    return run_odometry(small_bundle, RunConfig())


def test_run_tracks_ground_truth(small_bundle, base_run):
    assert len(base_run.states) == len(small_bundle.scans) == len(base_run.records)
    err = np.linalg.norm(base_run.positions - small_bundle.gt_position, axis=1)
    assert err.max() < 0.05
    assert base_run.terrain.n_centers > 100
    assert all(r.seconds > 0 for r in base_run.records[1:])


def test_manifold_toggle_matches_zero_weight(small_bundle):
    off = run_odometry(small_bundle, RunConfig().with_overrides({"toggles.manifold": False}))
    zero = run_odometry(small_bundle, RunConfig().with_overrides({"solver.lambda_manifold": 0.0}))
    assert np.array_equal(off.positions, zero.positions)
    assert all(np.array_equal(a.rotation, b.rotation) for a, b in zip(off.states, zero.states))


def test_run_is_deterministic(small_bundle, base_run):
    again = run_odometry(small_bundle, RunConfig())
    assert np.array_equal(again.positions, base_run.positions)
    assert np.array_equal(again.terrain.weights, base_run.terrain.weights)
    par = run_odometry(small_bundle, RunConfig(workers=3))
    assert np.array_equal(par.positions, base_run.positions)


def test_outputs_written(base_run, tmp_path):
    out = base_run.write(tmp_path / "est")
    rows = np.loadtxt(out / "trajectory.csv", delimiter=",", skiprows=1)
    assert rows.shape == (len(base_run.states), 8)
    assert np.array_equal(rows[:, 1:4], base_run.positions)
    assert np.allclose(np.linalg.norm(rows[:, 4:], axis=1), 1.0)
    lines = (out / "diagnostics.jsonl").read_text().splitlines()
    assert len(lines) == len(base_run.records)
    rec = json.loads(lines[5])
    assert {"frame", "t", "seconds", "skipped", "solver", "terrain"} <= set(rec)
    assert "cost_trace" in rec["solver"] and "manifold" in rec["solver"]
    assert np.array_equal(load_snapshot(out / "terrain.rbft").weights, base_run.terrain.weights)


def test_featureless_frames_hold_prediction(small_bundle):
    empty = [Scan(s.t, np.empty((0, 3)), np.empty(0, dtype=str), np.empty(0, dtype=np.int64))
             for s in small_bundle.scans]
    bundle = replace(small_bundle, scans=empty)
    res = run_odometry(bundle, RunConfig())
    assert all(r.skipped for r in res.records[1:])
    # with nothing to match, the IMU dead-reckons the whole way
    state = res.states[0]
    for k in range(1, 6):
        t0, t1 = bundle.scans[k - 1].t, bundle.scans[k].t
        d = preintegrate(*bundle.imu.window(t0, t1), t0)
        pred = predict_pose(state, d)
        assert np.array_equal(res.states[k].rotation, pred.rotation)
        assert np.array_equal(res.states[k].translation, pred.translation)
        state = replace(res.states[k])


def test_scene_overrides_apply_to_defaults_only(small_bundle):
    eff = effective_config(RunConfig(), small_bundle)
    assert eff.terrain.lam == small_bundle.meta["pipeline"]["terrain.lam"]
    assert eff.terrain.sigma_eps == small_bundle.meta["pipeline"]["terrain.sigma_eps"]
    mine = effective_config(RunConfig().with_overrides({"terrain.lam": 5.0}), small_bundle)
    assert mine.terrain.lam == 5.0
    none = effective_config(RunConfig(scene_overrides=False), small_bundle)
    assert none.terrain == RunConfig().terrain


def test_ground_observation_labelled(small_bundle):
    scan = small_bundle.scans[10]
    state = small_bundle.gt_state(10)
    cfg = RunConfig().with_overrides({"terrain.voxel": 0.0, "terrain.max_points": 100000})
    obs = ground_observation(scan, state, cfg, small_bundle.leg.lidar_offset, np.random.default_rng(0))
    base = scan.points + small_bundle.leg.lidar_offset
    tc = cfg.terrain
    keep = (scan.label == 0) & (base[:, 0] >= -tc.behind) & (base[:, 0] <= tc.ahead) & (np.abs(base[:, 1]) <= tc.half_width)
    world = state.transform(base[keep])
    assert np.array_equal(obs.xy, world[:, :2]) and np.array_equal(obs.z, world[:, 2])
    capped = ground_observation(scan, state, RunConfig(), small_bundle.leg.lidar_offset, np.random.default_rng(0))
    assert len(capped) <= RunConfig().terrain.max_points


def test_ground_observation_unlabelled(small_bundle):
    scan = small_bundle.scans[10]
    blind = Scan(scan.t, scan.points, scan.kind, np.full(len(scan.label), -1))
    state = small_bundle.gt_state(10)
    off = small_bundle.leg.lidar_offset
    cfg = RunConfig().with_overrides({"terrain.voxel": 0.0, "terrain.max_points": 100000})
    tc = cfg.terrain
    base = scan.points + off
    window = (base[:, 0] >= -tc.behind) & (base[:, 0] <= tc.ahead) & (np.abs(base[:, 1]) <= tc.half_width)
    # no terrain yet: everything below the sensor inside the window
    obs = ground_observation(blind, state, cfg, off, np.random.default_rng(0))
    assert len(obs) == np.count_nonzero(window & (base[:, 2] < 0.0))
    # with a terrain model, returns far from the surface are dropped
    model = fit_terrain(small_bundle, RunConfig())
    obs = ground_observation(blind, state, cfg, off, np.random.default_rng(0), model)
    h, ok = model.predict(obs.xy)
    assert np.all(np.abs(obs.z - h)[ok] < 0.3)


def exact_deltas(n, dt, accel, rotation, gravity):
    force = rotation.T @ (accel - gravity)
    return [None] + [PreintegratedDelta(np.eye(3), force * dt, 0.5 * force * dt * dt, dt) for _ in range(n - 1)]


def test_gravity_term_vanishes_on_exact_motion():
    g = np.array([0.0, 0.0, -9.81])
    R0 = euler_zyx(0.3, 0.1, -0.05)
    a = np.array([0.2, -0.1, 0.05])
    dt, n = 0.1, 40
    t = np.arange(n) * dt
    states = [RobotState(R0, 0.5 * a * ti**2 + np.array([1.0, 0.0, 0.0]) * ti) for ti in t]
    deltas = exact_deltas(n, dt, a, R0, g)
    term = gravity_term(deltas, states, t, n - 1, 20, 6, g)
    assert term is not None
    assert np.abs(term.residual(R0)).max() <= 1e-12
    tilted = R0 @ euler_zyx(0.0, 0.02, 0.0)
    assert np.linalg.norm(term.residual(tilted)) > 0.01
    assert gravity_term(deltas, states, t, 20, 20, 6, g) is None


def test_fit_terrain_matches_truth(small_bundle):
    model = fit_terrain(small_bundle, RunConfig())
    rng = np.random.default_rng(0)
    xy = np.column_stack([rng.uniform(0.5, 2.5, 400), rng.uniform(-0.3, 0.3, 400)])
    z, ok = model.predict(xy)
    truth = small_bundle.scene.terrain.height(xy)
    err = np.abs(z - truth)[ok]
    assert ok.mean() > 0.9 and np.median(err) < 0.03
