"""Frame-by-frame odometry over a sequence bundle.

Per frame ``k``:

1. predict the pose from the IMU window ``(t_{k-1}, t_k]`` (or, with the IMU
   disabled, by repeating the last inter-frame motion);
2. fuse the ground points of frame ``k-1``, placed with its optimized pose,
   into the terrain model;
3. refine the pose with Levenberg-Marquardt against the local map, the
   wheel-terrain residuals and an IMU tilt residual over a trailing window;
4. set the velocity from the finite difference of the optimized positions
   and add the frame's features to the map.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .imu import predict_pose, preintegrate
from .kinematics import JointConfig, RobotState
from .scanmatch import GravityTerm, LocalMap, ManifoldTerm, ScanProblem, lm_solve, voxel_downsample
from .so3 import orthonormalize, rot_to_quat
from .terrain import CenterSet, TerrainObservation, UpdateReport, empty_model, recursive_update
from .terrain_io import save_snapshot

log = logging.getLogger(__name__)

UNLABELLED = -1


@dataclass
class FrameRecord:
    index: int
    t: float
    seconds: float
    skipped: bool = False
    solver: dict = field(default_factory=dict)
    terrain: dict = field(default_factory=dict)

    def as_record(self) -> dict:
        return {"frame": self.index, "t": self.t, "seconds": self.seconds, "skipped": self.skipped,
                "solver": self.solver, "terrain": self.terrain}


@dataclass
class RunResult:
    t: np.ndarray
    states: list[RobotState]
    records: list[FrameRecord]
    terrain: object
    config: RunConfig

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.translation for s in self.states])

    def frame_times(self) -> np.ndarray:
        return np.array([r.seconds for r in self.records])

    def write(self, out: str | Path) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["t,x,y,z,qw,qx,qy,qz"]
        for t, s in zip(self.t, self.states):
            row = [t, *s.translation, *rot_to_quat(s.rotation)]
            lines.append(",".join("%.17g" % v for v in row))
        (out / "trajectory.csv").write_text("\n".join(lines) + "\n")
        with (out / "diagnostics.jsonl").open("w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.as_record(), sort_keys=True) + "\n")
        save_snapshot(self.terrain, out / "terrain.rbft")
        return out


def effective_config(config: RunConfig, bundle) -> RunConfig:
    """Apply the bundle's per-scene overrides to keys left at their defaults.

    Disabled by ``config.scene_overrides = False``.
    """
    overrides = bundle.meta.get("pipeline", {}) if config.scene_overrides else {}
    return config.with_defaults(overrides) if overrides else config


def ground_observation(scan, state: RobotState, config: RunConfig, offset: np.ndarray, rng: np.random.Generator,
                       terrain=None) -> TerrainObservation | None:
    """World-frame ground points of one scan inside the update window.

    Labelled data uses the terrain label. Unlabelled points count as ground
    when they lie below the sensor and, where the current terrain model has
    support, within 0.3 m of it vertically.
    """
    tc = config.terrain
    base = scan.points + offset
    world = state.transform(base)
    if np.any(scan.label != UNLABELLED):
        ground = scan.label == 0
    else:
        ground = base[:, 2] < 0.0
        if terrain is not None and terrain.n_centers:
            h, ok = terrain.predict(world[:, :2])
            ground &= ~ok | (np.abs(world[:, 2] - h) < 0.3)
    inside = (base[:, 0] >= -tc.behind) & (base[:, 0] <= tc.ahead) & (np.abs(base[:, 1]) <= tc.half_width)
    pts = world[ground & inside]
    if tc.voxel > 0:
        pts, _ = voxel_downsample(pts, tc.voxel)
    if len(pts) > tc.max_points:
        pts = pts[np.sort(rng.choice(len(pts), tc.max_points, replace=False))]
    if len(pts) == 0:
        return None
    return TerrainObservation(pts[:, :2], pts[:, 2])


def _roi(bundle) -> tuple[float, float, float, float]:
    if bundle.scene is not None:
        return tuple(bundle.scene.terrain.extent)
    x, y = bundle.gt_position[0, :2]
    return (x - 100.0, y - 100.0, x + 100.0, y + 100.0)


def run_odometry(bundle, config: RunConfig, progress=None) -> RunResult:
    """Run the estimator over every frame of ``bundle``."""
    config = effective_config(config, bundle)
    leg = bundle.leg
    offset = np.asarray(leg.lidar_offset, dtype=float)
    tc = config.terrain
    kernel = tc.kernel()
    centers = CenterSet(np.empty((0, 2)), tc.mesh_resolution, tc.accept_radius, tc.accept_count, _roi(bundle))
    terrain = empty_model(kernel, centers, config.workers)
    local_map = LocalMap(config.map.window, config.map.voxel)
    solver = config.solver
    ba = np.asarray(config.imu.accel_bias, dtype=float)
    bg = np.asarray(config.imu.gyro_bias, dtype=float)
    gravity = np.asarray(config.imu.gravity, dtype=float)
    root = np.random.SeedSequence(config.seed)
    frame_rngs = [np.random.default_rng(s) for s in root.spawn(len(bundle.scans))]

    t_scan = np.array([s.t for s in bundle.scans])
    state = RobotState(bundle.gt_state(0).rotation, bundle.gt_state(0).translation, accel_bias=ba, gyro_bias=bg)
    states = [state]
    start = time.perf_counter()
    _add_to_map(local_map, bundle.scans[0], state, offset)
    records = [FrameRecord(0, float(t_scan[0]), time.perf_counter() - start)]
    deltas = [None]

    for k in range(1, len(bundle.scans)):
        start = time.perf_counter()
        prev = states[-1]
        dt = t_scan[k] - t_scan[k - 1]
        if config.toggles.imu:
            t, a, g = bundle.imu.window(t_scan[k - 1], t_scan[k])
            deltas.append(preintegrate(t, a, g, t_scan[k - 1], ba, bg))
            pred = predict_pose(prev, deltas[k], gravity)
        else:
            rel = states[-2].rotation.T @ prev.rotation if k >= 2 else np.eye(3)
            pred = replace(prev, rotation=orthonormalize(prev.rotation @ rel), translation=prev.translation + prev.velocity * dt)

        rep = UpdateReport()
        obs = ground_observation(bundle.scans[k - 1], prev, config, offset, frame_rngs[k - 1], terrain)
        if obs is not None:
            terrain = recursive_update(terrain, obs, report=rep)

        features = bundle.scans[k].features()
        manifold = None
        if config.toggles.manifold and solver.lambda_manifold > 0 and terrain.n_centers:
            joints = JointConfig(t_scan[k], bundle.joints.at(t_scan[k]))
            manifold = ManifoldTerm(joints, leg, terrain)
        tilt = None
        if config.toggles.imu and solver.lambda_gravity > 0:
            tilt = gravity_term(deltas, states, t_scan, k, solver.gravity_window, solver.gravity_baseline, gravity)
        problem = ScanProblem(features, local_map, manifold, solver, offset, tilt)
        record = FrameRecord(k, float(t_scan[k]), 0.0, terrain={"born": rep.born, "active_blocks": rep.active_blocks,
                                                               "active_centers": rep.active_centers,
                                                               "rejected": rep.rejected, "centers": terrain.n_centers})
        if len(problem.associate(pred)) < solver.min_correspondences:
            log.warning("frame %d: too few correspondences, holding the prediction", k)
            est = pred
            record.skipped = True
        else:
            est, report = lm_solve(pred, problem, solver)
            record.solver = report.as_record()
            if report.failed:
                log.warning("frame %d: solver failed, holding the prediction", k)
                est = pred
        est = replace(est, velocity=(est.translation - prev.translation) / dt, accel_bias=ba, gyro_bias=bg)
        states.append(est)
        _add_to_map(local_map, bundle.scans[k], est, offset)
        record.seconds = time.perf_counter() - start
        records.append(record)
        if progress is not None:
            progress(k, len(bundle.scans))
    return RunResult(t_scan, states, records, terrain, config)


def gravity_term(deltas: list, states: list[RobotState], t: np.ndarray, k: int, window: int, baseline: int,
                 gravity: np.ndarray) -> GravityTerm | None:
    """Tilt residual for frame ``k`` over the frames ``a = b - window .. b``.

    ``deltas[j]`` is the preintegrated motion over ``(t_{j-1}, t_j]``. The
    velocities at ``a`` and ``b`` are central differences of the estimated
    positions over ``baseline`` frames, so ``b = k - 1 - baseline / 2`` and no
    term is formed before frame ``a - baseline / 2`` exists.
    """
    h = baseline // 2
    b = k - 1 - h
    a = b - window
    if a - h < 0:
        return None

    def velocity(i: int) -> np.ndarray:
        return (states[i + h].translation - states[i - h].translation) / (t[i + h] - t[i - h])

    force = np.zeros(3)
    for j in range(b, a, -1):
        # bring the sum from body j into body j-1, then add interval j
        force = deltas[j].dV + deltas[j].dR @ force
    rel = np.eye(3)
    for j in range(a + 1, k + 1):
        rel = rel @ deltas[j].dR
    target = velocity(b) - velocity(a) - gravity * (t[b] - t[a])
    return GravityTerm(rel.T @ force, target)


def _add_to_map(local_map: LocalMap, scan, state: RobotState, offset: np.ndarray) -> None:
    f = scan.features()
    local_map.add(state.transform(f.edge_points + offset), state.transform(f.planar_points + offset),
                  f.edge_labels, f.planar_labels)


def fit_terrain(bundle, config: RunConfig, progress=None):
    """Terrain model built from every frame's ground points at the ground-truth poses."""
    config = effective_config(config, bundle)
    leg = bundle.leg
    offset = np.asarray(leg.lidar_offset, dtype=float)
    tc = config.terrain
    centers = CenterSet(np.empty((0, 2)), tc.mesh_resolution, tc.accept_radius, tc.accept_count, _roi(bundle))
    terrain = empty_model(tc.kernel(), centers, config.workers)
    root = np.random.SeedSequence(config.seed)
    rngs = [np.random.default_rng(s) for s in root.spawn(len(bundle.scans))]
    for k, scan in enumerate(bundle.scans):
        obs = ground_observation(scan, bundle.gt_state(k), config, offset, rngs[k])
        if obs is not None:
            terrain = recursive_update(terrain, obs)
        if progress is not None:
            progress(k, len(bundle.scans))
    return terrain
