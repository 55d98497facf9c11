"""Sequence generation and the on-disk bundle format.

A bundle directory holds::

    traj_gt.csv        t,x,y,z,qw,qx,qy,qz        ground truth at scan times
    imu.csv            t,ax,ay,az,gx,gy,gz        m/s^2, rad/s
    joints.csv         t,<joint names>            rad
    scans/index.csv    frame,t
    scans/NNNNNN.csv   x,y,z,kind,label           sensor frame; kind edge|plane|raw, label 0 = terrain
    terrain.json       terrain spec and scene primitives (ground-truth oracle)
    scene.json         scene name, rates, noise, scan settings, odometry overrides
    robot.robot        robot description
    seed               integer seed

External recordings use the same layout; ``terrain.json`` and the labels
are then optional (unlabelled points use ``label = -1``).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..imu import ImuStream
from ..kinematics import LegModel, RobotState, parse_robot_description
from ..so3 import quat_to_rot, rot_to_quat
from .scene import Scan, Scene, render_scan
from .scenes import Scenario
from .sensors import JointStream, generate_imu, generate_joints
from .trajectory import generate_trajectory


class BundleError(ValueError):
    """Malformed or inconsistent bundle."""


@dataclass
class SequenceBundle:
    name: str
    gt_t: np.ndarray
    gt_position: np.ndarray
    gt_quat: np.ndarray
    imu: ImuStream
    joints: JointStream
    scans: list[Scan]
    robot_text: str
    scene: Scene | None = None
    meta: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def leg(self) -> LegModel:
        return parse_robot_description(self.robot_text)

    def __len__(self) -> int:
        return len(self.scans)

    def gt_state(self, i: int) -> RobotState:
        return RobotState(quat_to_rot(self.gt_quat[i]), self.gt_position[i])

    def gt_rotations(self) -> np.ndarray:
        return np.array([quat_to_rot(q) for q in self.gt_quat])


def simulate(scenario: Scenario, seed: int, leg: LegModel, robot_text: str, workers: int = 1) -> SequenceBundle:
    """Render a full sequence; every frame draws from its own seed-derived stream."""
    root = np.random.SeedSequence(seed)
    imu_ss, joint_ss, scan_ss = root.spawn(3)
    traj = generate_trajectory(scenario.scene.terrain, scenario.profile)
    imu = generate_imu(traj, scenario.imu_rate, scenario.noise, np.random.default_rng(imu_ss))
    joints = generate_joints(traj, scenario.scene.terrain, leg, scenario.joint_rate, scenario.noise,
                             np.random.default_rng(joint_ss))
    n_frames = int(np.floor(traj.duration * scenario.scan_rate + 1e-9)) + 1
    t_scan = np.arange(n_frames) / scenario.scan_rate
    frame_seeds = scan_ss.spawn(n_frames)
    states = [traj.state(t) for t in t_scan]

    def frame(i: int) -> Scan:
        rng = np.random.default_rng(frame_seeds[i])
        return render_scan(scenario.scene, states[i], float(t_scan[i]), scenario.scan, scenario.noise.lidar_sigma,
                           rng, leg.lidar_offset)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scans = list(pool.map(frame, range(n_frames)))
    else:
        scans = [frame(i) for i in range(n_frames)]
    meta = {
        "scene": scenario.name,
        "imu_rate": scenario.imu_rate,
        "joint_rate": scenario.joint_rate,
        "scan_rate": scenario.scan_rate,
        "noise": scenario.noise.to_dict(),
        "scan": scenario.scan.to_dict(),
        "profile": scenario.profile.to_dict(),
        "pipeline": dict(scenario.pipeline),
        "joint_flagged": int(joints.flagged.sum()) if joints.flagged is not None else 0,
    }
    return SequenceBundle(
        scenario.name,
        t_scan,
        np.array([s.translation for s in states]),
        np.array([rot_to_quat(s.rotation) for s in states]),
        imu,
        joints,
        scans,
        robot_text,
        scenario.scene,
        meta,
        seed,
    )


# writing -----------------------------------------------------------------------


def _fmt(x: float) -> str:
    return "%.17g" % x


def _write_table(path: Path, header: list[str], rows: np.ndarray) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in np.asarray(rows, dtype=float)]
    path.write_text("\n".join(lines) + "\n")


def write_bundle(bundle: SequenceBundle, out: str | Path) -> Path:
    out = Path(out)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    _write_table(out / "traj_gt.csv", ["t", "x", "y", "z", "qw", "qx", "qy", "qz"],
                 np.column_stack([bundle.gt_t, bundle.gt_position, bundle.gt_quat]))
    _write_table(out / "imu.csv", ["t", "ax", "ay", "az", "gx", "gy", "gz"],
                 np.column_stack([bundle.imu.t, bundle.imu.accel, bundle.imu.gyro]))
    _write_table(out / "joints.csv", ["t"] + list(bundle.joints.names),
                 np.column_stack([bundle.joints.t, bundle.joints.angles]))
    index = ["frame,t"]
    for i, scan in enumerate(bundle.scans):
        index.append(f"{i},{_fmt(scan.t)}")
        lines = ["x,y,z,kind,label"]
        lines += [f"{_fmt(p[0])},{_fmt(p[1])},{_fmt(p[2])},{k},{int(l)}"
                  for p, k, l in zip(scan.points, scan.kind, scan.label)]
        (out / "scans" / f"{i:06d}.csv").write_text("\n".join(lines) + "\n")
    (out / "scans" / "index.csv").write_text("\n".join(index) + "\n")
    if bundle.scene is not None:
        (out / "terrain.json").write_text(json.dumps(bundle.scene.to_dict(), indent=1, sort_keys=True) + "\n")
    (out / "scene.json").write_text(json.dumps(bundle.meta, indent=1, sort_keys=True) + "\n")
    (out / "robot.robot").write_text(bundle.robot_text)
    (out / "seed").write_text(f"{bundle.seed if bundle.seed is not None else ''}\n")
    return out


# reading -----------------------------------------------------------------------


def _read_table(path: Path, columns: list[str] | None = None) -> tuple[list[str], np.ndarray]:
    if not path.exists():
        raise BundleError(f"missing {path.name}")
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    if columns is not None and header[: len(columns)] != columns:
        raise BundleError(f"{path.name}: expected columns {columns}, got {header}")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise BundleError(f"{path.name}: {exc}") from exc
    if not np.isfinite(data).all():
        raise BundleError(f"{path.name}: non-finite values")
    return header, data


def read_scan(path: Path, t: float) -> Scan:
    with path.open() as fh:
        header = fh.readline().strip().split(",")
        if header != ["x", "y", "z", "kind", "label"]:
            raise BundleError(f"{path.name}: bad header {header}")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    if not rows:
        return Scan(t, np.empty((0, 3)), np.empty(0, dtype=str), np.empty(0, dtype=np.int64))
    try:
        pts = np.array([[float(r[0]), float(r[1]), float(r[2])] for r in rows])
        kind = np.array([r[3] for r in rows])
        label = np.array([int(r[4]) for r in rows], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise BundleError(f"{path.name}: {exc}") from exc
    if not set(np.unique(kind)) <= {"edge", "plane", "raw"}:
        raise BundleError(f"{path.name}: unknown point kind")
    if not np.isfinite(pts).all():
        raise BundleError(f"{path.name}: non-finite coordinates")
    return Scan(t, pts, kind, label)


def read_bundle(path: str | Path) -> SequenceBundle:
    """Load and validate a bundle directory."""
    path = Path(path)
    if not path.is_dir():
        raise BundleError(f"{path} is not a directory")
    _, gt = _read_table(path / "traj_gt.csv", ["t", "x", "y", "z", "qw", "qx", "qy", "qz"])
    _, imu = _read_table(path / "imu.csv", ["t", "ax", "ay", "az", "gx", "gy", "gz"])
    jh, jt = _read_table(path / "joints.csv", ["t"])
    _, index = _read_table(path / "scans" / "index.csv", ["frame", "t"])
    scans = [read_scan(path / "scans" / f"{int(i):06d}.csv", float(t)) for i, t in index]
    robot_path = path / "robot.robot"
    if not robot_path.exists():
        raise BundleError("missing robot.robot")
    robot_text = robot_path.read_text()
    scene = None
    if (path / "terrain.json").exists():
        scene = Scene.from_dict(json.loads((path / "terrain.json").read_text()))
    meta = json.loads((path / "scene.json").read_text()) if (path / "scene.json").exists() else {}
    seed_text = (path / "seed").read_text().strip() if (path / "seed").exists() else ""
    try:
        imu_stream = ImuStream(imu[:, 0], imu[:, 1:4], imu[:, 4:7])
    except ValueError as exc:
        raise BundleError(f"imu.csv: {exc}") from exc
    bundle = SequenceBundle(
        meta.get("scene", path.name),
        gt[:, 0],
        gt[:, 1:4],
        gt[:, 4:8],
        imu_stream,
        JointStream(jt[:, 0], jt[:, 1:], jh[1:]),
        scans,
        robot_text,
        scene,
        meta,
        int(seed_text) if seed_text else None,
    )
    validate_bundle(bundle)
    return bundle


def validate_bundle(bundle: SequenceBundle) -> None:
    """Check stream consistency; raises :class:`BundleError`."""
    try:
        leg = bundle.leg
    except (ValueError, KeyError) as exc:
        raise BundleError(f"robot description: {exc}") from exc
    if bundle.joints.angles.shape[1] != leg.n_joints:
        raise BundleError(f"joints.csv has {bundle.joints.angles.shape[1]} joints, robot has {leg.n_joints}")
    if len(bundle.scans) < 2:
        raise BundleError("need at least two scans")
    t_scan = np.array([s.t for s in bundle.scans])
    if np.any(np.diff(t_scan) <= 0):
        raise BundleError("scan timestamps must increase")
    if np.any(np.diff(bundle.joints.t) <= 0):
        raise BundleError("joint timestamps must increase")
    if len(bundle.gt_t) and np.any(np.diff(bundle.gt_t) <= 0):
        raise BundleError("ground-truth timestamps must increase")
    imu_t = bundle.imu.t
    if len(imu_t) == 0 or imu_t[0] > t_scan[1] or imu_t[-1] < t_scan[-1]:
        raise BundleError("IMU stream does not bracket the scan times")
    if bundle.joints.t[0] > t_scan[0] or bundle.joints.t[-1] < t_scan[-1]:
        raise BundleError("joint stream does not cover the scan times")
