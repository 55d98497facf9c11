"""Command line entry point.

Subcommands::

    rbflio simulate --scene staircase_1 --seed 0 --out runs/seq
    rbflio run --bundle runs/seq --out runs/est [--config cfg.yaml] [--set solver.lambda_manifold=0]
    rbflio eval --est runs/est/trajectory.csv --gt runs/seq --out runs/eval [--max ate_rmse=0.05]
    rbflio fit-terrain --bundle runs/seq --out runs/terrain.rbft
    rbflio export-terrain --snapshot runs/terrain.rbft --out grid.csv --step 0.05

Exit codes: 0 ok, 1 usage error, 2 data error, 3 threshold violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, RunConfig, dump_config, load_config
from .evaluation import (EvaluationError, TrajectoryEstimate, associate, ate_errors, error_histogram, evaluate,
                         terrain_error_histogram)
from .kinematics import load_robot_description
from .terrain import TerrainError
from .terrain_io import SnapshotError, export_grid_csv, load_snapshot, save_snapshot

log = logging.getLogger("rbflio")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_THRESHOLD = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ThresholdViolation(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_set(items: list[str]) -> dict:
    """``key=value`` pairs; values are parsed as YAML scalars or lists."""
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"expected key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def _config(args) -> RunConfig:
    config = load_config(args.config)
    overrides = _parse_set(args.set)
    if getattr(args, "no_manifold", False):
        overrides["toggles.manifold"] = False
    if getattr(args, "no_imu", False):
        overrides["toggles.imu"] = False
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    return config.with_overrides(overrides) if overrides else config


def _bundle_path(args, config: RunConfig) -> Path:
    path = args.bundle or config.bundle
    if path is None:
        raise UsageError("no bundle given (use --bundle or the config's 'bundle' key)")
    return Path(path)


# subcommands ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .sim import get_scenario, simulate, write_bundle

    try:
        scenario = get_scenario(args.scene, noiseless=args.noiseless, lidar_sigma=args.lidar_sigma)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    robot_path = args.robot
    leg = load_robot_description(robot_path)
    text = Path(robot_path).read_text() if robot_path else _stock_robot_text()
    start = time.perf_counter()
    bundle = simulate(scenario, args.seed, leg, text, workers=args.workers)
    out = write_bundle(bundle, args.out)
    log.info("simulated %s: %d frames in %.1f s -> %s", args.scene, len(bundle), time.perf_counter() - start, out)
    return EXIT_OK


def _stock_robot_text() -> str:
    from importlib import resources

    return resources.files("rbflio.data").joinpath("legged_wheel.robot").read_text()


def cmd_run(args) -> int:
    from .pipeline import run_odometry
    from .sim import read_bundle

    config = _config(args)
    bundle = read_bundle(_bundle_path(args, config))
    result = run_odometry(bundle, config)
    out = result.write(args.out)
    (out / "config.yaml").write_text(dump_config(result.config))
    times = result.frame_times()[1:]
    skipped = sum(r.skipped for r in result.records)
    log.info("ran %d frames, median %.1f ms, %d held at the prediction -> %s",
             len(result.records), 1e3 * float(np.median(times)) if len(times) else 0.0, skipped, out)
    return EXIT_OK


def cmd_fit_terrain(args) -> int:
    from .pipeline import fit_terrain
    from .sim import read_bundle

    config = _config(args)
    bundle = read_bundle(_bundle_path(args, config))
    model = fit_terrain(bundle, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_snapshot(model, out)
    log.info("terrain with %d centers -> %s", model.n_centers, out)
    return EXIT_OK


def cmd_export_terrain(args) -> int:
    model = load_snapshot(args.snapshot)
    bounds = args.bounds
    if bounds is None:
        if not model.n_centers:
            raise TerrainError("snapshot has no centers; pass --bounds")
        c = model.centers.centers
        bounds = (*c.min(axis=0), *c.max(axis=0))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = export_grid_csv(model, out, bounds, args.step, args.supported_only)
    log.info("wrote %d grid rows -> %s", n, out)
    return EXIT_OK


def read_trajectory(path: str | Path) -> TrajectoryEstimate:
    """``t,x,y,z[,qw,qx,qy,qz]`` CSV with a header row, or a bundle directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "traj_gt.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise EvaluationError(f"{path}: {exc}") from exc
    if data.shape[1] < 4:
        raise EvaluationError(f"{path}: need at least t,x,y,z columns")
    return TrajectoryEstimate(data[:, 0], data[:, 1:4])


def _threshold_pairs(items: list[str]) -> dict[str, float]:
    out = {}
    for key, value in _parse_set(items).items():
        try:
            out[key] = float(value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"threshold {key!r} needs a number") from exc
    return out


def cmd_eval(args) -> int:
    thresholds = _threshold_pairs(args.max)
    est = read_trajectory(args.est)
    gt = read_trajectory(args.gt)
    report = evaluate(est, gt, args.max_dt, args.align, args.rte_window)
    values = report.as_dict()
    unknown = [k for k in thresholds if not isinstance(values.get(k), float)]
    if unknown:
        raise UsageError(f"unknown threshold metric(s): {', '.join(unknown)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    pairs = associate(est, gt, args.max_dt)
    err = ate_errors(pairs, args.align)
    norms = np.linalg.norm(err, axis=1)
    rows = ["t,ex,ey,ez,norm"] + [",".join("%.17g" % v for v in (t, *e, n)) for t, e, n in zip(pairs.t, err, norms)]
    (out / "errors.csv").write_text("\n".join(rows) + "\n")
    _write_histogram(out / "ate_histogram.csv", error_histogram(norms, 0.0))

    if args.terrain is not None:
        hist = _terrain_histogram(args)
        _write_histogram(out / "terrain_histogram.csv", hist)
        values["terrain_fraction_below_0.05"] = hist.fraction_below(0.05)

    (out / "report.json").write_text(json.dumps(values, indent=2, sort_keys=True) + "\n")
    table = _table(values)
    (out / "report.txt").write_text(table)
    print(table, end="")

    violated = [f"{k} = {values[k]:.6g} > {v:.6g}" for k, v in thresholds.items() if values[k] > v]
    if violated:
        raise ThresholdViolation("; ".join(violated))
    return EXIT_OK


def _terrain_histogram(args):
    from .sim import read_bundle

    if not Path(args.gt).is_dir():
        raise UsageError("--terrain needs --gt to be a bundle directory with terrain.json")
    bundle = read_bundle(args.gt)
    if bundle.scene is None:
        raise EvaluationError("bundle has no ground-truth terrain (terrain.json)")
    model = load_snapshot(args.terrain)
    xy = ground_truth_ground_xy(bundle)
    _, ok = model.predict(xy)
    if not ok.any():
        raise EvaluationError("the terrain snapshot supports none of the bundle's ground points")
    xy = xy[ok]
    return terrain_error_histogram(model, xy, bundle.scene.terrain.height(xy), args.trim)


def ground_truth_ground_xy(bundle, stride: int = 1) -> np.ndarray:
    """World xy of the terrain-labelled returns, placed with the true poses."""
    offset = np.asarray(bundle.leg.lidar_offset, dtype=float)
    parts = []
    for k in range(0, len(bundle.scans), stride):
        scan = bundle.scans[k]
        pts = bundle.gt_state(k).transform(scan.points[scan.label == 0] + offset)
        parts.append(pts[:, :2])
    xy = np.concatenate(parts) if parts else np.empty((0, 2))
    return xy[bundle.scene.terrain.contains(xy)]


def _write_histogram(path: Path, hist) -> None:
    rows = ["bin_lo,bin_hi,count"] + [f"{a:.6g},{b:.6g},{c}" for a, b, c in hist.rows()]
    path.write_text("\n".join(rows) + "\n")


def _table(values: dict) -> str:
    width = max(len(k) for k in values)
    lines = [f"{'metric'.ljust(width)}  value"]
    for k, v in values.items():
        lines.append(f"{k.ljust(width)}  {v:.6g}" if isinstance(v, float) else f"{k.ljust(width)}  {v}")
    return "\n".join(lines) + "\n"


# parser ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .sim import STOCK_SCENES

    p = _Parser(prog="rbflio", description="Terrain-aware LiDAR-inertial odometry toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="render a stock scene to a bundle directory")
    s.add_argument("--scene", required=True, help=f"one of: {', '.join(STOCK_SCENES)}")
    s.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    s.add_argument("--out", required=True, help="output bundle directory")
    s.add_argument("--noiseless", action="store_true", help="zero every noise source and bias")
    s.add_argument("--lidar-sigma", type=float, default=None, help="override the lidar noise std in m")
    s.add_argument("--robot", default=None, help="robot description file (default: stock robot)")
    s.add_argument("--workers", type=int, default=1, help="render threads (default 1)")
    s.set_defaults(func=cmd_simulate)

    def run_like(parser):
        parser.add_argument("--config", default=None, help="YAML run configuration (default: built-in defaults)")
        parser.add_argument("--bundle", default=None, help="bundle directory (overrides the config's 'bundle')")
        parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, repeatable")
        parser.add_argument("--seed", type=int, default=None, help="override the config seed")
        parser.add_argument("--workers", type=int, default=None, help="override the config worker count")

    r = sub.add_parser("run", help="run the odometry over a bundle")
    run_like(r)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--no-manifold", action="store_true", help="disable the wheel-terrain residuals")
    r.add_argument("--no-imu", action="store_true", help="constant-velocity prediction instead of the IMU")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score a trajectory against ground truth")
    e.add_argument("--est", required=True, help="estimated trajectory CSV")
    e.add_argument("--gt", required=True, help="ground-truth CSV or bundle directory")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--align", choices=("rigid", "none"), default="rigid", help="alignment (default rigid)")
    e.add_argument("--max-dt", type=float, default=0.02, help="pairing tolerance in s (default 0.02)")
    e.add_argument("--rte-window", type=float, default=1.0, help="RTE window in s (default 1.0)")
    e.add_argument("--terrain", default=None, help="terrain snapshot to score against the bundle's terrain")
    e.add_argument("--trim", type=float, default=0.1, help="terrain histogram trim fraction (default 0.1)")
    e.add_argument("--max", action="append", metavar="METRIC=VALUE",
                   help="fail with exit code 3 if METRIC exceeds VALUE, repeatable")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fit-terrain", help="fit the terrain model at ground-truth poses")
    run_like(f)
    f.add_argument("--out", required=True, help="output snapshot file")
    f.set_defaults(func=cmd_fit_terrain)

    x = sub.add_parser("export-terrain", help="sample a terrain snapshot on a grid")
    x.add_argument("--snapshot", required=True, help="terrain snapshot file")
    x.add_argument("--out", required=True, help="output CSV (x,y,z_pred)")
    x.add_argument("--step", type=float, default=0.05, help="grid step in m (default 0.05)")
    x.add_argument("--bounds", type=float, nargs=4, default=None, metavar=("XMIN", "YMIN", "XMAX", "YMAX"),
                   help="grid bounds (default: extent of the centers)")
    x.add_argument("--supported-only", action="store_true", help="drop grid points without kernel support")
    x.set_defaults(func=cmd_export_terrain)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise UsageError("rbflio: a subcommand is required (simulate, run, eval, fit-terrain, export-terrain)")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ThresholdViolation as exc:
        print(f"threshold violated: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    except (ConfigError, EvaluationError, SnapshotError, TerrainError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
