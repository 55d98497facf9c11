"""Stock simulated scenes.

Five scenes stand in for the reference datasets at desk scale (two
staircases, a hill, a feature-poor garden staircase and a long mixed route);
``flat`` is an extra control scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .scene import Box, ScanConfig, Scene, pole, wall
from .sensors import SensorNoise
from .terrain import TerrainSpec
from .trajectory import MotionProfile

EXTENT = (-6.0, -8.0, 30.0, 8.0)

# light ridge for odometry: the terrain ahead of the wheels is seen by few
# frames, and a heavy ridge pulls it towards zero height
ODOMETRY = {"terrain.lam": 0.1}
# association gates scaled to noise-free returns; the tilt residual is off
# because its discretization error exceeds noise-free lidar residuals
NOISELESS = {"solver.max_residual": 0.005, "solver.plane_fit_tol": 0.002, "solver.line_fit_tol": 0.002,
             "solver.lambda_gravity": 0.0}


@dataclass(frozen=True)
class Scenario:
    """Everything needed to simulate one run.

    ``pipeline`` holds per-scene overrides of the odometry configuration
    (dotted keys, see :mod:`rbflio.config`).
    """

    name: str
    scene: Scene
    profile: MotionProfile
    noise: SensorNoise = SensorNoise()
    scan: ScanConfig = ScanConfig()
    imu_rate: float = 200.0
    joint_rate: float = 500.0
    scan_rate: float = 10.0
    pipeline: dict = field(default_factory=lambda: dict(ODOMETRY))


def _stairs(start, n, rise, depth, descending=False):
    return TerrainSpec(
        "staircase",
        {"step_height": rise, "step_depth": depth, "n_steps": n, "start_x": start,
         "descending": descending, "edge_width": 0.03},
        EXTENT,
    )


def _poles_along(xs, ys, height=3.0):
    return [pole(x, y, height) for x in xs for y in ys]


def _crates():
    # a few boxes of different heights on both sides; their tops give horizontal planes
    spots = [(2.5, 2.2, 0.6), (7.0, -2.4, 0.9), (11.5, 2.6, 0.5), (15.0, -2.2, 1.1), (19.0, 2.3, 0.7), (23.0, -2.5, 0.8)]
    return [Box((x - 0.35, y - 0.35, -1.0), (x + 0.35, y + 0.35, h)) for x, y, h in spots]


def _rich_features(x_end=24.0):
    boxes = [wall(-3.0, -4.0, -3.0, 4.0, 2.5)]
    boxes += [wall(x, 4.0, x + 3.0, 4.0, 2.5) for x in range(-2, int(x_end), 5)]
    boxes += [wall(x + 2.0, -4.0, x + 5.0, -4.0, 2.5) for x in range(-2, int(x_end), 5)]
    boxes += _poles_along(range(0, int(x_end), 3), (1.6, -1.7))
    boxes += _crates()
    return boxes


def flat() -> Scenario:
    terrain = TerrainSpec("flat", {}, EXTENT)
    return Scenario("flat", Scene(terrain, _rich_features()), MotionProfile())


def staircase_1() -> Scenario:
    terrain = TerrainSpec(
        "composite", {}, EXTENT,
        (_stairs(5.0, 6, 0.10, 0.35), _stairs(10.6, 6, 0.10, 0.35, descending=True)),
    )
    profile = MotionProfile(jolt_amplitude=0.004)
    return Scenario("staircase_1", Scene(terrain, _rich_features()), profile)


def staircase_2() -> Scenario:
    terrain = TerrainSpec(
        "composite", {}, EXTENT,
        (_stairs(4.0, 4, 0.15, 0.45), _stairs(11.0, 4, 0.15, 0.45, descending=True),
         _stairs(16.0, 3, 0.05, 0.40)),
    )
    profile = MotionProfile(waypoints=((0.0, 0.0), (8.0, 0.3), (14.0, -0.3), (20.5, 0.0)), jolt_amplitude=0.006)
    return Scenario("staircase_2", Scene(terrain, _rich_features()), profile)


def hill() -> Scenario:
    terrain = TerrainSpec("hill", {"amplitude": 0.8, "wavelength": 12.0, "start_x": 3.0}, EXTENT)
    boxes = _poles_along(range(0, 24, 2), (2.0, -2.2)) + _crates() + [wall(-3.0, -4.0, -3.0, 4.0, 2.5)]
    profile = MotionProfile(waypoints=((0.0, 0.0), (7.0, 0.8), (14.0, -0.8), (20.0, 0.0)))
    return Scenario("hill", Scene(terrain, boxes), profile)


def garden() -> Scenario:
    """Staircase lined by hedge rows and trees.

    Ground returns are rejected as planar features, as on vegetated ground,
    and every visible face is vertical, so features barely observe the
    vertical direction.
    """
    terrain = TerrainSpec(
        "composite", {}, EXTENT,
        (_stairs(4.0, 5, 0.12, 0.35), _stairs(10.0, 5, 0.12, 0.35, descending=True)),
    )
    # hedge rows across the path edges (faces normal to the path) and trees
    boxes = [wall(x, sgn * 1.2, x, sgn * 3.0, 2.5) for x in range(-3, 26, 3) for sgn in (1.0, -1.0)]
    boxes += [pole(x + 1.5, 2.0 if i % 2 else -2.0, 3.0) for i, x in enumerate(range(-3, 25, 3))]
    scan = ScanConfig(ground_plane_fraction=0.0)
    noise = SensorNoise(accel_bias=(0.02, -0.02, 0.06), gyro_bias=(0.002, 0.001, -0.001))
    pipeline = {**ODOMETRY, "solver.lambda_manifold": 10.0}
    return Scenario("garden", Scene(terrain, boxes), MotionProfile(jolt_amplitude=0.004), noise, scan, pipeline=pipeline)


def botanical() -> Scenario:
    """Long mixed route: flat, ramp, stairs and a hill along one path."""
    ramp_up = TerrainSpec("ramp", {"slope": 0.08, "start_x": 3.0}, EXTENT)
    ramp_cap = TerrainSpec("ramp", {"slope": -0.08, "start_x": 7.0}, EXTENT)
    terrain = TerrainSpec(
        "composite", {}, EXTENT,
        (ramp_up, ramp_cap, _stairs(9.0, 3, 0.08, 0.35), _stairs(13.0, 3, 0.08, 0.35, descending=True),
         TerrainSpec("hill", {"amplitude": 0.4, "wavelength": 6.0, "start_x": 15.5}, EXTENT)),
    )
    boxes = _poles_along(range(0, 24, 4), (2.0, -2.0)) + _crates()
    boxes += [wall(x, 3.5, x + 2.0, 3.5, 2.0) for x in range(0, 24, 6)]
    profile = MotionProfile(waypoints=((0.0, 0.0), (6.0, 0.5), (12.0, 0.0), (17.0, -0.5), (22.0, 0.0)), jolt_amplitude=0.003)
    return Scenario("botanical", Scene(terrain, boxes), profile)


STOCK_SCENES = {
    "flat": flat,
    "staircase_1": staircase_1,
    "staircase_2": staircase_2,
    "hill": hill,
    "garden": garden,
    "botanical": botanical,
}


def get_scenario(name: str, noiseless: bool = False, lidar_sigma: float | None = None) -> Scenario:
    """Stock scenario by name; ``noiseless`` zeroes every noise source and bias.

    The scenario's pipeline overrides set ``terrain.sigma_eps`` to the
    simulated lidar noise.
    """
    if name not in STOCK_SCENES:
        raise KeyError(f"unknown scene {name!r}; choose from {', '.join(STOCK_SCENES)}")
    sc = STOCK_SCENES[name]()
    if noiseless:
        sc = replace(sc, noise=SensorNoise.noiseless(), profile=replace(sc.profile, jolt_amplitude=0.0))
    if lidar_sigma is not None:
        sc = replace(sc, noise=replace(sc.noise, lidar_sigma=lidar_sigma))
    pipeline = {**sc.pipeline, "terrain.sigma_eps": sc.noise.lidar_sigma}
    if noiseless:
        pipeline.update(NOISELESS)
    return replace(sc, pipeline=pipeline)
