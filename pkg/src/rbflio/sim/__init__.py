"""Synthetic legged-wheel sequences with exact ground truth."""

from .bundle import BundleError, SequenceBundle, read_bundle, simulate, validate_bundle, write_bundle
from .scene import Box, ScanConfig, Scene, cast_rays, pole, render_scan, wall
from .scenes import STOCK_SCENES, Scenario, get_scenario
from .sensors import JointStream, SensorNoise, generate_imu, generate_joints
from .terrain import TerrainDomainError, TerrainSpec, terrain_height
from .trajectory import MotionProfile, Trajectory, generate_trajectory

__all__ = [
    "Box",
    "BundleError",
    "JointStream",
    "MotionProfile",
    "STOCK_SCENES",
    "ScanConfig",
    "Scenario",
    "Scene",
    "SensorNoise",
    "SequenceBundle",
    "TerrainDomainError",
    "TerrainSpec",
    "Trajectory",
    "cast_rays",
    "generate_imu",
    "generate_joints",
    "generate_trajectory",
    "get_scenario",
    "pole",
    "read_bundle",
    "render_scan",
    "simulate",
    "terrain_height",
    "validate_bundle",
    "wall",
]
