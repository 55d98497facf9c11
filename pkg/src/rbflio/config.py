"""Run configuration: one YAML file, every tunable a named key.

Sections mirror the pipeline stages::

    bundle: path/to/sequence
    terrain:  {sigma, sigma_eps, lam, cutoff_radius, tile_size, mesh_resolution,
               accept_radius, accept_count, ahead, behind, half_width, voxel, max_points}
    solver:   {lambda_manifold, lm_init_damping, lm_max_iters, ..., gate}
    map:      {window, voxel}
    imu:      {accel_bias, gyro_bias, gravity}
    toggles:  {manifold, imu}
    seed: 0
    workers: 1

Missing keys take their defaults; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .scanmatch import SolverConfig
from .terrain import KernelParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TerrainConfig:
    sigma: float = 0.04
    sigma_eps: float = 0.1
    lam: float = 2.0
    cutoff_radius: float | None = None
    tile_size: float | None = None
    mesh_resolution: float = 0.07
    accept_radius: float = 0.25
    accept_count: int = 3
    # ground points fused per frame: a base-frame box around the robot
    ahead: float = 3.0
    behind: float = 0.5
    half_width: float = 0.7
    voxel: float = 0.05
    max_points: int = 600

    def __post_init__(self) -> None:
        self.kernel()  # kernel parameter checks
        for name in ("mesh_resolution", "accept_radius", "ahead", "behind", "half_width"):
            if not getattr(self, name) > 0:
                raise ValueError(f"terrain.{name} must be positive")
        if self.accept_count < 1 or self.max_points < 1 or self.voxel < 0:
            raise ValueError("terrain.accept_count and max_points must be >= 1, voxel >= 0")

    def kernel(self) -> KernelParams:
        return KernelParams(self.sigma, self.sigma_eps, self.lam, self.cutoff_radius, self.tile_size)


@dataclass(frozen=True)
class MapConfig:
    window: int = 10
    voxel: float = 0.1

    def __post_init__(self) -> None:
        if self.window < 1 or self.voxel < 0:
            raise ValueError("map.window must be >= 1 and map.voxel >= 0")


@dataclass(frozen=True)
class ImuConfig:
    accel_bias: tuple = (0.0, 0.0, 0.0)
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    gravity: tuple = (0.0, 0.0, -9.81)


@dataclass(frozen=True)
class Toggles:
    manifold: bool = True
    imu: bool = True


@dataclass(frozen=True)
class RunConfig:
    bundle: str | None = None
    terrain: TerrainConfig = TerrainConfig()
    solver: SolverConfig = SolverConfig()
    map: MapConfig = MapConfig()
    imu: ImuConfig = ImuConfig()
    toggles: Toggles = Toggles()
    seed: int = 0
    workers: int = 1
    scene_overrides: bool = True

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for name in ("accel_bias", "gyro_bias", "gravity"):
            if len(getattr(self.imu, name)) != 3:
                raise ConfigError(f"imu.{name} needs three values")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("accel_bias", "gyro_bias", "gravity"):
            d["imu"][k] = list(d["imu"][k])
        return d

    def get(self, dotted: str):
        node = self.to_dict()
        for p in dotted.split("."):
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[p]
        return node

    def with_defaults(self, overrides: dict) -> RunConfig:
        """Apply only the overrides whose key still holds its default value."""
        base = RunConfig()
        keep = {k: v for k, v in overrides.items() if self.get(k) == base.get(k)}
        return self.with_overrides(keep) if keep else self

    def with_overrides(self, overrides: dict) -> RunConfig:
        """Apply ``{"section.key": value}`` overrides."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            node = data
            parts = dotted.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config section in {dotted!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[parts[-1]] = value
        return from_dict(data)


_SECTIONS = {"terrain": TerrainConfig, "solver": SolverConfig, "map": MapConfig, "imu": ImuConfig, "toggles": Toggles}


def _build(cls, data: dict, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    top = {f.name for f in fields(RunConfig)}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    kwargs = {k: v for k, v in data.items() if k not in _SECTIONS}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build(cls, data.get(name), name)
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return from_dict(data)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
