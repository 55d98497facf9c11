"""Leg forward kinematics and the wheel-on-terrain manifold residual.

Pose perturbations follow the right-multiplicative convention used across
the package: ``R <- R exp(hat(dtheta))``, ``t <- t + dt``, with the 6-vector
ordered ``[dtheta, dt]``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .so3 import hat, is_rotation, so3_exp

LEFT = "left"
RIGHT = "right"


@dataclass(frozen=True)
class RobotState:
    """Base pose, velocity and IMU biases at one scan time."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        for name in ("rotation", "translation", "velocity", "accel_bias", "gyro_bias"):
            value = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(value)):
                raise ValueError(f"RobotState.{name} is not finite")
            object.__setattr__(self, name, value)
        if not is_rotation(self.rotation):
            raise ValueError("RobotState.rotation is not a rotation matrix")

    def retract(self, delta) -> RobotState:
        """Apply a ``[dtheta, dt]`` perturbation."""
        delta = np.asarray(delta, dtype=float)
        return replace(self, rotation=self.rotation @ so3_exp(delta[:3]), translation=self.translation + delta[3:6])

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class JointConfig:
    t: float
    angles: np.ndarray

    def __post_init__(self) -> None:
        angles = np.array(self.angles, dtype=float).reshape(-1)
        if not np.all(np.isfinite(angles)):
            raise ValueError("joint angles are not finite")
        object.__setattr__(self, "angles", angles)


@dataclass(frozen=True)
class Link:
    name: str
    parent: str
    offset: np.ndarray
    kind: str = "fixed"
    axis: np.ndarray | None = None


@dataclass
class LegModel:
    """Kinematic tree rooted at the base plus wheel and sensor metadata.

    Revolute links are numbered in file order; that order indexes
    :attr:`JointConfig.angles`.
    """

    links: dict[str, Link]
    wheel_radius: float
    wheels: dict[str, str]
    lidar_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = "robot"

    def __post_init__(self) -> None:
        if not self.wheel_radius > 0:
            raise ValueError("wheel_radius must be positive")
        self.joint_names = [n for n, link in self.links.items() if link.kind == "revolute"]
        self._chains = {}
        for side, wheel in self.wheels.items():
            if wheel not in self.links:
                raise ValueError(f"{side} wheel link {wheel!r} not described")
            chain = []
            name = wheel
            while name != "base":
                if name not in self.links or len(chain) > len(self.links):
                    raise ValueError(f"link {name!r} does not lead back to base")
                chain.append(self.links[name])
                name = self.links[name].parent
            if not chain:
                raise ValueError("empty kinematic chain")
            self._chains[side] = chain[::-1]

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    def chain(self, side: str) -> list[Link]:
        return self._chains[side]

    def joint_index(self, name: str) -> int:
        return self.joint_names.index(name)

    def side_joints(self, side: str) -> list[int]:
        return [self.joint_index(link.name) for link in self.chain(side) if link.kind == "revolute"]

    def mirrored(self) -> LegModel:
        """Reflection about the base x-z plane; left and right swap roles."""
        flip = np.array([1.0, -1.0, 1.0])
        links = {}
        for name, link in self.links.items():
            axis = None if link.axis is None else -flip * link.axis  # axial vector under reflection
            links[name] = Link(link.name, link.parent, flip * link.offset, link.kind, axis)
        return LegModel(links, self.wheel_radius, {LEFT: self.wheels[RIGHT], RIGHT: self.wheels[LEFT]},
                        flip * self.lidar_offset, self.name + "-mirrored")


def _vec(text: str) -> np.ndarray:
    v = np.array([float(x) for x in text.replace(",", " ").split()])
    if v.shape != (3,):
        raise ValueError(f"expected three numbers, got {text!r}")
    return v


def parse_robot_description(text: str) -> LegModel:
    """Parse the INI-style robot description.

    ``[robot]`` carries ``wheel_radius``, ``left_wheel``, ``right_wheel`` and
    optionally ``lidar_offset``; every ``[link NAME]`` section carries
    ``parent``, ``type`` (``revolute`` or ``fixed``), ``offset`` and, for
    revolute links, ``axis``.
    """
    cp = configparser.ConfigParser()
    cp.read_string(text)
    if "robot" not in cp:
        raise ValueError("robot description lacks a [robot] section")
    robot = cp["robot"]
    links = {}
    for section in cp.sections():
        if not section.startswith("link "):
            continue
        name = section[5:].strip()
        rec = cp[section]
        kind = rec.get("type", "fixed").strip()
        if kind not in ("revolute", "fixed"):
            raise ValueError(f"link {name}: unknown type {kind!r}")
        axis = None
        if kind == "revolute":
            axis = _vec(rec["axis"])
            axis = axis / np.linalg.norm(axis)
        links[name] = Link(name, rec["parent"].strip(), _vec(rec.get("offset", "0 0 0")), kind, axis)
    return LegModel(
        links=links,
        wheel_radius=robot.getfloat("wheel_radius"),
        wheels={LEFT: robot["left_wheel"].strip(), RIGHT: robot["right_wheel"].strip()},
        lidar_offset=_vec(robot.get("lidar_offset", "0 0 0")),
        name=robot.get("name", "robot"),
    )


def load_robot_description(path: str | Path | None = None) -> LegModel:
    """Load a description file; ``None`` loads the stock simulated robot."""
    if path is None:
        text = resources.files("rbflio.data").joinpath("legged_wheel.robot").read_text()
    else:
        text = Path(path).read_text()
    return parse_robot_description(text)


def _axis_rotations(axis: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Batch of rotations about a unit axis, shape ``angles.shape + (3, 3)``."""
    K = hat(axis)
    s = np.sin(angles)[..., None, None]
    c = np.cos(angles)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def leg_fk(leg: LegModel, angles: np.ndarray, side: str) -> np.ndarray:
    """Wheel center in the base frame, ``h(q)``; batched over leading axes of ``angles``."""
    angles = np.asarray(angles, dtype=float)
    batch = angles.shape[:-1]
    R = np.broadcast_to(np.eye(3), batch + (3, 3))
    p = np.zeros(batch + (3,))
    for link in leg.chain(side):
        p = p + np.einsum("...ij,j->...i", R, link.offset)
        if link.kind == "revolute":
            q = angles[..., leg.joint_index(link.name)]
            R = R @ _axis_rotations(link.axis, q)
    return p


def wheel_center_world(state: RobotState, joints: JointConfig, leg: LegModel, side: str) -> np.ndarray:
    """``R h(q) + t``."""
    return state.rotation @ leg_fk(leg, joints.angles, side) + state.translation


def contact_point(wheel_center, wheel_radius: float) -> np.ndarray:
    """Contact point taken directly below the wheel center."""
    return np.asarray(wheel_center, dtype=float) - np.array([0.0, 0.0, wheel_radius])


def manifold_residual(state: RobotState, joints: JointConfig, leg: LegModel, side: str, terrain) -> tuple[float, bool]:
    """Height of the wheel bottom above the terrain surface, ``xi_z - r - f(xi_xy)``.

    The flag is False when the terrain has no center near the contact; the
    residual must then be left out of any cost.
    """
    xi = wheel_center_world(state, joints, leg, side)
    h, supported = terrain.predict(xi[None, :2])
    return float(xi[2] - leg.wheel_radius - h[0]), bool(supported[0])


def wheel_center_jacobian(state: RobotState, joints: JointConfig, leg: LegModel, side: str) -> np.ndarray:
    """``d xi / d [dtheta, dt]`` (3 x 6) under the right perturbation."""
    h = leg_fk(leg, joints.angles, side)
    return np.hstack([-state.rotation @ hat(h), np.eye(3)])


def manifold_jacobian(state: RobotState, joints: JointConfig, leg: LegModel, side: str, terrain) -> np.ndarray:
    """Row ``[-df/dx, -df/dy, 1] @ d xi / d [dtheta, dt]``, shape ``(6,)``."""
    xi = wheel_center_world(state, joints, leg, side)
    grad, _ = terrain.predict_gradient_many(xi[None, :2])
    dr_dxi = np.array([-grad[0, 0], -grad[0, 1], 1.0])
    return dr_dxi @ wheel_center_jacobian(state, joints, leg, side)
