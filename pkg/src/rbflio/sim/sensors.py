"""Synthetic IMU and joint-encoder streams."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..imu import GRAVITY, ImuStream
from ..kinematics import LEFT, RIGHT, LegModel, leg_fk
from ..so3 import so3_log
from .terrain import TerrainSpec
from .trajectory import Trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SensorNoise:
    """Noise levels and the true (unknown to the estimator) IMU biases."""

    lidar_sigma: float = 0.02
    imu_accel_sigma: float = 0.02
    imu_gyro_sigma: float = 0.002
    accel_bias: tuple = (0.02, -0.015, 0.04)
    gyro_bias: tuple = (0.001, -0.0015, 0.001)
    joint_sigma: float = 0.0005

    def __post_init__(self) -> None:
        for name in ("lidar_sigma", "imu_accel_sigma", "imu_gyro_sigma", "joint_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def noiseless(cls) -> SensorNoise:
        return cls(0.0, 0.0, 0.0, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 0.0)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["accel_bias"] = list(self.accel_bias)
        d["gyro_bias"] = list(self.gyro_bias)
        return d


def generate_imu(
    traj: Trajectory,
    rate: float,
    noise: SensorNoise,
    rng: np.random.Generator,
    gravity=GRAVITY,
) -> ImuStream:
    """IMU samples at ``rate`` Hz over the trajectory.

    Each sample reports the mean over its interval ``(t_{i-1}, t_i]``,
    expressed in the body frame at ``t_{i-1}``::

        gyro_i  = log(R_{i-1}^T R_i) / dt
        accel_i = R_{i-1}^T ((v_i - v_{i-1}) / dt - g)

    which is ``R^T (a - g)`` and the body rate averaged over the interval, so
    that preintegrating noise-free samples reproduces the true rotation and
    velocity increments exactly. Biases and white noise are then added.
    """
    dt = 1.0 / rate
    n = int(np.floor(traj.duration * rate + 1e-9))
    t = np.arange(n + 1) * dt
    R = traj.rotation(t)
    v = traj.velocity(t)
    g = np.asarray(gravity, dtype=float)
    gyro = np.array([so3_log(R[i - 1].T @ R[i]) for i in range(1, n + 1)]) / dt
    accel = np.einsum("nji,nj->ni", R[:-1], (v[1:] - v[:-1]) / dt - g)
    accel = accel + np.asarray(noise.accel_bias) + rng.normal(0.0, noise.imu_accel_sigma, accel.shape)
    gyro = gyro + np.asarray(noise.gyro_bias) + rng.normal(0.0, noise.imu_gyro_sigma, gyro.shape)
    return ImuStream(t[1:], accel, gyro)


# inverse kinematics ------------------------------------------------------------


@dataclass
class JointStream:
    t: np.ndarray
    angles: np.ndarray
    names: list = field(default_factory=list)
    flagged: np.ndarray | None = None

    def at(self, t: float) -> np.ndarray:
        """Joint angles linearly interpolated at ``t``."""
        return np.array([np.interp(t, self.t, self.angles[:, j]) for j in range(self.angles.shape[1])])


def _pitch_leg_geometry(leg: LegModel, side: str):
    """Fixed lateral offset, hip position and reach of a leg whose joints all pitch."""
    chain = leg.chain(side)
    for link in chain:
        if link.kind == "revolute" and abs(abs(link.axis[1]) - 1.0) > 1e-12:
            raise ValueError("inverse kinematics supports legs whose joints all rotate about y")
    hip = np.zeros(3)
    reach = 0.0
    seen_joint = False
    for link in chain:
        if seen_joint:
            reach += np.hypot(link.offset[0], link.offset[2])
        else:
            hip = hip + link.offset
        if link.kind == "revolute":
            seen_joint = True
    y0 = leg_fk(leg, np.zeros(leg.n_joints), side)[1]
    return y0, hip, reach


def solve_leg_ik(leg: LegModel, side: str, targets: np.ndarray, seed: np.ndarray, iters: int = 30) -> tuple[np.ndarray, np.ndarray]:
    """Joint angles placing the wheel center at base-frame ``targets`` (x and z matched).

    Vectorized Gauss-Newton from ``seed`` on the side's revolute joints.
    Returns ``(angles (n, n_joints), residual norm (n,))``.
    """
    idx = leg.side_joints(side)
    n = len(targets)
    q = np.tile(np.asarray(seed, dtype=float), (n, 1))
    full = np.zeros((n, leg.n_joints))
    eps = 1e-7

    def fk(qs):
        f = full.copy()
        f[:, idx] = qs
        p = leg_fk(leg, f, side)
        return p[:, [0, 2]]

    for _ in range(iters):
        r = fk(q) - targets[:, [0, 2]]
        J = np.empty((n, 2, len(idx)))
        for k in range(len(idx)):
            dq = np.zeros(len(idx))
            dq[k] = eps
            J[:, :, k] = (fk(q + dq) - fk(q - dq)) / (2 * eps)
        step = np.einsum("nij,nj->ni", np.linalg.pinv(J), r)
        q = q - step
    r = fk(q) - targets[:, [0, 2]]
    full[:, idx] = q
    return full, np.linalg.norm(r, axis=1)


def generate_joints(
    traj: Trajectory,
    spec: TerrainSpec,
    leg: LegModel,
    rate: float,
    noise: SensorNoise,
    rng: np.random.Generator,
    seed_angles=(0.9, -1.8),
) -> JointStream:
    """Joint angles that keep both wheels on the terrain.

    For each sample the wheel center is kept at base-frame ``x = 0`` (below
    the hip line) and its leg extension ``d`` is found by bisection so that
    the world-frame wheel bottom meets the terrain under it; the joint angles
    then follow from a Gauss-Newton solve. Unreachable samples are flagged
    and hold the previous angles.
    """
    dt = 1.0 / rate
    n = int(np.floor(traj.duration * rate + 1e-9))
    t = np.arange(n + 1) * dt
    R = traj.rotation(t)
    p = traj.translation(t)
    angles = np.zeros((len(t), leg.n_joints))
    flagged = np.zeros(len(t), dtype=bool)
    for side in (LEFT, RIGHT):
        y0, hip, reach = _pitch_leg_geometry(leg, side)

        def wheel_world(d):
            local = np.column_stack([np.zeros_like(d), np.full_like(d, y0), hip[2] - d])
            return np.einsum("nij,nj->ni", R, local) + p

        def gap(d):
            w = wheel_world(d)
            inside = spec.contains(w[:, :2])
            h = np.full(len(d), np.nan)
            h[inside] = spec.height(w[inside, :2])
            return w[:, 2] - leg.wheel_radius - h

        lo = np.full(len(t), 0.3 * reach)
        hi = np.full(len(t), 0.999 * reach)
        g_lo, g_hi = gap(lo), gap(hi)
        ok = (g_lo >= 0) & (g_hi <= 0)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            above = gap(mid) > 0
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        d = 0.5 * (lo + hi)
        targets = np.column_stack([np.zeros_like(d), np.full_like(d, y0), hip[2] - d])
        sol, err = solve_leg_ik(leg, side, targets, seed_angles)
        ok &= err < 1e-10
        idx = leg.side_joints(side)
        angles[:, idx] = sol[:, idx]
        flagged |= ~ok
    if flagged.any():
        log.warning("%d joint samples unreachable, holding previous angles", int(flagged.sum()))
        for i in np.flatnonzero(flagged):
            angles[i] = angles[i - 1] if i > 0 else angles[i]
    if noise.joint_sigma > 0:
        angles = angles + rng.normal(0.0, noise.joint_sigma, angles.shape)
    return JointStream(t, angles, list(leg.joint_names), flagged)
