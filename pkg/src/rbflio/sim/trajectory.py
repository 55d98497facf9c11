"""Smooth ground-truth base trajectories over a terrain."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter1d

from ..kinematics import RobotState
from ..so3 import euler_zyx_batch
from .terrain import TerrainSpec


@dataclass(frozen=True)
class MotionProfile:
    """Path and timing of a run.

    The robot stands still for ``stationary_start`` seconds, accelerates
    along ``waypoints`` (a smooth spline through them) to ``speed`` with a
    raised-cosine acceleration pulse of peak ``accel``, cruises, brakes
    symmetrically and stands still for ``stationary_end`` seconds.

    The base height is the mean terrain height under both wheels, smoothed
    over ``smoothing`` metres of path, plus ``ride_height``; pitch and roll
    follow the smoothed profile. Every riser crossing adds a Gaussian-windowed
    vertical oscillation of amplitude ``jolt_amplitude``.
    """

    waypoints: tuple = ((0.0, 0.0), (20.0, 0.0))
    speed: float = 1.0
    accel: float = 1.0
    stationary_start: float = 1.0
    stationary_end: float = 0.5
    ride_height: float = 0.42
    wheel_track: float = 0.24
    smoothing: float = 0.15
    jolt_amplitude: float = 0.0
    jolt_frequency: float = 8.0
    jolt_width: float = 0.06
    grid_dt: float = 0.002

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["waypoints"] = [list(w) for w in self.waypoints]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MotionProfile:
        d = dict(d)
        d["waypoints"] = tuple(tuple(w) for w in d["waypoints"])
        return cls(**d)


def _path_spline(waypoints: np.ndarray):
    """Arc-length parametrized planar path; returns ``(xy(s), tangent(s), length)``."""
    w = np.asarray(waypoints, dtype=float)
    chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(w, axis=0), axis=1))])
    if len(w) == 2:
        length = chord[-1]
        direction = (w[1] - w[0]) / length

        def xy(s):
            return w[0] + np.asarray(s)[..., None] * direction

        def tangent(s):
            return np.broadcast_to(direction, np.shape(s) + (2,))

        return xy, tangent, length
    spline = CubicSpline(chord, w, bc_type="natural")
    u = np.linspace(0, chord[-1], 20001)
    speed = np.linalg.norm(spline(u, 1), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(u))])
    u_of_s = CubicSpline(arc, u)

    def xy(s):
        return spline(u_of_s(np.clip(s, 0, arc[-1])))

    def tangent(s):
        d = spline(u_of_s(np.clip(s, 0, arc[-1])), 1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    return xy, tangent, float(arc[-1])


def _arc_length_profile(profile: MotionProfile, length: float, t: np.ndarray) -> np.ndarray:
    """Distance travelled at times ``t`` for the stop-go-stop speed profile."""
    v, a = profile.speed, profile.accel
    t_acc = 2.0 * v / a  # raised-cosine pulse of peak a reaches speed v
    d_acc = v * t_acc / 2.0
    if 2 * d_acc > length:
        raise ValueError("path too short for the requested speed and acceleration")
    t_cruise = (length - 2 * d_acc) / v
    t1 = profile.stationary_start
    t2 = t1 + t_acc
    t3 = t2 + t_cruise
    t4 = t3 + t_acc

    def ramp_distance(tau):
        # integral of v(tau) = v * (tau/T - sin(2 pi tau/T)/(2 pi))
        T = t_acc
        return v * (tau**2 / (2 * T) - T / (4 * np.pi**2) * (1 - np.cos(2 * np.pi * tau / T)))

    s = np.zeros_like(t)
    m = (t > t1) & (t <= t2)
    s[m] = ramp_distance(t[m] - t1)
    m = (t > t2) & (t <= t3)
    s[m] = d_acc + v * (t[m] - t2)
    m = (t > t3) & (t <= t4)
    s[m] = length - ramp_distance(t4 - t[m])
    s[t > t4] = length
    return s


def motion_duration(profile: MotionProfile, length: float) -> float:
    t_acc = 2.0 * profile.speed / profile.accel
    return profile.stationary_start + 2 * t_acc + (length - profile.speed * t_acc) / profile.speed + profile.stationary_end


@dataclass
class Trajectory:
    """Ground-truth base motion as C2 splines over time.

    Orientation is ``Rz(yaw) Ry(pitch) Rx(roll)``.
    """

    position: CubicSpline
    angles: CubicSpline  # yaw, pitch, roll
    duration: float
    jolt_times: np.ndarray = field(default_factory=lambda: np.empty(0))

    def rotation(self, t) -> np.ndarray:
        a = self.angles(np.asarray(t, dtype=float))
        return euler_zyx_batch(a[..., 0], a[..., 1], a[..., 2])

    def translation(self, t) -> np.ndarray:
        return self.position(np.asarray(t, dtype=float))

    def velocity(self, t) -> np.ndarray:
        return self.position(np.asarray(t, dtype=float), 1)

    def acceleration(self, t) -> np.ndarray:
        return self.position(np.asarray(t, dtype=float), 2)

    def body_rate(self, t) -> np.ndarray:
        """Angular velocity in the body frame from the Euler-angle rates."""
        a = self.angles(np.asarray(t, dtype=float))
        da = self.angles(np.asarray(t, dtype=float), 1)
        yaw_d, pitch_d, roll_d = da[..., 0], da[..., 1], da[..., 2]
        pitch, roll = a[..., 1], a[..., 2]
        return np.stack(
            [
                roll_d - yaw_d * np.sin(pitch),
                pitch_d * np.cos(roll) + yaw_d * np.cos(pitch) * np.sin(roll),
                -pitch_d * np.sin(roll) + yaw_d * np.cos(pitch) * np.cos(roll),
            ],
            axis=-1,
        )

    def state(self, t: float) -> RobotState:
        return RobotState(self.rotation(t), self.translation(t), self.velocity(t))


def generate_trajectory(spec: TerrainSpec, profile: MotionProfile) -> Trajectory:
    """Base trajectory following ``profile`` over ``spec``."""
    xy_of_s, tangent_of_s, length = _path_spline(np.asarray(profile.waypoints))
    duration = motion_duration(profile, length)
    n = int(round(duration / profile.grid_dt))
    t = np.arange(n + 1) * profile.grid_dt
    duration = float(t[-1])

    # terrain profile sampled along the path on a uniform arc-length grid
    ds = 0.005
    s_grid = np.arange(0.0, length + ds, ds)
    xy = xy_of_s(s_grid)
    tan = tangent_of_s(s_grid)
    normal = np.column_stack([-tan[:, 1], tan[:, 0]])
    half = profile.wheel_track / 2
    h_left = spec.height(xy + half * normal)
    h_right = spec.height(xy - half * normal)
    sigma_cells = profile.smoothing / ds
    ground = gaussian_filter1d(0.5 * (h_left + h_right), sigma_cells, mode="nearest")
    bank = gaussian_filter1d(h_left - h_right, sigma_cells, mode="nearest")
    slope = np.gradient(ground, ds)
    pitch_s = -np.arctan(slope)
    roll_s = np.arctan2(bank, 2 * half)
    yaw_s = np.unwrap(np.arctan2(tan[:, 1], tan[:, 0]))

    s_t = _arc_length_profile(profile, length, t)
    xy_t = xy_of_s(s_t)
    along = CubicSpline(s_grid, np.column_stack([ground, yaw_s, pitch_s, roll_s]))(s_t)
    z_t = along[:, 0] + profile.ride_height
    yaw_t, pitch_t, roll_t = along[:, 1], along[:, 2], along[:, 3]

    jolt_times = np.empty(0)
    if profile.jolt_amplitude > 0:
        edges = spec.step_edges()
        # time of crossing each riser (x of the path centre), only if reached
        crossings = []
        x_t = xy_t[:, 0]
        for e in edges:
            idx = np.flatnonzero((x_t[:-1] < e) & (x_t[1:] >= e))
            crossings.extend(t[idx])
        jolt_times = np.sort(np.asarray(crossings))
        w = profile.jolt_width
        for tj in jolt_times:
            tau = t - tj
            z_t = z_t + profile.jolt_amplitude * np.exp(-((tau / w) ** 2)) * np.sin(2 * np.pi * profile.jolt_frequency * tau)

    position = CubicSpline(t, np.column_stack([xy_t, z_t]))
    angles = CubicSpline(t, np.column_stack([yaw_t, pitch_t, roll_t]))
    return Trajectory(position, angles, duration, jolt_times)
