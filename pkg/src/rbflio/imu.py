"""IMU preintegration between consecutive scans."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .kinematics import RobotState
from .so3 import orthonormalize, so3_exp

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])
_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class ImuSample:
    t: float
    accel: np.ndarray
    gyro: np.ndarray


@dataclass(frozen=True)
class PreintegratedDelta:
    """Gravity-free relative motion accumulated over a sample window.

    ``dV`` and ``dT`` are expressed in the body frame at the start of the
    window.
    """

    dR: np.ndarray
    dV: np.ndarray
    dT: np.ndarray
    duration: float

    @classmethod
    def identity(cls) -> PreintegratedDelta:
        return cls(np.eye(3), np.zeros(3), np.zeros(3), 0.0)


class ImuStream:
    """Time-ordered IMU samples held as arrays."""

    def __init__(self, t, accel, gyro):
        self.t = np.asarray(t, dtype=float).reshape(-1)
        self.accel = np.asarray(accel, dtype=float).reshape(-1, 3)
        self.gyro = np.asarray(gyro, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.accel) == len(self.gyro)):
            raise ValueError("IMU arrays have mismatched lengths")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("IMU timestamps must be strictly increasing")
        if not (np.isfinite(self.t).all() and np.isfinite(self.accel).all() and np.isfinite(self.gyro).all()):
            raise ValueError("IMU stream contains non-finite values")

    def __len__(self) -> int:
        return len(self.t)

    def window(self, t0: float, t1: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Samples in ``(t0, t1]``; a sample is interpolated at ``t1`` if none lands on it."""
        lo = np.searchsorted(self.t, t0, side="right")
        hi = np.searchsorted(self.t, t1, side="right")
        t, a, g = self.t[lo:hi], self.accel[lo:hi], self.gyro[lo:hi]
        if hi < len(self.t) and (hi == lo or t[-1] < t1) and hi > 0:
            t_prev, t_next = self.t[hi - 1], self.t[hi]
            u = (t1 - t_prev) / (t_next - t_prev)
            a_end = (1 - u) * self.accel[hi - 1] + u * self.accel[hi]
            g_end = (1 - u) * self.gyro[hi - 1] + u * self.gyro[hi]
            t = np.append(t, t1)
            a = np.vstack([a, a_end])
            g = np.vstack([g, g_end])
        return t, a, g


def preintegrate(
    t: np.ndarray,
    accel: np.ndarray,
    gyro: np.ndarray,
    t_start: float,
    accel_bias=np.zeros(3),
    gyro_bias=np.zeros(3),
) -> PreintegratedDelta:
    """Accumulate bias-corrected samples taken in ``(t_start, t[-1]]``.

    Sample ``i`` covers the interval ``(t[i-1], t[i]]`` (the first from
    ``t_start``). Per sample, with ``a = a_i - b_a`` and ``w = w_i - b_g``::

        dT += dV dt + 0.5 dR a dt^2
        dV += dR a dt
        dR  = dR exp(hat(w) dt)

    Gravity is not included; see :func:`predict_pose`.
    """
    t = np.asarray(t, dtype=float).reshape(-1)
    if len(t) == 0:
        log.warning("empty IMU window at t=%.6f, returning identity delta", t_start)
        return PreintegratedDelta.identity()
    accel = np.asarray(accel, dtype=float).reshape(-1, 3) - np.asarray(accel_bias, dtype=float)
    gyro = np.asarray(gyro, dtype=float).reshape(-1, 3) - np.asarray(gyro_bias, dtype=float)
    if not (np.isfinite(accel).all() and np.isfinite(gyro).all()):
        raise ValueError("non-finite IMU sample or bias")
    dts = np.diff(np.concatenate([[t_start], t]))
    if np.any(dts < 0):
        raise ValueError("IMU samples precede the window start")
    dR = np.eye(3)
    dV = np.zeros(3)
    dT = np.zeros(3)
    for a, w, dt in zip(accel, gyro, dts):
        Ra = dR @ a
        dT = dT + dV * dt + 0.5 * Ra * dt * dt
        dV = dV + Ra * dt
        dR = dR @ so3_exp(w * dt)
        if np.abs(dR.T @ dR - np.eye(3)).max() > _ORTHO_TOL:
            dR = orthonormalize(dR)
    return PreintegratedDelta(dR, dV, dT, float(t[-1] - t_start))


def preintegrate_samples(samples: list[ImuSample], t_start: float, accel_bias=np.zeros(3), gyro_bias=np.zeros(3)):
    if not samples:
        return preintegrate(np.empty(0), np.empty((0, 3)), np.empty((0, 3)), t_start)
    t = np.array([s.t for s in samples])
    a = np.array([s.accel for s in samples])
    g = np.array([s.gyro for s in samples])
    return preintegrate(t, a, g, t_start, accel_bias, gyro_bias)


def predict_pose(prev: RobotState, delta: PreintegratedDelta, gravity=GRAVITY) -> RobotState:
    """Propagate ``prev`` by a preintegrated delta, adding gravity in the world frame."""
    T = delta.duration
    g = np.asarray(gravity, dtype=float)
    R = prev.rotation
    return RobotState(
        rotation=orthonormalize(R @ delta.dR),
        translation=prev.translation + prev.velocity * T + 0.5 * g * T * T + R @ delta.dT,
        velocity=prev.velocity + g * T + R @ delta.dV,
        accel_bias=prev.accel_bias,
        gyro_bias=prev.gyro_bias,
    )


__all__ = [
    "GRAVITY",
    "ImuSample",
    "ImuStream",
    "PreintegratedDelta",
    "predict_pose",
    "preintegrate",
    "preintegrate_samples",
]
