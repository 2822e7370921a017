"""IMU preintegration between keyframes and the stationary initializer.

Preintegration compounds bias-corrected samples into relative rotation,
velocity and position deltas that are independent of the absolute state,
with 9x9 noise propagation and first-order bias Jacobians for cheap
re-linearization. Gravity convention: world z up, g_W = (0, 0, -9.80665),
accelerometer model a_meas = R_IW @ (a_W - g_W) + b_a.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

__all__ = [
    "GRAVITY_W",
    "ImuSample",
    "ImuNoiseModel",
    "PreintegratedImu",
    "MotionDetected",
    "preintegrate",
    "compose",
    "stationary_init",
    "slice_imu",
]

GRAVITY_W = np.array([0.0, 0.0, -9.80665])


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    accel: np.ndarray  # (3,) m/s^2, raw specific force
    gyro: np.ndarray  # (3,) rad/s, raw


@dataclass(frozen=True)
class ImuNoiseModel:
    gyro_noise_density: float = 0.005  # rad/s/sqrt(Hz)
    accel_noise_density: float = 0.02  # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 1e-5  # rad/s^2/sqrt(Hz)
    accel_bias_walk: float = 1e-4  # m/s^3/sqrt(Hz)
    gravity_magnitude: float = 9.80665

    def __post_init__(self):
        for name in ("gyro_noise_density", "accel_noise_density", "gyro_bias_walk", "accel_bias_walk", "gravity_magnitude"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class PreintegratedImu:
    dt_total: float
    delta_R: np.ndarray  # (3, 3)
    delta_v: np.ndarray  # (3,)
    delta_p: np.ndarray  # (3,)
    covariance: np.ndarray  # (9, 9) over (dtheta, dv, dp)
    J_Rg: np.ndarray
    J_vg: np.ndarray
    J_va: np.ndarray
    J_pg: np.ndarray
    J_pa: np.ndarray
    bias_gyro_lin: np.ndarray
    bias_accel_lin: np.ndarray


class MotionDetected(RuntimeError):
    """Stationary initialization refused: motion during the init window."""


def _stack(samples):
    ts = np.array([s.timestamp for s in samples], dtype=float)
    acc = np.array([s.accel for s in samples], dtype=float)
    gyr = np.array([s.gyro for s in samples], dtype=float)
    return ts, acc, gyr


def preintegrate(ts, acc, gyr, bias_gyro, bias_accel, noise: ImuNoiseModel) -> PreintegratedImu:
    """Preintegrate samples spanning one keyframe interval (arrays or ImuSample list)."""
    if len(ts) and isinstance(ts[0], ImuSample):
        ts, acc, gyr = _stack(ts)
    ts = np.ascontiguousarray(np.asarray(ts, dtype=float))
    acc = np.ascontiguousarray(np.asarray(acc, dtype=float).reshape(len(ts), 3))
    gyr = np.ascontiguousarray(np.asarray(gyr, dtype=float).reshape(len(ts), 3))
    if len(ts) < 2:
        raise ValueError("preintegration interval needs at least 2 samples")
    if np.any(np.diff(ts) <= 0):
        raise ValueError("IMU timestamps must be strictly increasing")
    bg = np.ascontiguousarray(np.asarray(bias_gyro, dtype=float))
    ba = np.ascontiguousarray(np.asarray(bias_accel, dtype=float))
    dR, dv, dp, P, J_Rg, J_vg, J_va, J_pg, J_pa, dt = kernels.preintegrate_kernel(
        ts, acc, gyr, bg, ba, noise.gyro_noise_density, noise.accel_noise_density
    )
    # tiny covariance floor keeps the information matrix finite for short runs
    P = P + 1e-16 * np.eye(9)
    return PreintegratedImu(dt, dR, dv, dp, P, J_Rg, J_vg, J_va, J_pg, J_pa, bg.copy(), ba.copy())


def compose(first: PreintegratedImu, second: PreintegratedImu) -> PreintegratedImu:
    """Chain two consecutive preintegrations (deltas only; covariance re-propagated
    is not needed by callers composing for consistency checks)."""
    dR = first.delta_R @ second.delta_R
    dv = first.delta_v + first.delta_R @ second.delta_v
    dp = first.delta_p + first.delta_v * second.dt_total + first.delta_R @ second.delta_p
    return PreintegratedImu(
        first.dt_total + second.dt_total,
        dR,
        dv,
        dp,
        first.covariance,
        first.J_Rg,
        first.J_vg,
        first.J_va,
        first.J_pg,
        first.J_pa,
        first.bias_gyro_lin,
        first.bias_accel_lin,
    )


def slice_imu(imu_t, imu_acc, imu_gyr, t_a: float, t_b: float):
    """IMU samples covering [t_a, t_b] with linearly interpolated endpoints.

    Keyframe stamps rarely coincide with IMU sample times; interpolating the
    boundary samples keeps preintegration intervals exact.
    """
    imu_t = np.asarray(imu_t, dtype=float)
    if t_b <= t_a:
        raise ValueError("empty preintegration interval")
    if t_a < imu_t[0] - 1e-9 or t_b > imu_t[-1] + 1e-9:
        raise ValueError("interval not covered by the IMU stream")
    imu_acc = np.asarray(imu_acc, dtype=float)
    imu_gyr = np.asarray(imu_gyr, dtype=float)
    inner = (imu_t > t_a + 1e-12) & (imu_t < t_b - 1e-12)
    ts = np.concatenate([[t_a], imu_t[inner], [t_b]])
    acc = np.empty((len(ts), 3))
    gyr = np.empty((len(ts), 3))
    acc[1:-1] = imu_acc[inner]
    gyr[1:-1] = imu_gyr[inner]
    for axis in range(3):
        acc[0, axis] = np.interp(t_a, imu_t, imu_acc[:, axis])
        acc[-1, axis] = np.interp(t_b, imu_t, imu_acc[:, axis])
        gyr[0, axis] = np.interp(t_a, imu_t, imu_gyr[:, axis])
        gyr[-1, axis] = np.interp(t_b, imu_t, imu_gyr[:, axis])
    return ts, acc, gyr


def stationary_init(ts, acc, gyr, noise: ImuNoiseModel, duration: float | None = None):
    """Gyro bias and roll/pitch from a motionless segment, gravity as reference.

    Returns (bias_gyro, roll, pitch); yaw is unobservable and left at zero.
    Raises MotionDetected when the gyro variance exceeds the stationarity gate.
    """
    if len(ts) and isinstance(ts[0], ImuSample):
        ts, acc, gyr = _stack(ts)
    ts = np.asarray(ts, dtype=float)
    acc = np.asarray(acc, dtype=float).reshape(len(ts), 3)
    gyr = np.asarray(gyr, dtype=float).reshape(len(ts), 3)
    if duration is not None:
        keep = ts <= ts[0] + duration
        ts, acc, gyr = ts[keep], acc[keep], gyr[keep]
    if len(ts) < 10:
        raise ValueError("too few samples for stationary initialization")
    rate = (len(ts) - 1) / (ts[-1] - ts[0])
    gate = (3.0 * noise.gyro_noise_density * np.sqrt(rate)) ** 2
    if np.any(np.var(gyr, axis=0) > gate):
        raise MotionDetected("gyro variance exceeds the stationarity threshold")
    bias_gyro = gyr.mean(axis=0)
    a_mean = acc.mean(axis=0)
    a_hat = a_mean / np.linalg.norm(a_mean)  # ~ R_IW @ z_up
    pitch = float(np.arcsin(np.clip(-a_hat[0], -1.0, 1.0)))
    roll = float(np.arctan2(a_hat[1], a_hat[2]))
    return bias_gyro, roll, pitch
