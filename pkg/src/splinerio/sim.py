"""Synthetic ground-truth generator and verification oracle.

Analytic trajectories (closed-form position/attitude and derivatives), IMU
sample synthesis with biases and white noise, radar point clouds over a
static scene, and exact radar-frame ego-velocity queries used as oracles by
the estimator tests.

Timestamp skew: radar records carry radar-clock stamps t_R such that the
physical event occurred at IMU-clock time t_R + true_t_O.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import so3_exp
from .imu_preint import GRAVITY_W, ImuNoiseModel
from .radar_ego import COV_FLOOR_STD, EgoVelMeasurement, RadarScan

__all__ = [
    "TrajectorySpec",
    "SensorRigSpec",
    "GroundTruth",
    "SimDataset",
    "generate",
    "analytic_radar_velocity",
]

_KINDS = ("static", "constant-velocity", "sinusoidal-3d", "figure-eight")


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "sinusoidal-3d"
    amplitude: float = 1.5  # m
    angular_amplitude: float = np.deg2rad(30.0)  # rad, yaw/pitch oscillation
    period: float = 6.0  # s
    duration: float = 30.0  # s of motion (after the static prefix)
    velocity: tuple = (1.0, 0.0, 0.0)  # constant-velocity kind only
    ramp: float = 2.0  # s, smooth spin-up of the motion
    static_prefix: float = 12.0  # s hold for stationary initialization

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.period <= 0 or self.duration <= 0:
            raise ValueError("period and duration must be positive")


@dataclass(frozen=True)
class SensorRigSpec:
    true_R_IR: np.ndarray = field(default_factory=lambda: np.eye(3))
    true_p_IR: np.ndarray = field(default_factory=lambda: np.zeros(3))
    true_t_O: float = 0.0
    imu_rate: float = 200.0
    radar_rate: float = 10.0
    imu_noise: ImuNoiseModel = field(default_factory=ImuNoiseModel)
    true_b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    true_b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    doppler_noise: float = 0.05  # m/s
    outlier_fraction: float = 0.0
    points_per_scan: int = 100
    range_span: tuple = (1.0, 30.0)
    seed: int = 0

    def __post_init__(self):
        if self.imu_rate <= 0 or self.radar_rate <= 0:
            raise ValueError("sensor rates must be positive")
        if not 0.0 <= self.outlier_fraction < 0.5:
            raise ValueError("outlier_fraction must lie in [0, 0.5)")


def _smoothstep(x: float):
    """Quintic smoothstep and its first two derivatives; C^2 at both ends."""
    if x <= 0.0:
        return 0.0, 0.0, 0.0
    if x >= 1.0:
        return 1.0, 0.0, 0.0
    s = x**3 * (10.0 - 15.0 * x + 6.0 * x**2)
    ds = 30.0 * x**2 * (1.0 - x) ** 2
    dds = 60.0 * x * (1.0 - 3.0 * x + 2.0 * x**2)
    return s, ds, dds


class GroundTruth:
    """Analytic pose/velocity/acceleration/angular-rate as functions of time.

    Time t is IMU-clock time starting at 0; the first ``static_prefix``
    seconds hold the initial pose.
    """

    def __init__(self, traj: TrajectorySpec):
        self.traj = traj
        self.duration = traj.static_prefix + traj.duration

    # -- raw motion coordinates (before the ramp), as (value, d/dt, d2/dt2) --

    def _base(self, tau: float):
        traj = self.traj
        w = 2.0 * np.pi / traj.period
        A = traj.amplitude
        G = traj.angular_amplitude
        if traj.kind == "static":
            return np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3)
        if traj.kind == "constant-velocity":
            v = np.asarray(traj.velocity, dtype=float)
            return v * tau, v, np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3)
        s1, c1 = np.sin(w * tau), np.cos(w * tau)
        s2, c2 = np.sin(2 * w * tau), np.cos(2 * w * tau)
        if traj.kind == "sinusoidal-3d":
            p = A * np.array([s1, 0.7 * (1.0 - c1), 0.3 * s2])
            dp = A * np.array([w * c1, 0.7 * w * s1, 0.6 * w * c2])
            ddp = A * np.array([-w * w * s1, 0.7 * w * w * c1, -1.2 * w * w * s2])
            ang = G * np.array([0.3 * np.sin(w * tau + 1.0), s1, np.sin(w * tau + 0.5)])
            dang = G * w * np.array([0.3 * np.cos(w * tau + 1.0), c1, np.cos(w * tau + 0.5)])
            ddang = -G * w * w * np.array([0.3 * np.sin(w * tau + 1.0), s1, np.sin(w * tau + 0.5)])
            return p, dp, ddp, ang, dang, ddang
        # figure-eight
        p = A * np.array([s1, 0.5 * s2, 0.2 * s2])
        dp = A * w * np.array([c1, c2, 0.4 * c2])
        ddp = A * w * w * np.array([-s1, -2.0 * s2, -0.8 * s2])
        ang = G * np.array([0.0, 0.3 * s2, s1])
        dang = G * w * np.array([0.0, 0.6 * c2, c1])
        ddang = G * w * w * np.array([0.0, -1.2 * s2, -s1])
        return p, dp, ddp, ang, dang, ddang

    def _motion(self, t: float):
        """Ramped motion coordinates (roll, pitch, yaw) and translation."""
        tau = t - self.traj.static_prefix
        if tau <= 0.0:
            z = np.zeros(3)
            return z, z.copy(), z.copy(), z.copy(), z.copy(), z.copy()
        p, dp, ddp, ang, dang, ddang = self._base(tau)
        T = max(self.traj.ramp, 1e-9)
        r, dr, ddr = _smoothstep(tau / T)
        dr, ddr = dr / T, ddr / (T * T)
        pp = r * p
        dpp = dr * p + r * dp
        ddpp = ddr * p + 2.0 * dr * dp + r * ddp
        aa = r * ang
        daa = dr * ang + r * dang
        ddaa = ddr * ang + 2.0 * dr * dang + r * ddang
        return pp, dpp, ddpp, aa, daa, ddaa

    # -- public queries ----------------------------------------------------

    def position(self, t: float) -> np.ndarray:
        return self._motion(t)[0]

    def velocity(self, t: float) -> np.ndarray:
        return self._motion(t)[1]

    def acceleration_w(self, t: float) -> np.ndarray:
        return self._motion(t)[2]

    def attitude_wi(self, t: float) -> np.ndarray:
        """R_WI: IMU-to-world rotation (yaw-pitch-roll Euler composition)."""
        _, _, _, ang, _, _ = self._motion(t)
        roll, pitch, yaw = ang
        return _rz(yaw) @ _ry(pitch) @ _rx(roll)

    def angular_velocity_body(self, t: float) -> np.ndarray:
        _, _, _, ang, dang, _ = self._motion(t)
        roll, pitch, _ = ang
        droll, dpitch, dyaw = dang
        sr, cr = np.sin(roll), np.cos(roll)
        sp, cp = np.sin(pitch), np.cos(pitch)
        return np.array(
            [
                droll - dyaw * sp,
                dpitch * cr + dyaw * cp * sr,
                -dpitch * sr + dyaw * cp * cr,
            ]
        )

    def specific_force_body(self, t: float) -> np.ndarray:
        """Ideal accelerometer reading (no bias, no noise)."""
        R_IW = self.attitude_wi(t).T
        return R_IW @ (self.acceleration_w(t) - GRAVITY_W)

    def relative_motion(self, t_i: float, t_j: float):
        """Analytic (delta_R, delta_v, delta_p) matching preintegration conventions."""
        R_WI_i = self.attitude_wi(t_i)
        R_IW_i = R_WI_i.T
        dt = t_j - t_i
        dR = R_WI_i.T @ self.attitude_wi(t_j)
        dv = R_IW_i @ (self.velocity(t_j) - self.velocity(t_i) - GRAVITY_W * dt)
        dp = R_IW_i @ (
            self.position(t_j) - self.position(t_i) - self.velocity(t_i) * dt - 0.5 * GRAVITY_W * dt * dt
        )
        return dR, dv, dp

    def sample(self, ts) -> dict:
        """Sampled trajectory for export: positions, quaternion source matrices, velocities."""
        ts = np.asarray(ts, dtype=float)
        return {
            "t": ts,
            "p": np.stack([self.position(t) for t in ts]),
            "R_WI": np.stack([self.attitude_wi(t) for t in ts]),
            "v": np.stack([self.velocity(t) for t in ts]),
        }


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def analytic_radar_velocity(truth: GroundTruth, rig: SensorRigSpec, t_event: float) -> np.ndarray:
    """Exact radar-frame ego-velocity at the physical event time."""
    if not 0.0 <= t_event <= truth.duration:
        raise ValueError(f"event time {t_event} outside [0, {truth.duration}]")
    R_IW = truth.attitude_wi(t_event).T
    v_I = R_IW @ truth.velocity(t_event)
    lever = np.cross(truth.angular_velocity_body(t_event), rig.true_p_IR)
    return rig.true_R_IR.T @ (v_I + lever)


@dataclass
class SimDataset:
    truth: GroundTruth
    rig: SensorRigSpec
    imu_t: np.ndarray
    imu_acc: np.ndarray
    imu_gyr: np.ndarray
    radar_scans: list  # list[RadarScan], stamped with the radar clock
    egovel: list  # list[EgoVelMeasurement], stamped with the radar clock


def generate(traj: TrajectorySpec, rig: SensorRigSpec) -> SimDataset:
    """Synthesize IMU samples, radar scans and exact ego-velocity records.

    Radar-clock stamps are event time minus ``true_t_O``; the IMU stream is
    stamped on the IMU clock directly.
    """
    truth = GroundTruth(traj)
    rng = np.random.default_rng(rig.seed)
    rng_imu, rng_cloud, rng_ev = rng.spawn(3)

    n_imu = int(np.floor(truth.duration * rig.imu_rate)) + 1
    imu_t = np.arange(n_imu) / rig.imu_rate
    imu_acc = np.empty((n_imu, 3))
    imu_gyr = np.empty((n_imu, 3))
    sig_g = rig.imu_noise.gyro_noise_density * np.sqrt(rig.imu_rate)
    sig_a = rig.imu_noise.accel_noise_density * np.sqrt(rig.imu_rate)
    noise_a = rng_imu.normal(0.0, 1.0, size=(n_imu, 3)) * sig_a
    noise_g = rng_imu.normal(0.0, 1.0, size=(n_imu, 3)) * sig_g
    for k, t in enumerate(imu_t):
        imu_acc[k] = truth.specific_force_body(t) + rig.true_b_a + noise_a[k]
        imu_gyr[k] = truth.angular_velocity_body(t) + rig.true_b_g + noise_g[k]

    # radar events uniformly spaced in physical time; stamps skewed by -t_O
    radar_period = 1.0 / rig.radar_rate
    events = np.arange(radar_period, truth.duration - 1e-9, radar_period)
    sigma_ev = rig.doppler_noise / np.sqrt(max(rig.points_per_scan, 3) / 3.0)
    cov_ev = max(sigma_ev, COV_FLOOR_STD) ** 2 * np.eye(3)
    scans: list[RadarScan] = []
    egovel: list[EgoVelMeasurement] = []
    lo, hi = rig.range_span
    for t_event in events:
        stamp = t_event - rig.true_t_O
        v_rad = analytic_radar_velocity(truth, rig, t_event)
        npts = rig.points_per_scan
        dirs = rng_cloud.normal(size=(npts, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        ranges = rng_cloud.uniform(lo, hi, size=npts)
        dops = -dirs @ v_rad + rng_cloud.normal(0.0, 1.0, size=npts) * rig.doppler_noise
        n_out = int(round(rig.outlier_fraction * npts))
        if n_out > 0:
            idx = rng_cloud.choice(npts, size=n_out, replace=False)
            shift = rng_cloud.uniform(3.0, 6.0, size=n_out) * rng_cloud.choice([-1.0, 1.0], size=n_out)
            dops[idx] += shift
        scans.append(RadarScan(stamp, dirs * ranges[:, None], dops))
        egovel.append(
            EgoVelMeasurement(
                stamp,
                v_rad + rng_ev.normal(0.0, 1.0, size=3) * sigma_ev,
                cov_ev.copy(),
                inlier_count=npts,
            )
        )
    return SimDataset(truth, rig, imu_t, imu_acc, imu_gyr, scans, egovel)
