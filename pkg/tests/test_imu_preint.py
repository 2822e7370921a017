import numpy as np
import pytest
from conftest import QUIET_NOISE, quiet_rig, rot_diff_angle

from splinerio.geometry import so3_exp
from splinerio.imu_preint import (
    GRAVITY_W,
    ImuNoiseModel,
    MotionDetected,
    compose,
    preintegrate,
    stationary_init,
)
from splinerio.sim import GroundTruth, TrajectorySpec, generate


def _static_arrays(n=101, rate=200.0, bias_g=None, bias_a=None, R_IW=None):
    ts = np.arange(n) / rate
    R_IW = np.eye(3) if R_IW is None else R_IW
    acc = np.tile(-R_IW @ GRAVITY_W, (n, 1))
    gyr = np.zeros((n, 3))
    if bias_a is not None:
        acc = acc + bias_a
    if bias_g is not None:
        gyr = gyr + bias_g
    return ts, acc, gyr


def test_static_consistency():
    ts, acc, gyr = _static_arrays()
    pre = preintegrate(ts, acc, gyr, np.zeros(3), np.zeros(3), QUIET_NOISE)
    dt = pre.dt_total
    assert np.allclose(pre.delta_R, np.eye(3), atol=1e-12)
    # residual against a static state pair vanishes once gravity is reinstated
    r_v = np.eye(3) @ (np.zeros(3) - np.zeros(3) - GRAVITY_W * dt) - pre.delta_v
    r_p = np.eye(3) @ (-0.5 * GRAVITY_W * dt * dt) - pre.delta_p
    assert np.abs(r_v).max() < 1e-12
    assert np.abs(r_p).max() < 1e-12


def test_constant_rate_rotation():
    rate = 200.0
    n = 201
    ts = np.arange(n) / rate
    omega = np.array([0.0, 0.0, 0.7])
    gyr = np.tile(omega, (n, 1))
    acc = np.zeros((n, 3))
    pre = preintegrate(ts, acc, gyr, np.zeros(3), np.zeros(3), QUIET_NOISE)
    expected = so3_exp(omega * ts[-1])
    assert rot_diff_angle(pre.delta_R, expected) < 1e-9


def _traj_imu(rate, t0, t1, truth):
    ts = np.arange(t0, t1 + 0.5 / rate, 1.0 / rate)
    acc = np.stack([truth.specific_force_body(t) for t in ts])
    gyr = np.stack([truth.angular_velocity_body(t) for t in ts])
    return ts, acc, gyr


def test_simulator_oracle_and_convergence_order():
    truth = GroundTruth(TrajectorySpec(kind="sinusoidal-3d", duration=6.0, static_prefix=0.0, ramp=1.0))
    t0, t1 = 2.0, 2.5
    dR_true, dv_true, dp_true = truth.relative_motion(t0, t1)
    errs = {}
    for rate in (200.0, 2000.0):
        ts, acc, gyr = _traj_imu(rate, t0, t1, truth)
        pre = preintegrate(ts, acc, gyr, np.zeros(3), np.zeros(3), QUIET_NOISE)
        errs[rate] = max(
            rot_diff_angle(pre.delta_R, dR_true),
            np.abs(pre.delta_v - dv_true).max(),
            np.abs(pre.delta_p - dp_true).max(),
        )
    assert errs[200.0] < 1e-4
    ratio = errs[200.0] / errs[2000.0]
    assert 30.0 < ratio < 300.0  # second-order integrator: 10x rate -> ~100x accuracy


def test_split_compose_identity():
    truth = GroundTruth(TrajectorySpec(kind="figure-eight", duration=5.0, static_prefix=0.0, ramp=1.0))
    ts, acc, gyr = _traj_imu(200.0, 1.0, 2.0, truth)
    bg = np.array([0.01, -0.02, 0.005])
    ba = np.array([0.05, 0.02, -0.04])
    whole = preintegrate(ts, acc, gyr, bg, ba, QUIET_NOISE)
    for k in (1, 50, 137, 199):
        first = preintegrate(ts[: k + 1], acc[: k + 1], gyr[: k + 1], bg, ba, QUIET_NOISE)
        second = preintegrate(ts[k:], acc[k:], gyr[k:], bg, ba, QUIET_NOISE)
        joined = compose(first, second)
        assert rot_diff_angle(joined.delta_R, whole.delta_R) < 1e-9
        assert np.abs(joined.delta_v - whole.delta_v).max() < 1e-9
        assert np.abs(joined.delta_p - whole.delta_p).max() < 1e-9


def test_bias_jacobian_first_order():
    truth = GroundTruth(TrajectorySpec(kind="sinusoidal-3d", duration=5.0, static_prefix=0.0, ramp=1.0))
    ts, acc, gyr = _traj_imu(200.0, 1.5, 2.0, truth)
    bg0 = np.array([0.01, 0.0, -0.01])
    ba0 = np.array([0.02, -0.03, 0.01])
    pre = preintegrate(ts, acc, gyr, bg0, ba0, QUIET_NOISE)
    rng = np.random.default_rng(0)
    errs = {}
    for scale in (1e-3, 1e-4):
        worst = 0.0
        for _ in range(5):
            db = rng.normal(size=6)
            db *= scale / np.linalg.norm(db)
            dbg, dba = db[:3], db[3:]
            exact = preintegrate(ts, acc, gyr, bg0 + dbg, ba0 + dba, QUIET_NOISE)
            dR_corr = pre.delta_R @ so3_exp(pre.J_Rg @ dbg)
            dv_corr = pre.delta_v + pre.J_vg @ dbg + pre.J_va @ dba
            dp_corr = pre.delta_p + pre.J_pg @ dbg + pre.J_pa @ dba
            worst = max(
                worst,
                rot_diff_angle(dR_corr, exact.delta_R),
                np.abs(dv_corr - exact.delta_v).max(),
                np.abs(dp_corr - exact.delta_p).max(),
            )
        errs[scale] = worst
    assert errs[1e-3] < 1e-6 + 50.0 * (1e-3) ** 2
    # quadratic remainder: shrinking the perturbation 10x shrinks the error ~100x
    assert errs[1e-4] < errs[1e-3] / 20.0


def test_covariance_trace_monotone():
    truth = GroundTruth(TrajectorySpec(kind="sinusoidal-3d", duration=4.0, static_prefix=0.0, ramp=1.0))
    ts, acc, gyr = _traj_imu(200.0, 1.0, 2.0, truth)
    noise = ImuNoiseModel()
    prev = 0.0
    for k in range(2, len(ts), 10):
        pre = preintegrate(ts[:k], acc[:k], gyr[:k], np.zeros(3), np.zeros(3), noise)
        tr = float(np.trace(pre.covariance))
        assert tr >= prev - 1e-18
        prev = tr


def test_covariance_spd():
    truth = GroundTruth(TrajectorySpec(kind="figure-eight", duration=4.0, static_prefix=0.0, ramp=1.0))
    ts, acc, gyr = _traj_imu(200.0, 0.5, 1.5, truth)
    pre = preintegrate(ts, acc, gyr, np.zeros(3), np.zeros(3), ImuNoiseModel())
    assert np.all(np.linalg.eigvalsh(pre.covariance) > 0)


def test_preintegrate_errors():
    with pytest.raises(ValueError):
        preintegrate(np.array([0.0]), np.zeros((1, 3)), np.zeros((1, 3)), np.zeros(3), np.zeros(3), QUIET_NOISE)
    with pytest.raises(ValueError):
        preintegrate(
            np.array([0.0, 0.1, 0.05]), np.zeros((3, 3)), np.zeros((3, 3)), np.zeros(3), np.zeros(3), QUIET_NOISE
        )


# -- stationary initializer --------------------------------------------------


def test_stationary_init_recovers_gyro_bias():
    bias = np.array([0.01, -0.02, 0.005])
    rig = quiet_rig(true_b_g=bias, imu_noise=ImuNoiseModel())
    data = generate(TrajectorySpec(kind="static", duration=1.0, static_prefix=12.0), rig)
    keep = data.imu_t <= 12.0
    n = int(keep.sum())
    bg, roll, pitch = stationary_init(data.imu_t[keep], data.imu_acc[keep], data.imu_gyr[keep], rig.imu_noise)
    bound = 5 * rig.imu_noise.gyro_noise_density * np.sqrt(rig.imu_rate) / np.sqrt(n)
    assert np.all(np.abs(bg - bias) < bound)
    assert abs(roll) < 0.01 and abs(pitch) < 0.01


def test_stationary_init_tilted():
    pitch_true = np.deg2rad(10.0)
    R_WI = np.array(
        [
            [np.cos(pitch_true), 0, np.sin(pitch_true)],
            [0, 1, 0],
            [-np.sin(pitch_true), 0, np.cos(pitch_true)],
        ]
    )
    ts, acc, gyr = _static_arrays(n=2001, R_IW=R_WI.T)
    rng = np.random.default_rng(1)
    noise = ImuNoiseModel()
    acc = acc + rng.normal(0, noise.accel_noise_density * np.sqrt(200.0), size=acc.shape)
    gyr = gyr + rng.normal(0, noise.gyro_noise_density * np.sqrt(200.0), size=gyr.shape)
    _, roll, pitch = stationary_init(ts, acc, gyr, noise)
    assert abs(pitch - pitch_true) < 0.005
    assert abs(roll) < 0.005


def test_stationary_init_rejects_motion():
    ts, acc, gyr = _static_arrays(n=1001)
    gyr[300:500] += np.array([1.0, 0.0, 0.0])  # motion burst
    with pytest.raises(MotionDetected):
        stationary_init(ts, acc, gyr, ImuNoiseModel())
