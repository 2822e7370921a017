import numpy as np
import pytest
from conftest import QUIET_NOISE, context_for, quiet_rig, rot_diff_angle, truth_state

from splinerio import factors
from splinerio.bspline import UniformCubicSpline
from splinerio.factors import (
    BiasDeviationError,
    NavState,
    RadarFactorContext,
    bias_walk_residual,
    ce_residual,
    ct_residual,
    huber_weight,
    imu_residual,
    local_coords,
    prior_residual,
    radar_delta_R,
    radar_delta_v,
    radar_predict,
    radar_residual,
    retract,
)
from splinerio.geometry import so3_exp
from splinerio.imu_preint import GRAVITY_W, preintegrate
from splinerio.radar_ego import EgoVelMeasurement
from splinerio.sim import TrajectorySpec, analytic_radar_velocity, generate


def _constant_splines(accel, gyro, t0=0.0, t1=0.4, n_seg=8):
    mk = lambda v: UniformCubicSpline(t0, t1, n_seg, np.tile(np.asarray(v, dtype=float), (n_seg + 3, 1)))
    return mk(accel), mk(gyro)


def _ctx(accel, gyro, t_kf=0.2, vel=(0.0, 0.0, 0.0), cov=None):
    a, g = _constant_splines(accel, gyro)
    cov = np.eye(3) * 1e-4 if cov is None else cov
    meas = EgoVelMeasurement(t_kf, np.asarray(vel, dtype=float), cov)
    return RadarFactorContext(a, g, t_kf, meas)


# -- radar_predict -----------------------------------------------------------


def test_predict_degenerate_reduces_to_rotated_velocity():
    ctx = _ctx(accel=[0.1, 0.2, 9.9], gyro=[0.0, 0.0, 0.0])
    st = NavState.identity()
    st = factors.retract(st, np.concatenate([np.array([0.3, -0.2, 0.5]), np.zeros(19)]))
    st = factors.NavState(st.R_IW, st.p_WI, np.array([1.0, -0.5, 0.2]), st.b_g, st.b_a, st.R_IR, st.p_IR, 0.0)
    assert np.allclose(radar_predict(st, ctx), st.R_IW @ st.v_W, atol=1e-12)


def test_predict_lever_arm_only():
    omega = 0.8
    R_IR = so3_exp(np.array([0.2, 0.1, -0.3]))
    ctx = _ctx(accel=[0.0, 0.0, 9.80665], gyro=[0.0, 0.0, omega])
    st = NavState(np.eye(3), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), R_IR, np.array([1.0, 0.0, 0.0]), 0.0)
    expected = R_IR.T @ (omega * np.array([0.0, 1.0, 0.0]))
    assert np.allclose(radar_predict(st, ctx), expected, atol=1e-12)


@pytest.fixture(scope="module")
def offset_dataset():
    rig = quiet_rig(
        true_t_O=0.1,
        true_R_IR=so3_exp(np.deg2rad(10.0) * np.array([0.5, -0.6, 0.624695])),
        true_p_IR=np.array([0.10, -0.05, 0.02]),
        true_b_g=np.array([0.004, -0.002, 0.003]),
        true_b_a=np.array([0.03, -0.02, 0.04]),
    )
    return generate(TrajectorySpec(kind="sinusoidal-3d", duration=10.0, static_prefix=12.0), rig)


def test_predict_matches_simulator_with_offset(offset_dataset):
    data = offset_dataset
    for idx in range(150, 190, 7):
        m = data.egovel[idx]
        ctx = context_for(data, idx, window_past=0.04, window_future=0.13)
        st = truth_state(data, m.timestamp)
        pred = radar_predict(st, ctx)
        truth_v = analytic_radar_velocity(data.truth, data.rig, m.timestamp + data.rig.true_t_O)
        assert np.abs(pred - truth_v).max() < 0.01


# -- radar_delta_v / radar_delta_R -------------------------------------------


def test_delta_v_zero_offset():
    ctx = _ctx(accel=[1.0, 2.0, 3.0], gyro=[0.1, 0.0, 0.0])
    assert np.array_equal(radar_delta_v(ctx, NavState.identity(), 0.0), np.zeros(3))


def test_delta_v_static_cancellation():
    bg = np.array([0.01, -0.02, 0.005])
    ba = np.array([0.05, 0.02, -0.04])
    R_IW = so3_exp(np.array([0.1, 0.2, -0.3])).T
    ctx = _ctx(accel=-R_IW @ GRAVITY_W + ba, gyro=bg)
    st = NavState(R_IW, np.zeros(3), np.zeros(3), bg, ba, np.eye(3), np.zeros(3), 0.0)
    assert np.abs(radar_delta_v(ctx, st, 0.12)).max() < 1e-10


def test_delta_v_constant_acceleration_analytic():
    a0 = np.array([1.0, -0.5, 0.25])
    # gravity pre-compensated in the synthetic signal so the increment is pure a0
    ctx = _ctx(accel=a0 + (-GRAVITY_W), gyro=[0.0, 0.0, 0.0])
    st = NavState.identity()
    for t_O in (0.05, 0.1, -0.15):
        assert np.abs(radar_delta_v(ctx, st, t_O) - a0 * t_O).max() < 1e-8


def test_delta_R_zero_offset_is_identity():
    ctx = _ctx(accel=[0.0, 0.0, 9.8], gyro=[0.3, 0.2, 0.1])
    assert np.array_equal(radar_delta_R(ctx, NavState.identity(), 0.0), np.eye(3))


def test_delta_R_constant_rate_exact():
    w0 = np.array([0.2, -0.4, 0.6])
    ctx = _ctx(accel=[0.0, 0.0, 9.8], gyro=w0)
    for t_O in (0.08, -0.1):
        assert rot_diff_angle(radar_delta_R(ctx, NavState.identity(), t_O), so3_exp(w0 * t_O)) < 1e-14


def test_delta_R_matches_fine_step_integration(offset_dataset):
    """Product-of-exponentials oracle: Dt = prod exp(-w dt) forward in time,
    compared against the transposed quadrature increment."""
    data = offset_dataset
    idx = 170
    ctx = context_for(data, idx, window_past=0.04, window_future=0.13)
    st = truth_state(data, data.egovel[idx].timestamp)
    t, t_O = ctx.timestamp, 0.12
    D = radar_delta_R(ctx, st, t_O)
    steps = 4000
    dt = t_O / steps
    P = np.eye(3)
    for k in range(steps):
        s = t + (k + 0.5) * dt
        w = data.truth.angular_velocity_body(s)
        P = so3_exp(-w * dt) @ P
    assert rot_diff_angle(D.T, P) < 1e-4


# -- radar_residual ----------------------------------------------------------


def test_radar_residual_at_truth_state(offset_dataset):
    data = offset_dataset
    idx = 160
    ctx = context_for(data, idx, window_past=0.04, window_future=0.13)
    st = truth_state(data, data.egovel[idx].timestamp)
    fr = radar_residual(st, ctx, huber_delta=1.345)
    assert np.abs(fr.residual).max() < 0.01
    assert fr.clamp_events == 0


def test_radar_residual_offset_sensitivity():
    """d(residual)/d(t_O) ~ specific-force level at the event time."""
    a0 = np.array([1.0, 0.0, 0.0])
    ctx = _ctx(accel=a0 + (-GRAVITY_W), gyro=[0.0, 0.0, 0.0], vel=(0.0, 0.0, 0.0))
    st = NavState.identity()
    r0 = radar_residual(st, ctx, 1e9).residual
    r1 = radar_residual(st.with_t_O(0.01), ctx, 1e9).residual
    change = r1 - r0
    assert abs(change[0] - (-0.01)) < 1e-4  # residual = z - h, h grows by a0 * dt
    assert np.abs(change[1:]).max() < 1e-6


def test_radar_residual_covariance_whitening():
    cov = np.diag([1e-4, 1e-4, 1e-4])
    ctx = _ctx(accel=[0.0, 0.0, 9.80665], gyro=[0.0, 0.0, 0.0], vel=(0.3, 0.4, -0.2), cov=cov)
    st = NavState.identity()
    fr = radar_residual(st, ctx, 1e9)
    w0 = ctx.sqrt_info @ fr.residual
    cov2 = cov.copy()
    cov2[0, 0] *= 100.0
    ctx2 = _ctx(accel=[0.0, 0.0, 9.80665], gyro=[0.0, 0.0, 0.0], vel=(0.3, 0.4, -0.2), cov=cov2)
    w1 = ctx2.sqrt_info @ radar_residual(st, ctx2, 1e9).residual
    assert abs(w1[0] - w0[0] / 10.0) < 1e-12
    assert np.allclose(w1[1:], w0[1:], atol=1e-12)


def test_radar_residual_whitening_scale_invariant():
    base_cov = np.diag([2e-4, 1e-4, 3e-4])
    for s in (2.0, 5.0):
        ctx_a = _ctx(accel=[0, 0, 9.80665], gyro=[0, 0, 0], vel=(1.0, -1.0, 0.5), cov=base_cov)
        ctx_b = _ctx(accel=[0, 0, 9.80665], gyro=[0, 0, 0], vel=(1.0, -1.0, 0.5), cov=s * s * base_cov)
        st = NavState.identity()
        wa = ctx_a.sqrt_info @ radar_residual(st, ctx_a, 1e9).residual
        wb = ctx_b.sqrt_info @ radar_residual(st, ctx_b, 1e9).residual
        assert np.abs(wb - wa / s).max() < 1e-12


def test_radar_jacobian_matches_python_fd_and_richardson(offset_dataset):
    data = offset_dataset
    idx = 175
    ctx = context_for(data, idx, window_past=0.04, window_future=0.13)
    st = truth_state(data, data.egovel[idx].timestamp)
    fr = radar_residual(st, ctx, 1e9)
    cols = factors._RADAR_COLS

    def fd_jacobian(step):
        J = np.zeros((3, len(cols)))
        for k, col in enumerate(cols):
            d = np.zeros(22)
            d[col] = step
            hp = radar_predict(retract(st, d), ctx)
            d[col] = -step
            hm = radar_predict(retract(st, d), ctx)
            J[:, k] = -(hp - hm) / (2 * step)
        return J

    J6 = fd_jacobian(1e-6)
    assert np.abs(fr.jacobians["i"][:, cols] - J6).max() < 1e-9
    J5 = fd_jacobian(1e-5)
    scale = np.abs(J6).max()
    rel = np.abs(J5 - J6) / (np.abs(J6) + 1e-3 * scale)
    assert rel.max() < 0.01  # Richardson consistency between steps


def test_eq7_reduction_no_quadrature_at_zero_offset():
    ctx = _ctx(accel=[0.3, -0.2, 9.9], gyro=[0.05, -0.1, 0.2], vel=(1.0, 0.0, 0.0))
    st = NavState(
        so3_exp(np.array([0.1, -0.2, 0.15])),
        np.zeros(3),
        np.array([0.7, -0.3, 0.2]),
        np.array([0.001, 0.002, -0.001]),
        np.array([0.01, -0.02, 0.03]),
        so3_exp(np.array([0.05, 0.0, -0.04])),
        np.array([0.2, -0.1, 0.05]),
        0.0,
    )
    assert np.array_equal(radar_delta_v(ctx, st, 0.0), np.zeros(3))
    assert np.array_equal(radar_delta_R(ctx, st, 0.0), np.eye(3))
    w_ev = ctx.gyro_spline.eval(ctx.timestamp) - st.b_g
    direct = st.R_IR.T @ (st.R_IW @ st.v_W + np.cross(w_ev, st.p_IR))
    assert np.allclose(radar_predict(st, ctx), direct, atol=1e-14)


def test_huber_weight_profile():
    assert huber_weight(0.5, 1.345) == 1.0
    assert huber_weight(1.345, 1.345) == 1.0
    assert abs(huber_weight(13.45, 1.345) - 0.1) < 1e-15


# -- CT / CE factors ----------------------------------------------------------


def test_ct_residual_cases():
    a = NavState.identity().with_t_O(0.01)
    b = NavState.identity().with_t_O(0.01)
    fr = ct_residual(a, b, sigma_ct=1e-3)
    assert fr.residual[0] == 0.0
    b = NavState.identity().with_t_O(0.011)
    fr = ct_residual(a, b, sigma_ct=1e-3)
    assert abs(fr.whitened_norm - 1.0) < 1e-12
    assert fr.jacobians["i"][0, factors.TO] == -1.0
    assert fr.jacobians["j"][0, factors.TO] == 1.0


def test_ce_residual_cases():
    a = NavState.identity()
    b = NavState.identity()
    fr = ce_residual(a, b, sigma_rot=1e-3, sigma_trans=1e-3)
    assert np.allclose(fr.residual, 0.0)
    # 1 degree rotation delta
    Rb = so3_exp(np.deg2rad(1.0) * np.array([0.0, 0.0, 1.0]))
    b = NavState(a.R_IW, a.p_WI, a.v_W, a.b_g, a.b_a, Rb, a.p_IR, 0.0)
    fr = ce_residual(a, b, sigma_rot=np.deg2rad(1.0), sigma_trans=1e-3)
    assert abs(fr.whitened_norm - 1.0) < 1e-9
    # translation-only delta leaves the rotation block at zero
    b = NavState(a.R_IW, a.p_WI, a.v_W, a.b_g, a.b_a, a.R_IR, np.array([0.0, 0.002, 0.0]), 0.0)
    fr = ce_residual(a, b, sigma_rot=1e-3, sigma_trans=1e-3)
    assert np.allclose(fr.residual[:3], 0.0)
    assert abs(fr.residual[4] - 0.002) < 1e-15


# -- IMU factor ---------------------------------------------------------------


def _keyframe_pair_from_sim(data, t_i, t_j, bias_g=None, bias_a=None):
    rig = data.rig
    bg = rig.true_b_g if bias_g is None else bias_g
    ba = rig.true_b_a if bias_a is None else bias_a
    mask = (data.imu_t >= t_i - 1e-9) & (data.imu_t <= t_j + 1e-9)
    pre = preintegrate(data.imu_t[mask], data.imu_acc[mask], data.imu_gyr[mask], bg, ba, QUIET_NOISE)
    ts = data.imu_t[mask]
    return truth_state(data, ts[0]), truth_state(data, ts[-1]), pre


@pytest.fixture(scope="module")
def excited_quiet():
    # 2 kHz keeps the midpoint-integration error well under the 1e-6 oracle bound
    rig = quiet_rig(
        true_b_g=np.array([0.005, -0.003, 0.002]),
        true_b_a=np.array([0.04, 0.02, -0.03]),
        imu_rate=2000.0,
    )
    return generate(TrajectorySpec(kind="sinusoidal-3d", duration=8.0, static_prefix=2.0), rig)


def test_imu_residual_at_truth(excited_quiet):
    st_i, st_j, pre = _keyframe_pair_from_sim(excited_quiet, 4.0, 4.5)
    fr = imu_residual(st_i, st_j, pre)
    assert np.abs(fr.residual).max() < 1e-5


def test_imu_residual_identity_motion():
    ts = np.arange(101) / 200.0
    acc = np.tile(-GRAVITY_W, (101, 1))
    gyr = np.zeros((101, 3))
    pre = preintegrate(ts, acc, gyr, np.zeros(3), np.zeros(3), QUIET_NOISE)
    st = NavState.identity()
    fr = imu_residual(st, st, pre)
    assert np.abs(fr.residual).max() < 1e-12


def test_imu_jacobians_match_finite_differences(excited_quiet):
    st_i, st_j, pre = _keyframe_pair_from_sim(excited_quiet, 3.0, 3.4)
    # evaluate away from the exact solution so the Jacobians are generic
    st_i = retract(st_i, 0.01 * np.sin(np.arange(22)))
    st_j = retract(st_j, 0.01 * np.cos(np.arange(22)))
    fr = imu_residual(st_i, st_j, pre)
    step = 1e-6
    scale = max(1.0, np.abs(fr.residual).max())
    for slot, st in (("i", st_i), ("j", st_j)):
        J = fr.jacobians[slot][:, :15]
        fd = np.zeros_like(J)
        for c in range(15):
            d = np.zeros(22)
            d[c] = step
            rp = imu_residual(retract(st_i, d) if slot == "i" else st_i,
                              retract(st_j, d) if slot == "j" else st_j, pre).residual
            d[c] = -step
            rm = imu_residual(retract(st_i, d) if slot == "i" else st_i,
                              retract(st_j, d) if slot == "j" else st_j, pre).residual
            fd[:, c] = (rp - rm) / (2 * step)
        rel = np.abs(J - fd) / (np.abs(fd) + 1e-6 * scale + 1e-12)
        assert rel.max() < 1e-5


def test_imu_bias_deviation_gate(excited_quiet):
    st_i, st_j, pre = _keyframe_pair_from_sim(excited_quiet, 5.0, 5.3)
    bad = NavState(st_i.R_IW, st_i.p_WI, st_i.v_W, st_i.b_g + 0.2, st_i.b_a, st_i.R_IR, st_i.p_IR, st_i.t_O)
    with pytest.raises(BiasDeviationError):
        imu_residual(bad, st_j, pre)


def test_bias_walk_residual(excited_quiet):
    st_i, st_j, pre = _keyframe_pair_from_sim(excited_quiet, 5.0, 5.3)
    st_j2 = NavState(st_j.R_IW, st_j.p_WI, st_j.v_W, st_j.b_g + 1e-4, st_j.b_a - 2e-4, st_j.R_IR, st_j.p_IR, st_j.t_O)
    fr = bias_walk_residual(st_i, st_j2, pre, QUIET_NOISE)
    assert np.allclose(fr.residual[:3], st_j2.b_g - st_i.b_g, atol=1e-15)
    assert np.allclose(fr.residual[3:], st_j2.b_a - st_i.b_a, atol=1e-15)


# -- prior and retraction -----------------------------------------------------


def test_retract_local_roundtrip():
    rng = np.random.default_rng(0)
    st = NavState.identity()
    d = rng.normal(size=22) * 0.1
    st2 = retract(st, d)
    back = local_coords(st2, st)
    assert np.abs(back - d).max() < 1e-6  # exact for all blocks but rotations (2nd order)


def test_prior_residual_zero_at_reference():
    ref = NavState.identity().with_t_O(0.02)
    fr = prior_residual(ref, ref, np.ones(22))
    assert np.allclose(fr.residual, 0.0)
    d = np.zeros(22)
    d[factors.TO] = 0.005
    fr = prior_residual(retract(ref, d), ref, np.full(22, 10.0))
    assert abs(fr.residual[factors.TO] - 0.005) < 1e-15
    assert abs(fr.whitened_norm - 0.05) < 1e-12
