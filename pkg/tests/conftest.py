import numpy as np
import pytest

from splinerio.imu_preint import ImuNoiseModel
from splinerio.sim import SensorRigSpec, TrajectorySpec, generate


QUIET_NOISE = ImuNoiseModel(
    gyro_noise_density=1e-6,
    accel_noise_density=1e-6,
    gyro_bias_walk=1e-8,
    accel_bias_walk=1e-7,
)


def quiet_rig(**kw) -> SensorRigSpec:
    """Rig with negligible sensor noise for oracle-grade comparisons."""
    defaults = dict(imu_noise=QUIET_NOISE, doppler_noise=1e-6, seed=7)
    defaults.update(kw)
    return SensorRigSpec(**defaults)


@pytest.fixture(scope="session")
def excited_dataset():
    """Noise-free, well-excited scenario shared by estimator tests."""
    traj = TrajectorySpec(kind="sinusoidal-3d", duration=20.0, static_prefix=12.0)
    rig = quiet_rig()
    return generate(traj, rig)


def rot_diff_angle(Ra, Rb) -> float:
    from splinerio.geometry import so3_log

    return float(np.linalg.norm(so3_log(Ra.T @ Rb)))


def truth_state(data, t_kf):
    """NavState at the keyframe time holding the simulator's true values."""
    from splinerio.factors import NavState

    truth, rig = data.truth, data.rig
    return NavState(
        R_IW=truth.attitude_wi(t_kf).T,
        p_WI=truth.position(t_kf),
        v_W=truth.velocity(t_kf),
        b_g=np.asarray(rig.true_b_g, dtype=float),
        b_a=np.asarray(rig.true_b_a, dtype=float),
        R_IR=np.asarray(rig.true_R_IR, dtype=float),
        p_IR=np.asarray(rig.true_p_IR, dtype=float),
        t_O=rig.true_t_O,
    )


def context_for(data, idx, window_past=0.14, window_future=0.02, **kw):
    """RadarFactorContext for the idx-th ego-velocity record of a dataset."""
    from splinerio.factors import build_context

    m = data.egovel[idx]
    return build_context(
        data.imu_t,
        data.imu_acc,
        data.imu_gyr,
        m.timestamp,
        m,
        window_past=window_past,
        window_future=window_future,
        **kw,
    )


def build_window(data, indices, graph_cfg, window_past=0.14, window_future=0.02, state_of=None, prior_state=None):
    """Factor-graph window over the given ego-velocity record indices.

    ``state_of`` supplies the initial guesses; the prior reference (the gauge
    anchor) defaults to the simulator truth at the first keyframe.
    """
    from splinerio.fgo import FactorGraphWindow
    from splinerio.imu_preint import preintegrate, slice_imu

    state_of = state_of or (lambda t: truth_state(data, t))
    window = FactorGraphWindow(graph_cfg)
    t0 = data.egovel[indices[0]].timestamp
    window.set_initial_prior(prior_state if prior_state is not None else truth_state(data, t0), t0)
    window.keyframes[0].state = state_of(t0)
    prev_t = t0
    for idx in indices[1:]:
        m = data.egovel[idx]
        ctx = context_for(data, idx, window_past=window_past, window_future=window_future)
        raw = slice_imu(data.imu_t, data.imu_acc, data.imu_gyr, prev_t, m.timestamp)
        st_prev = window.keyframes[-1].state
        pre = preintegrate(*raw, st_prev.b_g, st_prev.b_a, graph_cfg.noise)
        window.add_keyframe(m.timestamp, state_of(m.timestamp), pre, ctx, raw_imu=raw)
        prev_t = m.timestamp
    return window
