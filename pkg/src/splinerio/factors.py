"""Residuals and Jacobians for the four factor types binding the graph.

Factors: IMU preintegration (with bias random-walk coupling rows), the
temporally compensated radar ego-velocity factor, the constant-time-offset
factor, the constant-extrinsic factor, and the diagonal prior on the first
keyframe.

State tangent layout (22): [dtheta_IW, dp, dv, db_g, db_a, dtheta_IR,
dp_IR, dt_O]; rotations retract on the left, R' = so3_exp(d) @ R.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular

from . import kernels
from .bspline import SplineFitConfig, UniformCubicSpline, fit as fit_spline
from .geometry import so3_exp, so3_log
from .imu_preint import GRAVITY_W, ImuNoiseModel, PreintegratedImu
from .radar_ego import EgoVelMeasurement

__all__ = [
    "STATE_DIM",
    "ROT", "POS", "VEL", "BG", "BA", "EROT", "ETRANS", "TO",
    "NavState",
    "RadarFactorContext",
    "FactorResidual",
    "retract",
    "local_coords",
    "huber_weight",
    "robust_cost",
    "radar_predict",
    "radar_delta_v",
    "radar_delta_R",
    "radar_residual",
    "ct_residual",
    "ce_residual",
    "imu_residual",
    "bias_walk_residual",
    "imu_factor_stacked",
    "prior_residual",
    "build_context",
]

STATE_DIM = 22
ROT = slice(0, 3)
POS = slice(3, 6)
VEL = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)
EROT = slice(15, 18)
ETRANS = slice(18, 21)
TO = 21

# radar kernel returns 19 tangent columns (no position block)
_RADAR_COLS = np.r_[0:3, 6:9, 9:12, 12:15, 15:18, 18:21, 21]
FD_STEP = 1e-6


@dataclass(frozen=True)
class NavState:
    """Full per-keyframe estimation state.

    R_IW maps world vectors into the IMU frame; p_WI/v_W live in the world
    frame; R_IR/p_IR place the radar in the IMU frame; t_O is the temporal
    offset (an event stamped t by the radar clock occurred at IMU time
    t + t_O).
    """

    R_IW: np.ndarray
    p_WI: np.ndarray
    v_W: np.ndarray
    b_g: np.ndarray
    b_a: np.ndarray
    R_IR: np.ndarray
    p_IR: np.ndarray
    t_O: float

    @staticmethod
    def identity() -> "NavState":
        return NavState(np.eye(3), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), np.eye(3), np.zeros(3), 0.0)

    def with_t_O(self, t_O: float) -> "NavState":
        return replace(self, t_O=float(t_O))


def retract(state: NavState, delta: np.ndarray) -> NavState:
    d = np.asarray(delta, dtype=float)
    return NavState(
        so3_exp(d[ROT]) @ state.R_IW,
        state.p_WI + d[POS],
        state.v_W + d[VEL],
        state.b_g + d[BG],
        state.b_a + d[BA],
        so3_exp(d[EROT]) @ state.R_IR,
        state.p_IR + d[ETRANS],
        state.t_O + d[TO],
    )


def local_coords(state: NavState, ref: NavState) -> np.ndarray:
    """Tangent vector d with state = retract(ref, d) (to first order)."""
    d = np.empty(STATE_DIM)
    d[ROT] = so3_log(state.R_IW @ ref.R_IW.T)
    d[POS] = state.p_WI - ref.p_WI
    d[VEL] = state.v_W - ref.v_W
    d[BG] = state.b_g - ref.b_g
    d[BA] = state.b_a - ref.b_a
    d[EROT] = so3_log(state.R_IR @ ref.R_IR.T)
    d[ETRANS] = state.p_IR - ref.p_IR
    d[TO] = state.t_O - ref.t_O
    return d


@dataclass(frozen=True)
class RadarFactorContext:
    """Spline window and measurement backing one radar factor."""

    accel_spline: UniformCubicSpline
    gyro_spline: UniformCubicSpline
    timestamp: float  # keyframe time on the IMU clock (= radar stamp)
    measurement: EgoVelMeasurement
    sqrt_info: np.ndarray = None  # whitener S with S^T S = covariance^{-1}

    def __post_init__(self):
        if self.sqrt_info is None:
            cov = 0.5 * (self.measurement.covariance + self.measurement.covariance.T)
            vals = np.linalg.eigvalsh(cov)
            if vals.min() <= 0:
                raise ValueError("measurement covariance must be SPD")
            L = cholesky(cov, lower=True)
            S = solve_triangular(L, np.eye(3), lower=True)
            object.__setattr__(self, "sqrt_info", S)

    @property
    def t_O_bounds(self) -> tuple:
        """Offsets keeping the event time inside the spline domains."""
        lo = max(self.accel_spline.t_min, self.gyro_spline.t_min) - self.timestamp
        hi = min(self.accel_spline.t_max, self.gyro_spline.t_max) - self.timestamp
        return lo, hi

    def _kernel_args(self):
        a, g = self.accel_spline, self.gyro_spline
        return (
            a.control_points, g.control_points, a.t_min, a.segment_width, a.n_segments,
        )


def build_context(
    imu_t,
    imu_acc,
    imu_gyr,
    t_center: float,
    measurement: EgoVelMeasurement,
    *,
    window_past: float = 0.14,
    window_future: float = 0.02,
    segment_len: float = 0.02,
    lambda_scale: float = 1e-6,
    extrapolation_pad: float = 0.0,
) -> RadarFactorContext:
    """Fit the per-measurement acceleration/angular-rate splines.

    Selects IMU samples in [t_center - window_past, t_center + window_future]
    and fits both channels with one segment per ``segment_len`` seconds.
    """
    imu_t = np.asarray(imu_t, dtype=float)
    lo = t_center - window_past
    hi = t_center + window_future
    mask = (imu_t >= lo - 1e-12) & (imu_t <= hi + 1e-12)
    ts = imu_t[mask]
    if len(ts) < 8:
        raise ValueError(f"only {len(ts)} IMU samples cover the spline window around t={t_center:.3f}")
    span = ts[-1] - ts[0] + extrapolation_pad
    n_seg = max(4, int(round(span / segment_len)))
    cfg = SplineFitConfig(n_segments=n_seg, lam=lambda_scale * len(ts), extrapolation_pad=extrapolation_pad)
    accel_spline = fit_spline(ts, np.asarray(imu_acc)[mask], cfg)
    gyro_spline = fit_spline(ts, np.asarray(imu_gyr)[mask], cfg)
    return RadarFactorContext(accel_spline, gyro_spline, float(t_center), measurement)


@dataclass(frozen=True)
class FactorResidual:
    residual: np.ndarray  # raw (unwhitened) residual
    jacobians: dict  # slot -> (n, 22) d(residual)/d(tangent)
    information: np.ndarray  # (n, n) SPD
    robust_weight: float = 1.0
    clamp_events: int = 0

    @property
    def whitened_norm(self) -> float:
        return float(np.sqrt(self.residual @ self.information @ self.residual))


def huber_weight(whitened_norm: float, delta: float) -> float:
    """IRLS weight: 1 inside the quadratic zone, delta/norm beyond it."""
    if whitened_norm <= delta:
        return 1.0
    return delta / whitened_norm


def robust_cost(sq_norm: float, delta: float) -> float:
    """Huber cost of a squared whitened norm."""
    n = np.sqrt(sq_norm)
    if n <= delta:
        return sq_norm
    return 2.0 * delta * n - delta * delta


# ---------------------------------------------------------------------------
# Radar ego-velocity factor (temporal compensation via the spline window)
# ---------------------------------------------------------------------------


def _state_kernel_args(state: NavState):
    return (
        np.ascontiguousarray(state.R_IW), np.ascontiguousarray(state.v_W),
        np.ascontiguousarray(state.b_g), np.ascontiguousarray(state.b_a),
        np.ascontiguousarray(state.R_IR), np.ascontiguousarray(state.p_IR),
        float(state.t_O),
    )


def radar_predict(state: NavState, ctx: RadarFactorContext) -> np.ndarray:
    """Predicted radar-frame ego-velocity at the compensated event time."""
    pred, _ = kernels.radar_predict_kernel(
        *_state_kernel_args(state), ctx.timestamp, *ctx._kernel_args(),
        kernels.GL5_NODES, kernels.GL5_WEIGHTS, GRAVITY_W,
    )
    return pred


def radar_delta_v(ctx: RadarFactorContext, state: NavState, t_O: float) -> np.ndarray:
    """Velocity increment over [t, t + t_O] from the spline acceleration."""
    if t_O == 0.0:
        return np.zeros(3)
    total = np.zeros(3)
    t = ctx.timestamp
    for xi, w in zip(kernels.GL5_NODES, kernels.GL5_WEIGHTS):
        s = t + t_O * xi
        w_s = ctx.gyro_spline.eval(s) - state.b_g
        a_s = ctx.accel_spline.eval(s) - state.b_a
        R_s = so3_exp(-w_s * (s - t)) @ state.R_IW
        total += w * (a_s + R_s @ GRAVITY_W)
    return t_O * total


def radar_delta_R(ctx: RadarFactorContext, state: NavState, t_O: float) -> np.ndarray:
    """Rotation increment: exp of the quadrature of the bias-corrected rate."""
    if t_O == 0.0:
        return np.eye(3)
    theta = np.zeros(3)
    t = ctx.timestamp
    for xi, w in zip(kernels.GL5_NODES, kernels.GL5_WEIGHTS):
        theta += w * (ctx.gyro_spline.eval(t + t_O * xi) - state.b_g)
    return so3_exp(t_O * theta)


def radar_residual(state: NavState, ctx: RadarFactorContext, huber_delta: float) -> FactorResidual:
    """Whitened-Huber radar factor; Jacobians by central finite differences."""
    res_w, J_w, clamps = kernels.radar_resjac_kernel(
        *_state_kernel_args(state), ctx.timestamp, *ctx._kernel_args(),
        kernels.GL5_NODES, kernels.GL5_WEIGHTS, GRAVITY_W,
        np.ascontiguousarray(ctx.measurement.velocity), np.ascontiguousarray(ctx.sqrt_info),
        FD_STEP,
    )
    S_inv = np.linalg.inv(ctx.sqrt_info)
    residual = S_inv @ res_w
    J = np.zeros((3, STATE_DIM))
    J[:, _RADAR_COLS] = S_inv @ J_w
    info = ctx.sqrt_info.T @ ctx.sqrt_info
    w = huber_weight(float(np.linalg.norm(res_w)), huber_delta)
    return FactorResidual(residual, {"i": J}, info, robust_weight=w, clamp_events=int(clamps))


# ---------------------------------------------------------------------------
# Calibration consistency factors
# ---------------------------------------------------------------------------


def ct_residual(state_prev: NavState, state_curr: NavState, sigma_ct: float) -> FactorResidual:
    r = np.array([state_curr.t_O - state_prev.t_O])
    Ji = np.zeros((1, STATE_DIM))
    Jj = np.zeros((1, STATE_DIM))
    Ji[0, TO] = -1.0
    Jj[0, TO] = 1.0
    info = np.array([[1.0 / sigma_ct**2]])
    return FactorResidual(r, {"i": Ji, "j": Jj}, info)


def ce_residual(
    state_prev: NavState, state_curr: NavState, sigma_rot: float, sigma_trans: float
) -> FactorResidual:
    r_rot = so3_log(state_prev.R_IR.T @ state_curr.R_IR)
    r = np.concatenate([r_rot, state_curr.p_IR - state_prev.p_IR])
    Ji = np.zeros((6, STATE_DIM))
    Jj = np.zeros((6, STATE_DIM))
    # d/d(dtheta_j): log(Rp^T exp(d) Rc) ~ r + Jl_inv(r) Rp^T d
    Jl_inv = kernels.so3_jl_inv(r_rot)
    Jj[0:3, EROT] = Jl_inv @ state_prev.R_IR.T
    Ji[0:3, EROT] = -Jl_inv @ state_prev.R_IR.T
    Jj[3:6, ETRANS] = np.eye(3)
    Ji[3:6, ETRANS] = -np.eye(3)
    info = np.diag([1.0 / sigma_rot**2] * 3 + [1.0 / sigma_trans**2] * 3)
    return FactorResidual(r, {"i": Ji, "j": Jj}, info)


# ---------------------------------------------------------------------------
# IMU preintegration factor
# ---------------------------------------------------------------------------

BIAS_DEVIATION_LIMIT = 0.1


class BiasDeviationError(RuntimeError):
    """Bias moved too far from the preintegration linearization point."""


def _imu_walk_info(preint: PreintegratedImu, noise: ImuNoiseModel) -> np.ndarray:
    dt = max(preint.dt_total, 1e-9)
    sg = noise.gyro_bias_walk**2 * dt
    sa = noise.accel_bias_walk**2 * dt
    return np.diag([1.0 / sg] * 3 + [1.0 / sa] * 3)


def _imu_stacked_kernel(state_i, state_j, preint, sqrt_info):
    return kernels.imu_resjac_kernel(
        np.ascontiguousarray(state_i.R_IW), np.ascontiguousarray(state_i.p_WI),
        np.ascontiguousarray(state_i.v_W), np.ascontiguousarray(state_i.b_g),
        np.ascontiguousarray(state_i.b_a),
        np.ascontiguousarray(state_j.R_IW), np.ascontiguousarray(state_j.p_WI),
        np.ascontiguousarray(state_j.v_W), np.ascontiguousarray(state_j.b_g),
        np.ascontiguousarray(state_j.b_a),
        preint.delta_R, preint.delta_v, preint.delta_p, preint.dt_total,
        preint.J_Rg, preint.J_vg, preint.J_va, preint.J_pg, preint.J_pa,
        preint.bias_gyro_lin, preint.bias_accel_lin, GRAVITY_W,
        np.ascontiguousarray(sqrt_info),
    )


def _expand_cols(J15: np.ndarray) -> np.ndarray:
    """Map kernel columns [rot, pos, vel, bg, ba] onto the 22-dim tangent."""
    out = np.zeros((J15.shape[0], STATE_DIM))
    out[:, 0:15] = J15
    return out


def check_bias_deviation(state_i: NavState, preint: PreintegratedImu) -> float:
    dev = max(
        float(np.abs(state_i.b_g - preint.bias_gyro_lin).max()),
        float(np.abs(state_i.b_a - preint.bias_accel_lin).max()),
    )
    return dev


def imu_residual(state_i: NavState, state_j: NavState, preint: PreintegratedImu) -> FactorResidual:
    """9-row preintegration residual (rotation/velocity/position) with analytic Jacobians."""
    if check_bias_deviation(state_i, preint) > BIAS_DEVIATION_LIMIT:
        raise BiasDeviationError("re-preintegration required: bias left the linearization region")
    res, Ji, Jj = _imu_stacked_kernel(state_i, state_j, preint, np.eye(15))
    info = np.linalg.inv(0.5 * (preint.covariance + preint.covariance.T))
    return FactorResidual(res[:9], {"i": _expand_cols(Ji[:9]), "j": _expand_cols(Jj[:9])}, info)


def bias_walk_residual(state_i: NavState, state_j: NavState, preint: PreintegratedImu, noise: ImuNoiseModel) -> FactorResidual:
    res = np.concatenate([state_j.b_g - state_i.b_g, state_j.b_a - state_i.b_a])
    Ji = np.zeros((6, STATE_DIM))
    Jj = np.zeros((6, STATE_DIM))
    Ji[:, 9:15] = -np.eye(6)
    Jj[:, 9:15] = np.eye(6)
    return FactorResidual(res, {"i": Ji, "j": Jj}, _imu_walk_info(preint, noise))


def imu_factor_stacked(state_i: NavState, state_j: NavState, preint: PreintegratedImu, sqrt_info15: np.ndarray):
    """Fast path for the solver: whitened 15-row residual + Jacobians in one call."""
    res, Ji, Jj = _imu_stacked_kernel(state_i, state_j, preint, sqrt_info15)
    return res, Ji, Jj


def imu_sqrt_info(preint: PreintegratedImu, noise: ImuNoiseModel) -> np.ndarray:
    """Whitener for the stacked (preintegration + bias-walk) residual."""
    S = np.zeros((15, 15))
    cov = 0.5 * (preint.covariance + preint.covariance.T)
    L = cholesky(cov, lower=True)
    S[:9, :9] = solve_triangular(L, np.eye(9), lower=True)
    walk = _imu_walk_info(preint, noise)
    S[9:, 9:] = np.sqrt(walk)
    return S


# ---------------------------------------------------------------------------
# Prior factor on the first keyframe
# ---------------------------------------------------------------------------


def prior_residual(state: NavState, ref: NavState, sqrt_info_diag: np.ndarray) -> FactorResidual:
    """Diagonal Gaussian prior; residual is the tangent offset from the reference."""
    r = local_coords(state, ref)
    J = np.eye(STATE_DIM)
    J[ROT, ROT] = kernels.so3_jl_inv(r[ROT])
    J[EROT, EROT] = kernels.so3_jl_inv(r[EROT])
    info = np.diag(np.asarray(sqrt_info_diag, dtype=float) ** 2)
    return FactorResidual(r, {"i": J}, info)
