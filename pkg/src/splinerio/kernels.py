"""Hot numeric kernels.

Everything here is written in the numpy subset numba supports and compiled
with ``@jit`` (see :mod:`splinerio.accel`). With ``SPLINERIO_NUMBA=0`` the
same functions run as plain Python/numpy; ``benchmarks/bench_kernels.py``
compares the two paths.

Conventions used throughout:
  - ``R_IW`` maps world-frame vectors into the IMU frame, ``v_I = R_IW @ v_W``.
  - Body angular rate ``w`` advances the attitude as
    ``R_IW(t + dt) = so3_exp(-w * dt) @ R_IW(t)``.
  - Accelerometer model ``a_meas = R_IW @ (a_W - g_W) + b_a`` with
    ``g_W = (0, 0, -9.80665)``.
"""

import math

import numpy as np

from .accel import jit

# ---------------------------------------------------------------------------
# SO(3) primitives
# ---------------------------------------------------------------------------

SMALL_ANGLE = 1e-8


@jit
def skew(v):
    S = np.zeros((3, 3))
    S[0, 1] = -v[2]
    S[0, 2] = v[1]
    S[1, 0] = v[2]
    S[1, 2] = -v[0]
    S[2, 0] = -v[1]
    S[2, 1] = v[0]
    return S


@jit
def cross3(a, b):
    c = np.empty(3)
    c[0] = a[1] * b[2] - a[2] * b[1]
    c[1] = a[2] * b[0] - a[0] * b[2]
    c[2] = a[0] * b[1] - a[1] * b[0]
    return c


@jit
def so3_exp(phi):
    """Rodrigues formula with a second-order Taylor branch near zero."""
    angle = math.sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    K = skew(phi)
    R = np.eye(3)
    if angle < SMALL_ANGLE:
        return R + K + 0.5 * (K @ K)
    s = math.sin(angle) / angle
    c = (1.0 - math.cos(angle)) / (angle * angle)
    return R + s * K + c * (K @ K)


@jit
def so3_log(R):
    """Inverse of so3_exp; returned angle lies in [0, pi]."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    v = np.empty(3)
    v[0] = R[2, 1] - R[1, 2]
    v[1] = R[0, 2] - R[2, 0]
    v[2] = R[1, 0] - R[0, 1]
    # ||v|| = 2 sin(angle); atan2 keeps precision where acos would not
    s = 0.5 * math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    c = 0.5 * (tr - 1.0)
    angle = math.atan2(s, c)
    if angle < 1e-7:
        # log(R) ~ 0.5 * (R - R^T)^vee with a curvature correction
        return 0.5 * (1.0 + angle * angle / 6.0) * v
    if angle > math.pi - 1e-6:
        # near-pi branch: axis from the dominant diagonal of (R + I) / 2
        A = 0.5 * (R + np.eye(3))
        k = 0
        if A[1, 1] > A[k, k]:
            k = 1
        if A[2, 2] > A[k, k]:
            k = 2
        axis = np.empty(3)
        axis[0] = A[k, 0]
        axis[1] = A[k, 1]
        axis[2] = A[k, 2]
        axis[k] = A[k, k]
        n = math.sqrt(abs(A[k, k]))
        if n < 1e-12:
            return np.zeros(3)
        axis = axis / n
        nrm = math.sqrt(axis[0] ** 2 + axis[1] ** 2 + axis[2] ** 2)
        axis = axis / nrm
        # fix the sign so that so3_exp(angle*axis) reproduces the off-diagonals
        if angle < math.pi - 1e-12:
            sgn = v[0] * axis[0] + v[1] * axis[1] + v[2] * axis[2]
            if sgn < 0.0:
                axis = -axis
        return angle * axis
    return (0.5 * angle / s) * v


@jit
def so3_jr(phi):
    """Right Jacobian of SO(3): Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)."""
    angle = math.sqrt(phi[0] ** 2 + phi[1] ** 2 + phi[2] ** 2)
    K = skew(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    a2 = angle * angle
    c1 = (1.0 - math.cos(angle)) / a2
    c2 = (angle - math.sin(angle)) / (a2 * angle)
    return np.eye(3) - c1 * K + c2 * (K @ K)


@jit
def so3_jr_inv(phi):
    """Inverse right Jacobian of SO(3)."""
    angle = math.sqrt(phi[0] ** 2 + phi[1] ** 2 + phi[2] ** 2)
    K = skew(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    a2 = angle * angle
    c = 1.0 / a2 - (1.0 + math.cos(angle)) / (2.0 * angle * math.sin(angle))
    return np.eye(3) + 0.5 * K + c * (K @ K)


@jit
def so3_jl_inv(phi):
    """Inverse left Jacobian: Jl_inv(phi) = Jr_inv(-phi)."""
    return so3_jr_inv(-phi)


# ---------------------------------------------------------------------------
# Uniform cubic B-spline evaluation
# ---------------------------------------------------------------------------


@jit
def bspline_eval3(ctrl, t_min, h, n_seg, t, order):
    """Evaluate a 3-channel uniform cubic B-spline (or derivative).

    ``ctrl`` is (n_seg + 3, 3). ``order`` in {0, 1, 2}. Times outside the
    knot span clamp to the nearest boundary (callers flag that separately).
    """
    x = (t - t_min) / h
    i = int(math.floor(x))
    if i < 0:
        i = 0
    if i > n_seg - 1:
        i = n_seg - 1
    u = x - i
    if u < 0.0:
        u = 0.0
    if u > 1.0:
        u = 1.0
    out = np.empty(3)
    for c in range(3):
        c0 = ctrl[i, c]
        c1 = ctrl[i + 1, c]
        c2 = ctrl[i + 2, c]
        c3 = ctrl[i + 3, c]
        a0 = (c0 + 4.0 * c1 + c2) / 6.0
        a1 = (c2 - c0) / 2.0
        a2 = (c0 - 2.0 * c1 + c2) / 2.0
        a3 = (-c0 + 3.0 * c1 - 3.0 * c2 + c3) / 6.0
        if order == 0:
            out[c] = a0 + u * (a1 + u * (a2 + u * a3))
        elif order == 1:
            out[c] = (a1 + u * (2.0 * a2 + u * 3.0 * a3)) / h
        else:
            out[c] = (2.0 * a2 + 6.0 * a3 * u) / (h * h)
    return out


# 5-point Gauss-Legendre nodes/weights mapped to [0, 1]; exact through degree 9.
def _gl5_01():
    r = math.sqrt(10.0 / 7.0)
    x_in = math.sqrt(5.0 - 2.0 * r) / 3.0
    x_out = math.sqrt(5.0 + 2.0 * r) / 3.0
    w_in = (322.0 + 13.0 * math.sqrt(70.0)) / 900.0
    w_out = (322.0 - 13.0 * math.sqrt(70.0)) / 900.0
    nodes = np.array([-x_out, -x_in, 0.0, x_in, x_out])
    weights = np.array([w_out, w_in, 128.0 / 225.0, w_in, w_out])
    return (nodes + 1.0) / 2.0, weights / 2.0


GL5_NODES, GL5_WEIGHTS = _gl5_01()


# ---------------------------------------------------------------------------
# Radar ego-velocity factor: prediction and finite-difference Jacobian
# ---------------------------------------------------------------------------


@jit
def radar_predict_kernel(
    R_IW, v_W, b_g, b_a, R_IR, p_IR, t_O,
    t_kf, ctrl_a, ctrl_g, t0, h, n_seg,
    xi, wq, g_W,
):
    """Predicted radar-frame ego-velocity with temporal compensation.

    Integrates the spline acceleration/angular-rate over [t_kf, t_kf + t_O]
    with 5-point Gauss-Legendre quadrature. Returns (prediction, n_clamped)
    where n_clamped counts quadrature/evaluation times outside the spline
    knot span.
    """
    t_hi = t0 + n_seg * h
    clamps = 0
    theta = np.zeros(3)
    dv = np.zeros(3)
    if t_O != 0.0:
        for i in range(5):
            s = t_kf + t_O * xi[i]
            if s < t0 - 1e-12 or s > t_hi + 1e-12:
                clamps += 1
            w_s = bspline_eval3(ctrl_g, t0, h, n_seg, s, 0) - b_g
            a_s = bspline_eval3(ctrl_a, t0, h, n_seg, s, 0) - b_a
            theta = theta + wq[i] * w_s
            # rotate gravity into the body frame at s:
            # R_IW(s) = so3_exp(-w_s * (s - t_kf)) @ R_IW
            Rs = so3_exp(-w_s * (s - t_kf)) @ R_IW
            dv = dv + wq[i] * (a_s + Rs @ g_W)
        theta = theta * t_O
        dv = dv * t_O
    t_ev = t_kf + t_O
    if t_ev < t0 - 1e-12 or t_ev > t_hi + 1e-12:
        clamps += 1
    w_ev = bspline_eval3(ctrl_g, t0, h, n_seg, t_ev, 0) - b_g
    # attitude at the event time: R_IW(t+t_O) = so3_exp(theta)^T @ R_IW
    v_body = so3_exp(theta).T @ (R_IW @ v_W) + dv + cross3(w_ev, p_IR)
    return R_IR.T @ v_body, clamps


@jit
def radar_resjac_kernel(
    R_IW, v_W, b_g, b_a, R_IR, p_IR, t_O,
    t_kf, ctrl_a, ctrl_g, t0, h, n_seg,
    xi, wq, g_W, z, sqrt_info, step,
):
    """Whitened radar residual and central-difference Jacobian.

    Residual r = sqrt_info @ (z - h(x)). Jacobian columns (19) are tangent
    perturbations in the order [dtheta_IW, dv_W, db_g, db_a, dtheta_IR,
    dp_IR, dt_O]; the keyframe position does not enter the model.
    """
    h0, clamps = radar_predict_kernel(
        R_IW, v_W, b_g, b_a, R_IR, p_IR, t_O,
        t_kf, ctrl_a, ctrl_g, t0, h, n_seg, xi, wq, g_W,
    )
    res = sqrt_info @ (z - h0)
    J = np.zeros((3, 19))
    for k in range(19):
        dplus = np.zeros(3)
        dminus = np.zeros(3)
        for sgn in range(2):
            eps = step if sgn == 0 else -step
            Ra = R_IW
            vv = v_W
            bg = b_g
            ba = b_a
            Re = R_IR
            pe = p_IR
            to = t_O
            if k < 3:
                d = np.zeros(3)
                d[k] = eps
                Ra = so3_exp(d) @ R_IW
            elif k < 6:
                vv = v_W.copy()
                vv[k - 3] += eps
            elif k < 9:
                bg = b_g.copy()
                bg[k - 6] += eps
            elif k < 12:
                ba = b_a.copy()
                ba[k - 9] += eps
            elif k < 15:
                d = np.zeros(3)
                d[k - 12] = eps
                Re = so3_exp(d) @ R_IR
            elif k < 18:
                pe = p_IR.copy()
                pe[k - 15] += eps
            else:
                to = t_O + eps
            hp, _ = radar_predict_kernel(
                Ra, vv, bg, ba, Re, pe, to,
                t_kf, ctrl_a, ctrl_g, t0, h, n_seg, xi, wq, g_W,
            )
            if sgn == 0:
                dplus = hp
            else:
                dminus = hp
        dh = (dplus - dminus) / (2.0 * step)
        Jcol = sqrt_info @ dh
        for r in range(3):
            J[r, k] = -Jcol[r]
    return res, J, clamps


# ---------------------------------------------------------------------------
# IMU preintegration (midpoint scheme)
# ---------------------------------------------------------------------------


@jit
def preintegrate_kernel(ts, acc, gyr, b_g, b_a, sig_g, sig_a):
    """Midpoint preintegration of an IMU sample run.

    Returns (dR, dv, dp, P, J_Rg, J_vg, J_va, J_pg, J_pa, dt_total) where P
    is the 9x9 covariance of (dtheta, dv, dp) driven by the white-noise
    densities sig_g, sig_a.
    """
    n = ts.shape[0]
    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    P = np.zeros((9, 9))
    J_Rg = np.zeros((3, 3))
    J_vg = np.zeros((3, 3))
    J_va = np.zeros((3, 3))
    J_pg = np.zeros((3, 3))
    J_pa = np.zeros((3, 3))
    for k in range(n - 1):
        dt = ts[k + 1] - ts[k]
        w_m = 0.5 * (gyr[k] + gyr[k + 1]) - b_g
        a_m = 0.5 * (acc[k] + acc[k + 1]) - b_a
        m = w_m * dt
        E = so3_exp(m)
        E_h = so3_exp(0.5 * m)
        R_half = dR @ E_h
        Ra = R_half @ a_m  # rotated specific force for this step
        # covariance propagation
        A = np.eye(9)
        A[0:3, 0:3] = E.T
        S = skew(Ra)
        for r in range(3):
            for c in range(3):
                A[3 + r, c] = -S[r, c] * dt
                A[6 + r, c] = -0.5 * S[r, c] * dt * dt
        A[6, 3] = dt
        A[7, 4] = dt
        A[8, 5] = dt
        P = A @ P @ A.T
        Jr_m = so3_jr(m)
        Ng = (sig_g * sig_g * dt) * (Jr_m @ Jr_m.T)
        qa = sig_a * sig_a * dt
        for r in range(3):
            for c in range(3):
                P[r, c] += Ng[r, c]
        for r in range(3):
            P[3 + r, 3 + r] += qa
            P[6 + r, 6 + r] += 0.25 * qa * dt * dt
            P[3 + r, 6 + r] += 0.5 * qa * dt
            P[6 + r, 3 + r] += 0.5 * qa * dt
        # first-order bias Jacobians (old J_vg/J_va feed the position rows)
        Sa = skew(a_m)
        bracket = -dR @ skew(E_h @ a_m) @ J_Rg + 0.5 * dt * (R_half @ Sa @ so3_jr(0.5 * m))
        J_pg = J_pg + J_vg * dt + 0.5 * dt * dt * bracket
        J_pa = J_pa + J_va * dt - 0.5 * dt * dt * R_half
        J_vg = J_vg + dt * bracket
        J_va = J_va - dt * R_half
        J_Rg = E.T @ J_Rg - Jr_m * dt
        # state update (old dv feeds dp)
        dp = dp + dv * dt + 0.5 * dt * dt * Ra
        dv = dv + dt * Ra
        dR = dR @ E
    return dR, dv, dp, P, J_Rg, J_vg, J_va, J_pg, J_pa, ts[n - 1] - ts[0]


@jit
def imu_resjac_kernel(
    R_i, p_i, v_i, bg_i, ba_i,
    R_j, p_j, v_j, bg_j, ba_j,
    dR, dv, dp, dt,
    J_Rg, J_vg, J_va, J_pg, J_pa,
    bg_lin, ba_lin, g_W, sqrt_info,
):
    """Whitened 15-row IMU factor residual with analytic Jacobians.

    Rows: [r_dR (3), r_dv (3), r_dp (3), r_bg (3), r_ba (3)]; the last six
    rows are the bias random-walk coupling. Columns per state (15):
    [dtheta, dp, dv, dbg, dba] under the retraction R' = so3_exp(d) @ R.
    """
    dbg = bg_i - bg_lin
    dba = ba_i - ba_lin
    xi = J_Rg @ dbg
    dR_hat = dR @ so3_exp(xi)
    dv_hat = dv + J_vg @ dbg + J_va @ dba
    dp_hat = dp + J_pg @ dbg + J_pa @ dba

    M = dR_hat.T @ (R_i @ R_j.T)
    r_R = so3_log(M)
    w = v_j - v_i - g_W * dt
    u = p_j - p_i - v_i * dt - 0.5 * g_W * dt * dt
    r_v = R_i @ w - dv_hat
    r_p = R_i @ u - dp_hat

    res = np.empty(15)
    res[0:3] = r_R
    res[3:6] = r_v
    res[6:9] = r_p
    res[9:12] = bg_j - bg_i
    res[12:15] = ba_j - ba_i

    Jl_inv = so3_jl_inv(r_R)
    Jr_inv = so3_jr_inv(r_R)

    Ji = np.zeros((15, 15))
    Jj = np.zeros((15, 15))
    # rotation rows
    JRti = Jl_inv @ dR_hat.T
    JRbg = -(Jl_inv @ so3_jr(xi) @ J_Rg)
    for r in range(3):
        for c in range(3):
            Ji[r, c] = JRti[r, c]
            Ji[r, 9 + c] = JRbg[r, c]
            Jj[r, c] = -Jr_inv[r, c]
    # velocity rows
    Sw = skew(R_i @ w)
    for r in range(3):
        for c in range(3):
            Ji[3 + r, c] = -Sw[r, c]
            Ji[3 + r, 6 + c] = -R_i[r, c]
            Ji[3 + r, 9 + c] = -J_vg[r, c]
            Ji[3 + r, 12 + c] = -J_va[r, c]
            Jj[3 + r, 6 + c] = R_i[r, c]
    # position rows
    Su = skew(R_i @ u)
    for r in range(3):
        for c in range(3):
            Ji[6 + r, c] = -Su[r, c]
            Ji[6 + r, 3 + c] = -R_i[r, c]
            Ji[6 + r, 6 + c] = -R_i[r, c] * dt
            Ji[6 + r, 9 + c] = -J_pg[r, c]
            Ji[6 + r, 12 + c] = -J_pa[r, c]
            Jj[6 + r, 3 + c] = R_i[r, c]
    # bias random-walk rows
    for r in range(6):
        Ji[9 + r, 9 + r] = -1.0
        Jj[9 + r, 9 + r] = 1.0

    res_w = sqrt_info @ res
    Ji_w = sqrt_info @ Ji
    Jj_w = sqrt_info @ Jj
    return res_w, Ji_w, Jj_w


# ---------------------------------------------------------------------------
# RANSAC consensus search for Doppler ego-velocity
# ---------------------------------------------------------------------------


@jit
def ransac_consensus_kernel(dirs, dopplers, triples, threshold):
    """Best 3-point consensus over precomputed sample triples.

    dirs: (n, 3) unit directions, dopplers: (n,), triples: (m, 3) int64.
    Returns (best_inlier_mask, best_count); best_count = -1 when no triple
    produced a solvable system.
    """
    n = dirs.shape[0]
    m = triples.shape[0]
    best_count = -1
    best_v = np.zeros(3)
    A = np.empty((3, 3))
    rhs = np.empty(3)
    for it in range(m):
        for r in range(3):
            idx = triples[it, r]
            A[r, 0] = dirs[idx, 0]
            A[r, 1] = dirs[idx, 1]
            A[r, 2] = dirs[idx, 2]
            rhs[r] = -dopplers[idx]
        det = (
            A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
            - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
            + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0])
        )
        if abs(det) < 1e-9:
            continue
        v0 = (
            rhs[0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
            - A[0, 1] * (rhs[1] * A[2, 2] - A[1, 2] * rhs[2])
            + A[0, 2] * (rhs[1] * A[2, 1] - A[1, 1] * rhs[2])
        ) / det
        v1 = (
            A[0, 0] * (rhs[1] * A[2, 2] - A[1, 2] * rhs[2])
            - rhs[0] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
            + A[0, 2] * (A[1, 0] * rhs[2] - rhs[1] * A[2, 0])
        ) / det
        v2 = (
            A[0, 0] * (A[1, 1] * rhs[2] - rhs[1] * A[2, 1])
            - A[0, 1] * (A[1, 0] * rhs[2] - rhs[1] * A[2, 0])
            + rhs[0] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0])
        ) / det
        count = 0
        for p in range(n):
            pred = dirs[p, 0] * v0 + dirs[p, 1] * v1 + dirs[p, 2] * v2
            if abs(dopplers[p] + pred) < threshold:
                count += 1
        if count > best_count:
            best_count = count
            best_v[0] = v0
            best_v[1] = v1
            best_v[2] = v2
    mask = np.zeros(n, dtype=np.bool_)
    if best_count >= 0:
        for p in range(n):
            pred = dirs[p, 0] * best_v[0] + dirs[p, 1] * best_v[1] + dirs[p, 2] * best_v[2]
            if abs(dopplers[p] + pred) < threshold:
                mask[p] = True
    return mask, best_count


# ---------------------------------------------------------------------------
# Dead-reckoning propagation at IMU rate
# ---------------------------------------------------------------------------


@jit
def propagate_kernel(ts, acc, gyr, R0, v0, p0, b_g, b_a, g_W):
    """Midpoint dead-reckoning from (R0, v0, p0) at ts[0] over all samples.

    R0 is R_IW at ts[0]. Returns stacked (R_IW, v_W, p_W) at every sample
    time, including the first.
    """
    n = ts.shape[0]
    Rs = np.empty((n, 3, 3))
    vs = np.empty((n, 3))
    ps = np.empty((n, 3))
    Rs[0] = R0
    vs[0] = v0
    ps[0] = p0
    R = R0.copy()
    v = v0.copy()
    p = p0.copy()
    for k in range(n - 1):
        dt = ts[k + 1] - ts[k]
        w_m = 0.5 * (gyr[k] + gyr[k + 1]) - b_g
        a_m = 0.5 * (acc[k] + acc[k + 1]) - b_a
        m = w_m * dt
        R_WI_half = R.T @ so3_exp(0.5 * m)
        a_W = R_WI_half @ a_m + g_W
        p = p + v * dt + 0.5 * dt * dt * a_W
        v = v + dt * a_W
        R = so3_exp(-m) @ R
        Rs[k + 1] = R
        vs[k + 1] = v
        ps[k + 1] = p
    return Rs, vs, ps
