"""Fixed-lag sliding-window smoother.

Keyframe bookkeeping, factor wiring, damped Gauss-Newton (Levenberg-
Marquardt) on-manifold optimization, and Schur-complement marginalization
of departing keyframes into a linear Gaussian prior on the remaining
oldest keyframe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import factors as F
from . import kernels
from .factors import (
    STATE_DIM,
    NavState,
    RadarFactorContext,
    check_bias_deviation,
    imu_sqrt_info,
    robust_cost,
)
from .imu_preint import ImuNoiseModel, PreintegratedImu, preintegrate

__all__ = [
    "SolverConfig",
    "GraphConfig",
    "PriorSigmas",
    "Factor",
    "FactorGraphWindow",
    "OptimizeReport",
]

MODES = ("none", "E", "T", "ET")


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 10
    initial_damping: float = 1e-4
    cost_tolerance: float = 1e-6  # relative decrease
    update_tolerance: float = 1e-8
    huber_delta: float = 1.345
    # converged outright when the mean squared whitened residual per row is
    # below this; keeps the solver from polishing numerical dust
    cost_floor_per_row: float = 1e-4

    def __post_init__(self):
        for name in ("max_iterations", "initial_damping", "cost_tolerance", "update_tolerance", "huber_delta", "cost_floor_per_row"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class PriorSigmas:
    """First-keyframe prior: tight where the stationary init informs the
    state, loose on the gauge/unknown directions."""

    rollpitch: float = 0.02  # rad
    yaw: float = 1.0  # rad
    position: float = 1.0  # m
    velocity: float = 0.5  # m/s
    gyro_bias: float = 2e-3  # rad/s
    accel_bias: float = 0.1  # m/s^2
    ext_rot: float = 0.2  # rad
    ext_trans: float = 0.5  # m
    t_offset: float = 0.05  # s

    def diag(self) -> np.ndarray:
        d = np.empty(STATE_DIM)
        d[F.ROT] = [self.rollpitch, self.rollpitch, self.yaw]
        d[F.POS] = self.position
        d[F.VEL] = self.velocity
        d[F.BG] = self.gyro_bias
        d[F.BA] = self.accel_bias
        d[F.EROT] = self.ext_rot
        d[F.ETRANS] = self.ext_trans
        d[F.TO] = self.t_offset
        return d


@dataclass(frozen=True)
class GraphConfig:
    window_span: float = 1.0  # s
    sigma_ct: float = 1e-4  # s per keyframe step
    sigma_ce_rot: float = np.deg2rad(0.05)  # rad per keyframe step
    sigma_ce_trans: float = 5e-4  # m per keyframe step
    mode: str = "ET"
    t_o_min: float = -0.14
    t_o_max: float = 0.02
    noise: ImuNoiseModel = field(default_factory=ImuNoiseModel)
    prior: PriorSigmas = field(default_factory=PriorSigmas)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def estimate_t(self) -> bool:
        return self.mode in ("T", "ET")

    @property
    def estimate_e(self) -> bool:
        return self.mode in ("E", "ET")

    def frozen_dims(self) -> np.ndarray:
        frozen = np.zeros(STATE_DIM, dtype=bool)
        if not self.estimate_e:
            frozen[F.EROT] = True
            frozen[F.ETRANS] = True
        if not self.estimate_t:
            frozen[F.TO] = True
        return frozen


@dataclass
class Factor:
    kind: str  # "prior" | "imu" | "ct" | "ce" | "radar"
    i: int  # keyframe index of the first connected state
    j: int | None = None
    ctx: RadarFactorContext | None = None
    preint: PreintegratedImu | None = None
    sqrt_info: np.ndarray | None = None  # cached whitener for the imu factor
    raw_imu: tuple | None = None  # (ts, acc, gyr) for re-preintegration


@dataclass
class Keyframe:
    timestamp: float
    state: NavState
    t_o_bounds: tuple


@dataclass
class OptimizeReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    clamp_events: int = 0
    accepted_steps: int = 0
    repreintegrations: int = 0
    converged: bool = False

    def as_dict(self) -> dict:
        return dict(
            iterations=self.iterations,
            initial_cost=self.initial_cost,
            final_cost=self.final_cost,
            clamp_events=self.clamp_events,
            accepted_steps=self.accepted_steps,
            repreintegrations=self.repreintegrations,
            converged=self.converged,
        )


class FactorGraphWindow:
    """Active keyframes, factors, and the marginal prior of the smoother.

    Single-owner mutable structure: exactly one worker mutates it at a time.
    """

    def __init__(self, config: GraphConfig):
        self.config = config
        self.keyframes: list[Keyframe] = []
        self.factors: list[Factor] = []
        # marginal/initial prior on the oldest keyframe: quadratic
        # cost(d) = 0.5 d^T L d + g^T d with d = state (-) prior_ref
        self.prior_ref: NavState | None = None
        self.prior_L: np.ndarray | None = None
        self.prior_g: np.ndarray | None = None

    # -- construction -------------------------------------------------------

    def set_initial_prior(self, state: NavState, timestamp: float, sigmas: np.ndarray | None = None):
        if self.keyframes:
            raise RuntimeError("initial prior must precede the first keyframe")
        sig = self.config.prior.diag() if sigmas is None else np.asarray(sigmas, dtype=float)
        self.prior_ref = state
        self.prior_L = np.diag(1.0 / sig**2)
        self.prior_g = np.zeros(STATE_DIM)
        bounds = (self.config.t_o_min, self.config.t_o_max)
        self.keyframes.append(Keyframe(timestamp, state, bounds))
        self.factors.append(Factor("prior", 0))

    def add_keyframe(
        self,
        timestamp: float,
        state: NavState,
        preint: PreintegratedImu,
        radar_ctx: RadarFactorContext | None,
        raw_imu: tuple | None = None,
    ) -> "FactorGraphWindow":
        if not self.keyframes:
            raise RuntimeError("call set_initial_prior first")
        if timestamp <= self.keyframes[-1].timestamp:
            raise ValueError("keyframe timestamps must be strictly increasing")
        i = len(self.keyframes) - 1
        j = i + 1
        bounds = (self.config.t_o_min, self.config.t_o_max)
        if radar_ctx is not None:
            lo, hi = radar_ctx.t_O_bounds
            bounds = (max(bounds[0], lo), min(bounds[1], hi))
        # clamp the propagated t_O guess into the new keyframe's feasible range
        t_o = min(max(state.t_O, bounds[0]), bounds[1])
        if t_o != state.t_O:
            state = state.with_t_O(t_o)
        self.keyframes.append(Keyframe(timestamp, state, bounds))
        self.factors.append(
            Factor("imu", i, j, preint=preint, sqrt_info=imu_sqrt_info(preint, self.config.noise), raw_imu=raw_imu)
        )
        if self.config.estimate_t:
            self.factors.append(Factor("ct", i, j))
        if self.config.estimate_e:
            self.factors.append(Factor("ce", i, j))
        if radar_ctx is not None:
            self.factors.append(Factor("radar", j, ctx=radar_ctx))
        return self

    # -- structural queries ---------------------------------------------------

    @property
    def span(self) -> float:
        if not self.keyframes:
            return 0.0
        return self.keyframes[-1].timestamp - self.keyframes[0].timestamp

    def factor_count(self) -> int:
        return len(self.factors)

    def states(self) -> list[NavState]:
        return [k.state for k in self.keyframes]

    def validate_structure(self):
        ts = [k.timestamp for k in self.keyframes]
        assert all(a < b for a, b in zip(ts, ts[1:])), "keyframe timestamps not increasing"
        n_pairs = len(self.keyframes) - 1
        imu = [f for f in self.factors if f.kind == "imu"]
        assert len(imu) == n_pairs, "every interior pair needs exactly one IMU factor"
        assert sorted((f.i, f.j) for f in imu) == [(k, k + 1) for k in range(n_pairs)]
        if self.config.estimate_t:
            assert sum(f.kind == "ct" for f in self.factors) == n_pairs
        if self.config.estimate_e:
            assert sum(f.kind == "ce" for f in self.factors) == n_pairs
        assert sum(f.kind == "prior" for f in self.factors) == 1
        assert self.prior_L is not None

    # -- linearization ---------------------------------------------------------

    def _prior_terms(self, states):
        """Quadratic prior contribution (H block, g block, scalar cost) at kf 0."""
        d = F.local_coords(states[0], self.prior_ref)
        T = np.eye(STATE_DIM)
        T[F.ROT, F.ROT] = kernels.so3_jl_inv(d[F.ROT])
        T[F.EROT, F.EROT] = kernels.so3_jl_inv(d[F.EROT])
        H = T.T @ self.prior_L @ T
        g = T.T @ (self.prior_L @ d + self.prior_g)
        cost = float(0.5 * d @ self.prior_L @ d + self.prior_g @ d)
        return H, g, cost

    def _factor_terms(self, f: Factor, states, huber_delta: float, with_jacobians: bool):
        """Whitened (rows, cols...) per factor: returns (indices, J_blocks, r, weight)."""
        if f.kind == "prior":
            return None
        if f.kind == "imu":
            if with_jacobians:
                res, Ji, Jj = F.imu_factor_stacked(states[f.i], states[f.j], f.preint, f.sqrt_info)
                return ([f.i, f.j], [F._expand_cols(Ji), F._expand_cols(Jj)], res, 1.0)
            res, _, _ = F.imu_factor_stacked(states[f.i], states[f.j], f.preint, f.sqrt_info)
            return ([f.i, f.j], None, res, 1.0)
        if f.kind == "ct":
            fr = F.ct_residual(states[f.i], states[f.j], self.config.sigma_ct)
        elif f.kind == "ce":
            fr = F.ce_residual(states[f.i], states[f.j], self.config.sigma_ce_rot, self.config.sigma_ce_trans)
        elif f.kind == "radar":
            fr = F.radar_residual(states[f.i], f.ctx, huber_delta)
            S = f.ctx.sqrt_info
            r_w = S @ fr.residual
            if with_jacobians:
                return ([f.i], [S @ fr.jacobians["i"]], r_w, fr.robust_weight)
            return ([f.i], None, r_w, fr.robust_weight)
        else:  # pragma: no cover
            raise ValueError(f.kind)
        S = np.sqrt(fr.information)  # CT/CE information is diagonal
        r_w = S @ fr.residual
        if with_jacobians:
            keys = [f.i, f.j]
            Js = [S @ fr.jacobians["i"], S @ fr.jacobians["j"]]
            return (keys, Js, r_w, 1.0)
        return ([f.i, f.j], None, r_w, 1.0)

    def _cost(self, states, huber_delta: float) -> float:
        total = self._prior_terms(states)[2]
        for f in self.factors:
            terms = self._factor_terms(f, states, huber_delta, with_jacobians=False)
            if terms is None:
                continue
            _, _, r_w, _ = terms
            sq = float(r_w @ r_w)
            if f.kind == "radar":
                total += 0.5 * robust_cost(sq, huber_delta)
            else:
                total += 0.5 * sq
        return total

    def _linearize(self, states, huber_delta: float):
        n = len(states) * STATE_DIM
        H = np.zeros((n, n))
        g = np.zeros(n)
        cost = 0.0
        Hp, gp, cp = self._prior_terms(states)
        H[:STATE_DIM, :STATE_DIM] += Hp
        g[:STATE_DIM] += gp
        cost += cp
        for f in self.factors:
            terms = self._factor_terms(f, states, huber_delta, with_jacobians=True)
            if terms is None:
                continue
            keys, Js, r_w, w = terms
            sq = float(r_w @ r_w)
            if f.kind == "radar":
                cost += 0.5 * robust_cost(sq, huber_delta)
            else:
                cost += 0.5 * sq
            sw = np.sqrt(w)
            r_s = sw * r_w
            for a, ka in enumerate(keys):
                Ja = sw * Js[a]
                sa = slice(ka * STATE_DIM, (ka + 1) * STATE_DIM)
                g[sa] += Ja.T @ r_s
                for b, kb in enumerate(keys):
                    sb = slice(kb * STATE_DIM, (kb + 1) * STATE_DIM)
                    H[sa.start : sa.stop, sb.start : sb.stop] += Ja.T @ (sw * Js[b])
        return H, g, cost

    # -- optimization -----------------------------------------------------------

    def _repreintegrate_if_needed(self, report: OptimizeReport):
        for f in self.factors:
            if f.kind != "imu" or f.raw_imu is None:
                continue
            if check_bias_deviation(self.keyframes[f.i].state, f.preint) > F.BIAS_DEVIATION_LIMIT:
                ts, acc, gyr = f.raw_imu
                st = self.keyframes[f.i].state
                f.preint = preintegrate(ts, acc, gyr, st.b_g, st.b_a, self.config.noise)
                f.sqrt_info = imu_sqrt_info(f.preint, self.config.noise)
                report.repreintegrations += 1

    def optimize(self, config: SolverConfig) -> OptimizeReport:
        if not self.keyframes:
            raise RuntimeError("empty window")
        report = OptimizeReport()
        self._repreintegrate_if_needed(report)
        states = self.states()
        frozen = self.config.frozen_dims()
        frozen_idx = np.concatenate([np.flatnonzero(frozen) + k * STATE_DIM for k in range(len(states))])
        cost = self._cost(states, config.huber_delta)
        report.initial_cost = cost
        _ROWS = {"prior": STATE_DIM, "imu": 15, "ct": 1, "ce": 6, "radar": 3}
        floor = config.cost_floor_per_row * sum(_ROWS[f.kind] for f in self.factors)
        damping = config.initial_damping
        for it in range(config.max_iterations):
            report.iterations = it + 1
            if cost < floor:
                report.converged = True
                break
            H, g, cost_lin = self._linearize(states, config.huber_delta)
            cost = cost_lin
            if frozen_idx.size:
                H[frozen_idx, :] = 0.0
                H[:, frozen_idx] = 0.0
                H[frozen_idx, frozen_idx] = 1.0
                g[frozen_idx] = 0.0
            diag = np.diag(H).copy()
            scale = np.maximum(diag, max(diag.max(), 1.0) * 1e-12)
            accepted = False
            chol_failures = 0
            for _ in range(10):
                try:
                    chol = cho_factor(H + damping * np.diag(scale), lower=True)
                except np.linalg.LinAlgError:
                    chol_failures += 1
                    damping *= 10.0
                    continue
                delta = cho_solve(chol, -g)
                cand, n_clamp = self._retract_all(states, delta)
                cand_cost = self._cost(cand, config.huber_delta)
                if cand_cost <= cost + 1e-15:
                    states = cand
                    report.clamp_events += n_clamp
                    report.accepted_steps += 1
                    damping = max(damping * 0.5, 1e-12)
                    accepted = True
                    break
                damping *= 10.0
            if chol_failures >= 10:
                raise RuntimeError("normal equations stayed indefinite after 10 damping escalations")
            if not accepted:
                break
            rel_drop = (cost - cand_cost) / max(cost, 1e-300)
            step_norm = float(np.linalg.norm(delta))
            cost = cand_cost
            if rel_drop < config.cost_tolerance or step_norm < config.update_tolerance:
                report.converged = True
                break
        for kf, st in zip(self.keyframes, states):
            kf.state = st
        report.final_cost = cost
        return report

    def _retract_all(self, states, delta):
        out = []
        clamps = 0
        for k, st in enumerate(states):
            d = delta[k * STATE_DIM : (k + 1) * STATE_DIM]
            new = F.retract(st, d)
            lo, hi = self.keyframes[k].t_o_bounds
            t_o = min(max(new.t_O, lo), hi)
            if t_o != new.t_O:
                clamps += 1
                new = new.with_t_O(t_o)
            out.append(new)
        return out, clamps

    # -- marginalization ----------------------------------------------------------

    def marginalize_oldest(self, huber_delta: float = 1.345) -> "FactorGraphWindow":
        """Schur-complement the oldest keyframe into the prior on its successor."""
        if len(self.keyframes) < 2:
            raise RuntimeError("need at least two keyframes to marginalize")
        states = self.states()
        H = np.zeros((2 * STATE_DIM, 2 * STATE_DIM))
        g = np.zeros(2 * STATE_DIM)
        Hp, gp, _ = self._prior_terms(states)
        H[:STATE_DIM, :STATE_DIM] += Hp
        g[:STATE_DIM] += gp
        keep: list[Factor] = []
        for f in self.factors:
            if f.kind == "prior":
                continue
            touches_old = f.i == 0 or f.j == 0
            if not touches_old:
                keep.append(f)
                continue
            terms = self._factor_terms(f, states, huber_delta, with_jacobians=True)
            keys, Js, r_w, w = terms
            sw = np.sqrt(w)
            r_s = sw * r_w
            for a, ka in enumerate(keys):
                if ka > 1:  # pragma: no cover - factors only touch consecutive frames
                    raise RuntimeError("marginalization expects chain topology")
                Ja = sw * Js[a]
                sa = slice(ka * STATE_DIM, (ka + 1) * STATE_DIM)
                g[sa] += Ja.T @ r_s
                for b, kb in enumerate(keys):
                    sb = slice(kb * STATE_DIM, (kb + 1) * STATE_DIM)
                    H[sa.start : sa.stop, sb.start : sb.stop] += Ja.T @ (sw * Js[b])
        H00 = H[:STATE_DIM, :STATE_DIM]
        H01 = H[:STATE_DIM, STATE_DIM:]
        H11 = H[STATE_DIM:, STATE_DIM:]
        g0 = g[:STATE_DIM]
        g1 = g[STATE_DIM:]
        ridge = 1e-10 * max(float(np.diag(H00).max()), 1.0)
        sol = np.linalg.solve(H00 + ridge * np.eye(STATE_DIM), np.concatenate([H01, g0[:, None]], axis=1))
        L_new = H11 - H01.T @ sol[:, :STATE_DIM]
        g_new = g1 - H01.T @ sol[:, STATE_DIM]
        # enforce PSD against roundoff
        L_new = 0.5 * (L_new + L_new.T)
        vals, vecs = np.linalg.eigh(L_new)
        L_new = vecs @ np.diag(np.clip(vals, 0.0, None)) @ vecs.T
        self.prior_ref = states[1]
        self.prior_L = L_new
        self.prior_g = g_new
        self.keyframes.pop(0)
        self.factors = [Factor(f.kind, f.i - 1, None if f.j is None else f.j - 1, f.ctx, f.preint, f.sqrt_info, f.raw_imu) for f in keep]
        self.factors.insert(0, Factor("prior", 0))
        return self
