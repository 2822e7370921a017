"""Uniform cubic B-splines over a local IMU window: fit, evaluate, integrate.

The fit solves a Tikhonov-regularized least squares per axis through the
banded normal equations (bandwidth 3). Constant extrapolation beyond the
last sample is realized by appending replicated samples before fitting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solveh_banded

from . import kernels
from .kernels import GL5_NODES, GL5_WEIGHTS

__all__ = ["SplineFitConfig", "UniformCubicSpline", "fit", "basis_weights"]


@dataclass(frozen=True)
class SplineFitConfig:
    n_segments: int
    lam: float = 1e-6
    extrapolation_pad: float = 0.0

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


def basis_weights(u: float) -> np.ndarray:
    """Weights of the 4 local control points at local coordinate u in [0, 1]."""
    return np.array(
        [
            (1 - u) ** 3,
            3 * u**3 - 6 * u**2 + 4,
            -3 * u**3 + 3 * u**2 + 3 * u + 1,
            u**3,
        ]
    ) / 6.0


@dataclass(frozen=True)
class UniformCubicSpline:
    """Fitted 3-channel spline; immutable. Domain is [t_min, t_max]."""

    t_min: float
    t_max: float
    n_segments: int
    control_points: np.ndarray  # (n_segments + 3, 3)

    @property
    def segment_width(self) -> float:
        return (self.t_max - self.t_min) / self.n_segments

    def contains(self, t: float) -> bool:
        return self.t_min - 1e-12 <= t <= self.t_max + 1e-12

    def eval(self, t: float) -> np.ndarray:
        """Value at t; times beyond the domain clamp to the boundary."""
        return kernels.bspline_eval3(
            self.control_points, self.t_min, self.segment_width, self.n_segments, float(t), 0
        )

    def eval_deriv(self, t: float, order: int) -> np.ndarray:
        if order not in (1, 2):
            raise ValueError("derivative order must be 1 or 2")
        return kernels.bspline_eval3(
            self.control_points, self.t_min, self.segment_width, self.n_segments, float(t), order
        )

    def integrate_gl5(self, t_a: float, t_b: float, transform=None) -> np.ndarray:
        """Signed integral of transform(S(t)) over [t_a, t_b], 5-pt Gauss-Legendre."""
        total = np.zeros(3)
        span = t_b - t_a
        if span == 0.0:
            return total
        for xi, w in zip(GL5_NODES, GL5_WEIGHTS):
            val = self.eval(t_a + span * xi)
            if transform is not None:
                val = np.asarray(transform(val), dtype=float)
            total += w * val
        return span * total


def _padded(samples_t: np.ndarray, samples_y: np.ndarray, pad: float):
    if pad <= 0:
        return samples_t, samples_y
    dts = np.diff(samples_t)
    period = float(np.median(dts))
    n_extra = int(np.ceil(pad / period))
    extra_t = samples_t[-1] + period * np.arange(1, n_extra + 1)
    extra_y = np.repeat(samples_y[-1][None, :], n_extra, axis=0)
    return np.concatenate([samples_t, extra_t]), np.concatenate([samples_y, extra_y])


def fit(samples_t, samples_y, config: SplineFitConfig) -> UniformCubicSpline:
    """Regularized least-squares fit of a uniform cubic B-spline.

    samples_t: (N,) strictly increasing timestamps; samples_y: (N, 3).
    Minimizes sum ||y_j - S(t_j)||^2 + lam * sum ||c_i||^2 per axis.
    """
    t = np.asarray(samples_t, dtype=float)
    y = np.asarray(samples_y, dtype=float).reshape(len(t), 3)
    if len(t) < 4:
        raise ValueError("need at least 4 samples to fit a cubic spline")
    if np.any(np.diff(t) <= 0):
        raise ValueError("sample timestamps must be strictly increasing")
    t, y = _padded(t, y, config.extrapolation_pad)

    n_seg = config.n_segments
    t_min, t_max = float(t[0]), float(t[-1])
    h = (t_max - t_min) / n_seg
    n_ctrl = n_seg + 3

    x = (t - t_min) / h
    seg = np.clip(np.floor(x).astype(int), 0, n_seg - 1)
    u = x - seg

    # banded normal equations: (A^T A + lam I) c = A^T y, bandwidth 3
    ab = np.zeros((4, n_ctrl))  # upper-banded symmetric storage for solveh_banded
    rhs = np.zeros((n_ctrl, 3))
    W = np.stack([basis_weights(ui) for ui in u])  # (N, 4)
    for j in range(len(t)):
        i0 = seg[j]
        w = W[j]
        for a in range(4):
            rhs[i0 + a] += w[a] * y[j]
            for b in range(a, 4):
                # ab[3 + a - b, col] holds entry (row, col) with row = i0+a, col = i0+b
                ab[3 + a - b, i0 + b] += w[a] * w[b]
    ab[3, :] += config.lam

    try:
        sol = solveh_banded(ab[:4], rhs, lower=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - impossible for lam > 0
        raise ValueError(f"singular normal equations in spline fit: {exc}") from exc
    return UniformCubicSpline(t_min, t_max, n_seg, np.ascontiguousarray(sol))


def fit_objective(spline: UniformCubicSpline, samples_t, samples_y, lam: float) -> float:
    """Value of the regularized fit objective for a given control polygon."""
    t = np.asarray(samples_t, dtype=float)
    y = np.asarray(samples_y, dtype=float).reshape(len(t), 3)
    resid = sum(float(np.sum((y[j] - spline.eval(t[j])) ** 2)) for j in range(len(t)))
    return resid + lam * float(np.sum(spline.control_points**2))
