"""Instantaneous 3D ego-velocity from a single Doppler radar point cloud.

Measurement model for static targets: doppler d_j = -r_hat_j . v, where
r_hat_j is the unit direction to the target in the radar frame and v the
radar-frame ego-velocity. RANSAC rejects moving targets; the consensus set
is refit by least squares with a residual-variance covariance estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

__all__ = [
    "RadarScan",
    "EgoVelMeasurement",
    "RansacConfig",
    "UnobservableAxis",
    "solve_lsq",
    "estimate_ransac",
    "InfeasibilityGate",
    "COV_FLOOR_STD",
]

COV_FLOOR_STD = 0.01  # m/s; keeps the factor information matrix bounded


class UnobservableAxis(ValueError):
    """Point directions do not span 3D; some velocity axis is unobservable."""


@dataclass(frozen=True)
class RadarScan:
    timestamp: float
    positions: np.ndarray  # (n, 3) in radar frame, meters
    dopplers: np.ndarray  # (n,) m/s
    intensities: np.ndarray | None = None

    def __post_init__(self):
        if np.any(np.linalg.norm(self.positions, axis=1) <= 0):
            raise ValueError("radar points must have nonzero range")

    @property
    def directions(self) -> np.ndarray:
        return self.positions / np.linalg.norm(self.positions, axis=1, keepdims=True)


@dataclass(frozen=True)
class EgoVelMeasurement:
    timestamp: float
    velocity: np.ndarray  # (3,) m/s, radar frame
    covariance: np.ndarray  # (3, 3) SPD
    inlier_count: int = 0


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold: float = 0.15  # m/s
    max_iters: int = 100
    min_inlier_ratio: float = 0.25


def _floored_covariance(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    vals = np.maximum(vals, COV_FLOOR_STD**2)
    return vecs @ np.diag(vals) @ vecs.T


def solve_lsq(directions, dopplers, noise_floor: float = COV_FLOOR_STD):
    """Least-squares ego-velocity and covariance from unit directions/dopplers.

    Returns (velocity, covariance). Raises UnobservableAxis when the
    direction matrix is rank-deficient.
    """
    A = np.asarray(directions, dtype=float).reshape(-1, 3)
    d = np.asarray(dopplers, dtype=float).ravel()
    if A.shape[0] < 3:
        raise UnobservableAxis("need at least 3 points")
    s = np.linalg.svd(A, compute_uv=False)
    if s[2] < 1e-6 * s[0] or s[2] < 1e-12:
        raise UnobservableAxis("point directions are rank-deficient")
    AtA = A.T @ A
    v = np.linalg.solve(AtA, A.T @ (-d))
    resid = d + A @ v
    dof = A.shape[0] - 3
    sigma2 = float(resid @ resid) / dof if dof > 0 else noise_floor**2
    sigma2 = max(sigma2, 1e-12)
    cov = _floored_covariance(sigma2 * np.linalg.inv(AtA))
    return v, cov


class InfeasibilityGate:
    """Optional moving-average gate rejecting physically implausible estimates."""

    def __init__(self, window: int = 5, threshold: float = 5.0):
        self.window = window
        self.threshold = threshold
        self._history: list[np.ndarray] = []

    def admit(self, velocity: np.ndarray) -> bool:
        if len(self._history) >= self.window:
            mean = np.mean(self._history[-self.window :], axis=0)
            if np.linalg.norm(velocity - mean) > self.threshold:
                return False
        self._history.append(np.asarray(velocity, dtype=float))
        if len(self._history) > self.window:
            self._history.pop(0)
        return True


def estimate_ransac(scan: RadarScan, config: RansacConfig, rng: np.random.Generator):
    """RANSAC ego-velocity estimate for one scan.

    Returns an EgoVelMeasurement, or None when the consensus ratio falls
    below ``config.min_inlier_ratio`` (scan rejected; no radar factor).
    Raises UnobservableAxis when even the full set is rank-deficient.
    """
    n = len(scan.dopplers)
    if n < 3:
        raise UnobservableAxis("scan has fewer than 3 points")
    dirs = np.ascontiguousarray(scan.directions)
    dops = np.ascontiguousarray(np.asarray(scan.dopplers, dtype=float))
    # precomputed triples keep the draw sequence identical across kernel paths
    triples = rng.integers(0, n, size=(config.max_iters, 3)).astype(np.int64)
    mask, best = kernels.ransac_consensus_kernel(dirs, dops, triples, config.inlier_threshold)
    if best < 3 or best < config.min_inlier_ratio * n:
        return None
    try:
        v, cov = solve_lsq(dirs[mask], dops[mask])
    except UnobservableAxis:
        return None
    return EgoVelMeasurement(scan.timestamp, v, cov, inlier_count=int(mask.sum()))
