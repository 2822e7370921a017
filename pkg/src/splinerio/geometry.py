"""Minimal SO(3)/SE(3) toolbox: exp/log maps, poses, rigid trajectory alignment.

Rotations are plain 3x3 numpy arrays (row-major, orthonormal, det +1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

__all__ = [
    "DegenerateInput",
    "Pose",
    "so3_exp",
    "so3_log",
    "is_rotation",
    "reorthonormalize",
    "rot_to_quat",
    "quat_to_rot",
    "rotation_angle",
    "umeyama_align",
]


class DegenerateInput(ValueError):
    """Raised for inputs outside an operation's validity domain."""


def so3_exp(phi) -> np.ndarray:
    """Exponential map so(3) -> SO(3) (axis-angle vector to rotation matrix)."""
    phi = np.asarray(phi, dtype=float)
    if not np.all(np.isfinite(phi)):
        raise DegenerateInput("non-finite rotation vector")
    return kernels.so3_exp(np.ascontiguousarray(phi))


def so3_log(R) -> np.ndarray:
    """Logarithm map SO(3) -> so(3); angle of the result lies in [0, pi]."""
    R = np.asarray(R, dtype=float)
    err = np.abs(R @ R.T - np.eye(3)).max()
    if err > 1e-6:
        raise DegenerateInput(f"matrix is not orthonormal (|R R^T - I| = {err:.2e})")
    return kernels.so3_log(np.ascontiguousarray(R))


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    return (
        np.abs(R @ R.T - np.eye(3)).max() <= tol
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def reorthonormalize(R) -> np.ndarray:
    """Project onto SO(3) via the polar decomposition (nearest rotation)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    return float(np.linalg.norm(kernels.so3_log(np.ascontiguousarray(np.asarray(R, dtype=float)))))


def rot_to_quat(R) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0))
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def quat_to_rot(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform: maps points p to ``rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, p) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float) + self.translation


def umeyama_align(estimate, reference) -> Pose:
    """Rigid SE(3) transform minimizing sum ||T(est_i) - ref_i||^2 (no scale).

    ``estimate`` and ``reference`` are (n, 3) position arrays matched by
    index, n >= 3. Raises DegenerateInput for collinear/rank-deficient sets.
    """
    P = np.asarray(estimate, dtype=float).reshape(-1, 3)
    Q = np.asarray(reference, dtype=float).reshape(-1, 3)
    if P.shape[0] < 3 or P.shape != Q.shape:
        raise DegenerateInput("need >= 3 matched position pairs")
    mu_p = P.mean(axis=0)
    mu_q = Q.mean(axis=0)
    C = (Q - mu_q).T @ (P - mu_p) / P.shape[0]
    U, S, Vt = np.linalg.svd(C)
    if S[1] < 1e-12 * max(S[0], 1e-300):
        raise DegenerateInput("degenerate (collinear) point set")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    t = mu_q - R @ mu_p
    return Pose(R, t)
