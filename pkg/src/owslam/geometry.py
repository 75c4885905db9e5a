"""SO(3) operators and the camera pose type.

Rotations are plain 3x3 numpy arrays. Tangent vectors are 3-vectors in rad.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-6
PI_TOL = 1e-9


def wedge(xi: np.ndarray) -> np.ndarray:
    x, y, z = np.asarray(xi, dtype=float)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) * 0.5


def exp_so3(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    th = float(np.linalg.norm(xi))
    W = wedge(xi)
    if th < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    A = np.sin(th) / th
    B = (1.0 - np.cos(th)) / (th * th)
    return np.eye(3) + A * W + B * (W @ W)


def log_so3(C: np.ndarray) -> np.ndarray:
    """Principal logarithm, ``|xi| <= pi``.

    At an angle of pi the axis is only defined up to sign; the sign is chosen
    so that its largest-magnitude component is non-negative (first index wins
    ties).
    """
    C = np.asarray(C, dtype=float)
    c = np.clip((np.trace(C) - 1.0) * 0.5, -1.0, 1.0)
    skew = 0.5 * vee(C - C.T)  # = sin(th) * axis
    s = float(np.linalg.norm(skew))
    th = float(np.arctan2(s, c))
    if th < SMALL_ANGLE:
        # sin(th)/th ~ 1 - th^2/6
        return skew * (1.0 + th * th / 6.0)
    if c < 0.0 and s < 1e-6:
        # near pi the antisymmetric part vanishes; take the axis from the symmetric part
        S = (C + C.T) * 0.5 - c * np.eye(3)
        i = int(np.argmax(np.diag(S)))
        axis = S[:, i] / np.linalg.norm(S[:, i])
        if s < PI_TOL:
            k = int(np.argmax(np.abs(axis)))
            if axis[k] < 0:
                axis = -axis
        elif axis @ skew < 0:
            axis = -axis
        return axis * th
    return skew * (th / s)


def left_jacobian(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    th = float(np.linalg.norm(xi))
    W = wedge(xi)
    if th < SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    a = (1.0 - np.cos(th)) / (th * th)
    b = (th - np.sin(th)) / (th ** 3)
    return np.eye(3) + a * W + b * (W @ W)


def left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    th = float(np.linalg.norm(xi))
    W = wedge(xi)
    if th < SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + (W @ W) / 12.0
    half = 0.5 * th
    # 1/th^2 - (1 + cos th) / (2 th sin th), written with the half-angle cotangent
    c = (1.0 - half / np.tan(half)) / (th * th)
    return np.eye(3) - 0.5 * W + c * (W @ W)


def right_invariant_error(C_nom: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.asarray(C_nom) @ np.asarray(C).T


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Nearest rotation in the Frobenius sense (polar projection)."""
    U, _, Vt = np.linalg.svd(np.asarray(m, dtype=float))
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


def is_rotation(m: np.ndarray, tol: float = 1e-9) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        return False
    return (np.linalg.norm(m.T @ m - np.eye(3)) <= tol
            and abs(np.linalg.det(m) - 1.0) <= tol)


@dataclass(frozen=True)
class Pose:
    """World-from-camera orientation ``C`` and camera position ``r`` (m)."""

    C: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "C", np.asarray(self.C, dtype=float).reshape(3, 3))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def perturbed(self, delta: np.ndarray) -> "Pose":
        """Apply a 6-vector (rotation, translation): C <- Exp(dxi) C, r <- r + dr."""
        delta = np.asarray(delta, dtype=float)
        return Pose(exp_so3(delta[:3]) @ self.C, self.r + delta[3:])

    def transform(self, pts_cam: np.ndarray) -> np.ndarray:
        return np.asarray(pts_cam) @ self.C.T + self.r

    def inverse_transform(self, pts_world: np.ndarray) -> np.ndarray:
        return (np.asarray(pts_world) - self.r) @ self.C


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(position error in m, rotation error in rad)."""
    return (float(np.linalg.norm(a.r - b.r)),
            float(np.linalg.norm(log_so3(right_invariant_error(a.C, b.C)))))
