"""SE(3) group operations.

Twists are 6-vectors ``(rho, nu)``: rotation part first (radians), then
translation part (meters).  Perturbations are applied on the right,
``T(xi) = T_hat @ exp(xi)``, and every Jacobian in the package follows that
convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
LOG_PI_MARGIN = 1e-6


class LogMapSingularity(ValueError):
    """Raised when the rotation angle is too close to pi for a unique log."""


def hat(w):
    """Skew-symmetric matrix ``[w]x`` such that ``hat(w) @ v == cross(w, v)``."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def so3_exp(rho):
    rho = np.asarray(rho, dtype=float)
    theta = np.linalg.norm(rho)
    K = hat(rho)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def _rotation_angle(R):
    # atan2 form keeps precision at small and large angles alike
    s = 0.5 * np.linalg.norm(vee(R - R.T))
    c = 0.5 * (np.trace(R) - 1.0)
    return np.arctan2(s, c)


def so3_log(R):
    R = np.asarray(R, dtype=float)
    theta = _rotation_angle(R)
    if theta > np.pi - LOG_PI_MARGIN:
        raise LogMapSingularity(
            f"rotation angle {theta:.9f} is within {LOG_PI_MARGIN} of pi"
        )
    w = vee(R - R.T)
    if theta < SMALL_ANGLE:
        return 0.5 * w * (1.0 + theta**2 / 6.0)
    return 0.5 * w * theta / np.sin(theta)


def _left_jacobian(rho):
    theta = np.linalg.norm(rho)
    K = hat(rho)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    b = (1.0 - np.cos(theta)) / theta**2
    c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * K + c * K @ K


def _left_jacobian_inv(rho):
    theta = np.linalg.norm(rho)
    K = hat(rho)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    coef = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
    return np.eye(3) - 0.5 * K + coef * K @ K


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform ``x -> R @ x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self):
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        if isinstance(other, PoseSE3):
            return PoseSE3(
                self.rotation @ other.rotation,
                self.rotation @ other.translation + self.translation,
            )
        return NotImplemented

    def apply(self, points):
        """Map ``(3,)`` or ``(N, 3)`` points through the transform."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def orthogonality_error(self):
        R = self.rotation
        return float(np.linalg.norm(R.T @ R - np.eye(3)))

    def is_valid(self, tol=1e-9):
        return (
            self.orthogonality_error() < tol
            and abs(np.linalg.det(self.rotation) - 1.0) < tol
            and bool(np.all(np.isfinite(self.translation)))
        )

    def __eq__(self, other):
        if not isinstance(other, PoseSE3):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def se3_exp(xi):
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, nu = xi[:3], xi[3:]
    return PoseSE3(so3_exp(rho), _left_jacobian(rho) @ nu)


def se3_log(T):
    rho = so3_log(T.rotation)
    nu = _left_jacobian_inv(rho) @ T.translation
    return np.concatenate([rho, nu])


def perturb(T, xi):
    """Right perturbation ``T @ exp(xi)``."""
    return T @ se3_exp(xi)


def rotation_angle(R):
    """Geodesic angle of a rotation matrix, radians."""
    return float(_rotation_angle(np.asarray(R, dtype=float)))


def rotation_error(R_est, R_ref):
    return rotation_angle(np.asarray(R_est).T @ np.asarray(R_ref))


def project_to_so3(M):
    """Nearest rotation in Frobenius norm (polar factor with det fix)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ D @ Vt


def random_pose(rng, max_angle=np.pi, max_translation=1.0):
    """Random axis-angle rotation with angle uniform in ``[0, max_angle]``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    t = rng.uniform(-max_translation, max_translation, size=3)
    return PoseSE3(so3_exp(axis * angle), t)
