"""SO(3)/SE(3) helpers and the camera pose type."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .autodiff import hat


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """J with d/d eps Exp(phi + eps) = Exp(J eps) Exp(phi) to first order."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (np.eye(3) + (1.0 - np.cos(theta)) / theta**2 * K
            + (theta - np.sin(theta)) / theta**3 * K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def se3_exp(xi: np.ndarray) -> np.ndarray:
    """4x4 matrix exp(xi^) with ``xi = (rho, phi)``."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    theta = np.linalg.norm(phi)
    K = hat(phi)
    if theta < 1e-8:
        V = np.eye(3) + 0.5 * K + K @ K / 6.0
    else:
        V = (np.eye(3) + (1.0 - np.cos(theta)) / theta**2 * K
             + (theta - np.sin(theta)) / theta**3 * K @ K)
    T = np.eye(4)
    T[:3, :3] = so3_exp(phi)
    T[:3, 3] = V @ rho
    return T


@dataclass
class PoseSE3:
    """Camera-to-world rigid transform; quaternion stored as (x, y, z, w)."""

    quat: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("invalid quaternion")
        self.quat = q / n
        self.trans = np.asarray(self.trans, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "PoseSE3":
        return cls(Rotation.from_matrix(T[:3, :3]).as_quat(), T[:3, 3])

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> "PoseSE3":
        return cls(Rotation.from_matrix(R).as_quat(), t)

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.quat).as_matrix()

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.trans
        return T

    def inverse(self) -> "PoseSE3":
        return PoseSE3.from_matrix(np.linalg.inv(self.matrix()))

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3.from_matrix(self.matrix() @ other.matrix())

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return self.compose(other)

    def retract(self, rho: np.ndarray, phi: np.ndarray) -> "PoseSE3":
        """Split update: rotate about the camera centre, translate in world frame."""
        R = so3_exp(phi) @ self.rotation
        return PoseSE3.from_rt(R, self.trans + np.asarray(rho, dtype=float))

    def transform_points(self, p: np.ndarray) -> np.ndarray:
        return p @ self.rotation.T + self.trans


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> PoseSE3:
    """Camera-to-world pose with +z forward, +x right, +y down (OpenCV)."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return PoseSE3.from_rt(np.stack([right, down, fwd], axis=1), eye)


def interpolate(a: PoseSE3, b: PoseSE3, fractions) -> list[PoseSE3]:
    fractions = np.atleast_1d(np.asarray(fractions, dtype=float))
    slerp = Slerp([0.0, 1.0], Rotation.from_quat(np.stack([a.quat, b.quat])))
    rots = slerp(fractions).as_quat()
    return [PoseSE3(q, (1 - f) * a.trans + f * b.trans) for q, f in zip(rots, fractions)]


def rotation_angle_deg(a: PoseSE3, b: PoseSE3) -> float:
    return float(np.degrees(np.linalg.norm(so3_log(a.rotation.T @ b.rotation))))
