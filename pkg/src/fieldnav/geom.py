"""SO(3)/SE(3) arithmetic for rigid poses and their tangent-space twists.

Conventions used throughout the package:

* A twist is a length-6 vector ``[omega, v]`` -- rotational part first
  (radians), translational part second (meters).
* ``exp`` / ``log`` map between twists and poses on the principal domain
  (rotation angle below pi).
* ``retract(pose, delta)`` applies a tangent step by *left* multiplication,
  ``exp(delta) @ pose``; tangent vectors therefore live in the world frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-7
ORTHONORMAL_TOL = 1e-9


class AngleNearPi(ValueError):
    """Rotation angle too close to pi for a stable logarithm.

    Callers should re-anchor their reference pose instead of taking the log.
    """


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``p_world = rotation @ p_local + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or many points (..., 3)."""
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form."""
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def unskew(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def _drift(rotation: np.ndarray) -> float:
    return float(np.linalg.norm(rotation.T @ rotation - np.eye(3)))


def compose(a: Pose, b: Pose) -> Pose:
    """a then-applied-after b: ``(a*b).apply(p) == a.apply(b.apply(p))``."""
    rot = a.rotation @ b.rotation
    if _drift(rot) > ORTHONORMAL_TOL:
        rot = orthonormalize(rot)
    return Pose(rot, a.rotation @ b.translation + a.translation)


def inverse(pose: Pose) -> Pose:
    rt = pose.rotation.T
    return Pose(rt, -rt @ pose.translation)


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a series branch for small angles."""
    angle = float(np.linalg.norm(omega))
    k = skew(omega)
    if angle < SMALL_ANGLE:
        # I + K + K^2/2 keeps round-trip error at O(angle^3) <= 1e-21.
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rotation: np.ndarray) -> np.ndarray:
    """Inverse of ``so3_exp`` on angles below pi.

    Raises:
        AngleNearPi: when the rotation angle is within 1e-6 of pi.
    """
    cos_angle = np.clip((np.trace(rotation) - 1.0) * 0.5, -1.0, 1.0)
    angle = float(np.arccos(cos_angle))
    if angle >= np.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {angle:.9f} within 1e-6 of pi")
    if angle < SMALL_ANGLE:
        return unskew(0.5 * (rotation - rotation.T))
    scale = angle / (2.0 * np.sin(angle))
    return scale * unskew(rotation - rotation.T)


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    """V(omega): translation coupling matrix of the SE(3) exponential."""
    angle = float(np.linalg.norm(omega))
    k = skew(omega)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    a2 = angle * angle
    b = (1.0 - np.cos(angle)) / a2
    c = (angle - np.sin(angle)) / (a2 * angle)
    return np.eye(3) + b * k + c * (k @ k)


def _left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(omega))
    k = skew(omega)
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 12.0
    half = 0.5 * angle
    cot_term = (1.0 - half * np.cos(half) / np.sin(half)) / (angle * angle)
    return np.eye(3) - 0.5 * k + cot_term * (k @ k)


def exp(delta: np.ndarray) -> Pose:
    """SE(3) exponential of a twist ``[omega, v]``."""
    omega = np.asarray(delta[:3], dtype=float)
    v = np.asarray(delta[3:6], dtype=float)
    return Pose(so3_exp(omega), _left_jacobian(omega) @ v)


def log(pose: Pose) -> np.ndarray:
    """SE(3) logarithm; inverse of ``exp`` on the principal domain.

    Raises:
        AngleNearPi: when the rotation angle is within 1e-6 of pi.
    """
    omega = so3_log(pose.rotation)
    v = _left_jacobian_inv(omega) @ pose.translation
    return np.concatenate([omega, v])


def retract(pose: Pose, delta: np.ndarray) -> Pose:
    """One on-manifold step: ``exp(delta) * pose``.

    Applied after every gradient step; repeated retractions are *not*
    equivalent to a single retraction of the summed tangent steps because
    the exponential map does not commute.
    """
    return compose(exp(delta), pose)


def difference(a: Pose, b: Pose) -> np.ndarray:
    """Tangent step from b to a: ``retract(b, difference(a, b)) == a``."""
    return log(compose(a, inverse(b)))


def adjoint(pose: Pose) -> np.ndarray:
    """6x6 matrix satisfying ``exp(adjoint(P) @ d) * P == P * exp(d)``."""
    adj = np.zeros((6, 6))
    adj[:3, :3] = pose.rotation
    adj[3:, 3:] = pose.rotation
    adj[3:, :3] = skew(pose.translation) @ pose.rotation
    return adj


def rotz(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_of(rotation: np.ndarray) -> float:
    """Heading angle of the body x axis projected into the world xy plane."""
    return float(np.arctan2(rotation[1, 0], rotation[0, 0]))


def pose_to_json(pose: Pose) -> dict:
    """JSON form: row-major 3x3 rotation plus translation 3-vector."""
    return {
        "rotation": [[float(x) for x in row] for row in pose.rotation],
        "translation": [float(x) for x in pose.translation],
    }


def pose_from_json(obj: dict) -> Pose:
    rotation = np.asarray(obj["rotation"], dtype=float)
    translation = np.asarray(obj["translation"], dtype=float)
    if rotation.shape != (3, 3) or translation.shape != (3,):
        raise ValueError("pose JSON needs a 3x3 rotation and 3-vector translation")
    if _drift(rotation) > 1e-6:
        raise ValueError("pose JSON rotation is not orthonormal")
    return Pose(orthonormalize(rotation), translation)
