"""Manifold arithmetic for poses, rotations, unit bearings, and wrapped headings.

Conventions used throughout the package:

- World frame is ENU (x east, y north, z up).
- A pose stores the world-from-body rotation and the body origin in world
  coordinates.
- Pose tangent vectors are 6-vectors ordered rotation-first,
  ``(wx, wy, wz, tx, ty, tz)``: the first three entries form the rotation
  vector fed to the SO(3) exponential, the last three the translation
  increment (meters). Pose updates are right-multiplicative,
  ``q * exp(xi)``.
- Bearings live on the unit sphere; their local differences live in a 2D
  chart whose axes are azimuth-like and zenith-like, in that order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.fmod(a + math.pi, TWO_PI)
    if w <= 0.0:
        w += TWO_PI
    return w - math.pi


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that skew(v) @ u == cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula: rotation matrix for a rotation vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        # second-order series keeps orthonormality to machine precision here
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix (inverse of so3_exp)."""
    trace = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = math.acos(trace)
    if theta < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
    if math.pi - theta < 1e-6:
        # near pi the antisymmetric part degenerates; recover axis from diagonal
        diag = np.diag(R)
        k = int(np.argmax(diag))
        axis = np.zeros(3)
        axis[k] = math.sqrt(max(0.0, (diag[k] + 1.0) * 0.5))
        for j in range(3):
            if j != k:
                axis[j] = (R[k, j] + R[j, k]) / (4.0 * axis[k])
        axis /= np.linalg.norm(axis)
        return axis * theta
    return theta / (2.0 * math.sin(theta)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    """V(w) such that the exact SE(3) exponential translation is V(w) @ t."""
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    a = (1.0 - math.cos(theta)) / t2
    b = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * K + b * (K @ K)


def rot_from_heading(theta: float) -> np.ndarray:
    """Rotation about the world z-axis by a heading angle."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_zyx_from_rotation(R: np.ndarray) -> tuple[float, float, float]:
    """(yaw, pitch, roll) of R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    pitch = math.asin(np.clip(-R[2, 0], -1.0, 1.0))
    yaw = math.atan2(R[1, 0], R[0, 0])
    roll = math.atan2(R[2, 1], R[2, 2])
    return yaw, pitch, roll


def rotation_from_euler_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


@dataclass(frozen=True)
class Pose3:
    """Rigid transform: world-from-body rotation plus world-frame translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @staticmethod
    def identity() -> "Pose3":
        return Pose3(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose3":
        Rt = self.rotation.T
        return Pose3(Rt, -(Rt @ self.translation))

    def transform(self, point: np.ndarray) -> np.ndarray:
        """Map a body-frame point into the world frame."""
        return self.rotation @ np.asarray(point, dtype=float) + self.translation

    def rotate(self, vec: np.ndarray) -> np.ndarray:
        """Rotate a free vector from body to world (no translation)."""
        return self.rotation @ np.asarray(vec, dtype=float)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose3":
        return Pose3(np.array(T[:3, :3], dtype=float), np.array(T[:3, 3], dtype=float))


def se3_exp(xi: np.ndarray) -> Pose3:
    """Exact exponential map from a 6-vector tangent to a pose.

    ``xi[:3]`` is the rotation vector, ``xi[3:]`` the translation increment;
    for small rotations the result agrees with the first-order homogeneous
    update ``[[I + skew(w), t], [0, 1]]`` to second order.
    """
    xi = np.asarray(xi, dtype=float)
    w, t = xi[:3], xi[3:]
    return Pose3(so3_exp(w), _so3_left_jacobian(w) @ t)


def se3_log(p: Pose3) -> np.ndarray:
    """Inverse of se3_exp."""
    w = so3_log(p.rotation)
    V = _so3_left_jacobian(w)
    return np.concatenate([w, np.linalg.solve(V, p.translation)])


def pose_local_update(q: Pose3, xi: np.ndarray) -> Pose3:
    """Right-multiplicative retraction: q composed with se3_exp(xi)."""
    return q.compose(se3_exp(xi))


def unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def sphere_tangent_basis(b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal (azimuth-like, zenith-like) basis of the tangent plane at b.

    The azimuth axis is horizontal (z cross b) whenever b is not vertical;
    for vertical b the x axis is used so the chart stays well defined.
    """
    b = np.asarray(b, dtype=float)
    az = np.array([-b[1], b[0], 0.0])
    n = np.linalg.norm(az)
    if n < 1e-12:
        az = np.array([1.0, 0.0, 0.0])
    else:
        az = az / n
    zen = np.cross(b, az)
    return az, zen


def bearing_boxminus(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Local-chart difference of two unit bearings, anchored at b.

    The result is a 2-vector in the (azimuth-like, zenith-like) chart at b
    whose norm equals the angle between a and b. Antipodal inputs map to the
    chart boundary [pi, 0].
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = float(np.clip(np.dot(a, b), -1.0, 1.0))
    angle = math.acos(d)
    c = a - d * b
    nc = np.linalg.norm(c)
    if nc < 1e-15:
        if d > 0.0:
            return np.zeros(2)
        return np.array([math.pi, 0.0])
    e_az, e_zen = sphere_tangent_basis(b)
    u = c / nc
    return angle * np.array([np.dot(e_az, u), np.dot(e_zen, u)])


def bearing_boxplus(b: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Inverse of bearing_boxminus: move b along a chart increment."""
    b = np.asarray(b, dtype=float)
    delta = np.asarray(delta, dtype=float)
    angle = np.linalg.norm(delta)
    if angle < 1e-15:
        return b.copy()
    e_az, e_zen = sphere_tangent_basis(b)
    u = (delta[0] * e_az + delta[1] * e_zen) / angle
    return math.cos(angle) * b + math.sin(angle) * u
