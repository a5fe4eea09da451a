"""Ground-truth plant: a free-flying pinhole camera observing fixed 3-D points.

The camera pose is stored as (position, unit quaternion) with the quaternion
mapping camera-frame vectors into the world frame. Velocity commands are
camera-frame twists integrated with the exact SE(3) exponential (screw
motion), so repeated small steps and one large step agree for a constant
twist.

Pixel convention: u grows to the right, v grows downward, origin at the
top-left corner; the optical axis is +Z in the camera frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import NonPositiveDepth

if TYPE_CHECKING:
    from .scenario import Scenario

DEPTH_EPSILON = 1e-6  # meters; Z at or below this aborts projection


def _unit_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    norm = float(np.linalg.norm(q))
    if not math.isfinite(norm) or norm < 1e-12:
        raise ValueError("quaternion must be non-zero and finite")
    return q / norm


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, components ordered (w, x, y, z)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_from_rotvec(w: np.ndarray) -> np.ndarray:
    """Unit quaternion for a rotation vector (axis * angle, radians)."""
    w = np.asarray(w, dtype=float).reshape(3)
    angle = float(np.linalg.norm(w))
    if angle < 1e-12:
        # First-order expansion; renormalized below anyway.
        q = np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]])
    else:
        half = 0.5 * angle
        s = math.sin(half) / angle
        q = np.array([math.cos(half), s * w[0], s * w[1], s * w[2]])
    return q / np.linalg.norm(q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    """V(w) coupling translation and rotation in the SE(3) exponential."""
    angle = float(np.linalg.norm(w))
    wx = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if angle < 1e-8:
        return np.eye(3) + 0.5 * wx + wx @ wx / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        + ((1.0 - math.cos(angle)) / a2) * wx
        + ((angle - math.sin(angle)) / (a2 * angle)) * (wx @ wx)
    )


@dataclass(frozen=True)
class CameraPose:
    """Camera pose in the world frame; quaternion rotates camera->world."""

    position: np.ndarray
    quaternion: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "quaternion", _unit_quaternion(self.quaternion))

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))


@dataclass(frozen=True)
class Twist:
    """Camera-frame velocity: linear (m/s) stacked before angular (rad/s)."""

    linear: np.ndarray
    angular: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "linear", np.asarray(self.linear, dtype=float).reshape(3))
        object.__setattr__(self, "angular", np.asarray(self.angular, dtype=float).reshape(3))
        if not (np.all(np.isfinite(self.linear)) and np.all(np.isfinite(self.angular))):
            raise ValueError("twist components must be finite")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])

    @staticmethod
    def from_vector(v: Sequence[float]) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return Twist(v[:3], v[3:])

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fu: float
    fv: float
    cu: float
    cv: float
    width: int
    height: int

    def __post_init__(self):
        if self.fu <= 0 or self.fv <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cu < self.width and 0 < self.cv < self.height):
            raise ValueError("principal point must lie inside the image")


def project(points3d: np.ndarray, pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """Project world points to stacked pixel coordinates (u1, v1, u2, v2, ...).

    Raises NonPositiveDepth if any point is at or behind the camera plane.
    """
    pts = np.atleast_2d(np.asarray(points3d, dtype=float))
    rel = pts - pose.position
    cam = rel @ pose.rotation()  # == R^T @ rel, per point
    z = cam[:, 2]
    if np.any(z <= DEPTH_EPSILON):
        raise NonPositiveDepth(f"minimum depth {z.min():.3g} m <= {DEPTH_EPSILON:g} m")
    out = np.empty(2 * len(pts))
    out[0::2] = intr.fu * cam[:, 0] / z + intr.cu
    out[1::2] = intr.fv * cam[:, 1] / z + intr.cv
    return out


def integrate_twist(pose: CameraPose, v: Twist, dt: float) -> CameraPose:
    """Advance the pose by the SE(3) exponential of the camera-frame twist v*dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    w = v.angular * dt
    delta_p_cam = _so3_left_jacobian(w) @ (v.linear * dt)
    new_position = pose.position + pose.rotation() @ delta_p_cam
    new_quaternion = quat_multiply(pose.quaternion, quat_from_rotvec(w))
    return CameraPose(new_position, new_quaternion)


def measure(scenario: "Scenario", pose: CameraPose) -> np.ndarray:
    """Plant output: pixel features of the scenario's target points at this pose."""
    return project(scenario.points3d, pose, scenario.intrinsics)


def feature_depths(scenario: "Scenario", pose: CameraPose) -> np.ndarray:
    """Camera-frame Z coordinate of each tracked point (may be non-positive)."""
    rel = np.atleast_2d(scenario.points3d) - pose.position
    return rel @ pose.rotation()[:, 2]
