"""Small geometry kit: unit quaternions, axis-aligned boxes, vector helpers.

Quaternions are (w, x, y, z) tuples or arrays and always describe the
body-to-world rotation. World frame is right-handed, z-up, water surface
at z = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Vec3 = tuple[float, float, float]
Quat = tuple[float, float, float, float]

IDENTITY_QUAT: Quat = (1.0, 0.0, 0.0, 0.0)


def vec3(v) -> Vec3:
    x, y, z = v
    return (float(x), float(y), float(z))


def quat_normalize(q) -> Quat:
    w, x, y, z = q
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return (w / n, x / n, y / n, z / n)


def quat_multiply(a, b) -> Quat:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def quat_conjugate(q) -> Quat:
    w, x, y, z = q
    return (w, -x, -y, -z)


def quat_from_rotvec(r) -> Quat:
    """Exponential map: rotation vector (axis * angle, rad) to quaternion."""
    rx, ry, rz = float(r[0]), float(r[1]), float(r[2])
    angle = math.sqrt(rx * rx + ry * ry + rz * rz)
    if angle < 1e-12:
        # second-order small-angle expansion keeps the map smooth near zero
        half = 0.5 - angle * angle / 48.0
        return quat_normalize((1.0 - angle * angle / 8.0, rx * half, ry * half, rz * half))
    s = math.sin(angle / 2.0) / angle
    return (math.cos(angle / 2.0), rx * s, ry * s, rz * s)


def quat_to_matrix(q) -> np.ndarray:
    """3x3 rotation matrix (body -> world) of a unit quaternion."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_rotate(q, v) -> np.ndarray:
    """Rotate a 3-vector from body frame to world frame."""
    return quat_to_matrix(q) @ np.asarray(v, dtype=float)


def quat_rotate_inverse(q, v) -> np.ndarray:
    """Rotate a 3-vector from world frame to body frame."""
    return quat_to_matrix(q).T @ np.asarray(v, dtype=float)


def quat_yaw(q) -> float:
    """Heading about world z, radians in (-pi, pi]."""
    w, x, y, z = q
    return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    return math.atan2(math.sin(a), math.cos(a))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, min corner inclusive, max corner exclusive for keying."""

    min: Vec3
    max: Vec3

    def __post_init__(self):
        for lo, hi in zip(self.min, self.max):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError("box corners must be finite")
            if hi <= lo:
                raise ValueError(f"degenerate box: {self.min} .. {self.max}")

    def contains(self, p) -> bool:
        return all(lo <= float(c) < hi for lo, c, hi in zip(self.min, p, self.max))

    @property
    def size(self) -> Vec3:
        return tuple(hi - lo for lo, hi in zip(self.min, self.max))

    def to_json(self) -> dict:
        return {"min": list(self.min), "max": list(self.max)}

    @staticmethod
    def from_json(obj: dict) -> "Box":
        return Box(vec3(obj["min"]), vec3(obj["max"]))
