"""Shared geometry, time, and state types.

World frame convention (used everywhere): x-east, y-north, z-up. Gravity
acts along -z; the gravity constant used in the kinematic equations is
g = [0, 0, 9.8] (the accelerometer's reaction when static). Motion is
planar: robot and tag positions keep z = 0 by construction.

Bearing convention: an AoA is measured counterclockwise from the antenna
array's local x-axis, and the array's x-axis is aligned with the robot
heading. A heading psi therefore maps a body bearing theta to the world
bearing theta + psi.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

GRAVITY = np.array([0.0, 0.0, 9.8])


def wrap_pi(angle: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def wrap_2pi(angle: float) -> float:
    """Wrap an angle to [0, 2*pi)."""
    return angle % (2.0 * math.pi)


def angle_diff(a: float, b: float) -> float:
    """Signed wrapped difference a - b in [-pi, pi)."""
    return wrap_pi(a - b)


@dataclass(frozen=True)
class Vec3:
    """Immutable 3-vector in meters (or m/s, m/s^2 per context)."""

    x: float
    y: float
    z: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError(f"non-finite Vec3 components: {self}")

    @staticmethod
    def zero() -> "Vec3":
        return Vec3(0.0, 0.0, 0.0)

    @staticmethod
    def from_array(a) -> "Vec3":
        a = np.asarray(a, dtype=float)
        return Vec3(float(a[0]), float(a[1]), float(a[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def __add__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x - other.x, self.y - other.y, self.z - other.z)

    def __mul__(self, s: float) -> "Vec3":
        return Vec3(self.x * s, self.y * s, self.z * s)

    __rmul__ = __mul__

    def dot(self, other: "Vec3") -> float:
        return self.x * other.x + self.y * other.y + self.z * other.z

    def norm(self) -> float:
        return math.sqrt(self.dot(self))


@dataclass(frozen=True)
class Rot:
    """Planar rotation about the world z-axis, stored as a heading angle.

    The derived 3x3 matrix is a proper rotation (orthonormal, det +1).
    Composition and inversion stay exact because only the scalar heading
    is integrated; there is no drift from repeated matrix products.
    """

    psi: float

    def __post_init__(self):
        object.__setattr__(self, "psi", wrap_pi(self.psi))

    @staticmethod
    def identity() -> "Rot":
        return Rot(0.0)

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.psi), math.sin(self.psi)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def compose(self, other: "Rot") -> "Rot":
        return Rot(self.psi + other.psi)

    def inverse(self) -> "Rot":
        return Rot(-self.psi)

    def apply(self, v: Vec3) -> Vec3:
        c, s = math.cos(self.psi), math.sin(self.psi)
        return Vec3(c * v.x - s * v.y, s * v.x + c * v.y, v.z)


def rotate(r: Rot, v: Vec3) -> Vec3:
    """Rotate v by r. Preserves the Euclidean norm."""
    return r.apply(v)


def cross(a: Vec3, b: Vec3) -> Vec3:
    """Standard cross product a x b."""
    return Vec3(
        a.y * b.z - a.z * b.y,
        a.z * b.x - a.x * b.z,
        a.x * b.y - a.y * b.x,
    )


class TagStatus(enum.Enum):
    UNLOCALIZED = "unlocalized"
    ACTIVE = "active"
    FROZEN = "frozen"


# Legal status transitions: forward only, frozen is terminal.
_STATUS_ORDER = {TagStatus.UNLOCALIZED: 0, TagStatus.ACTIVE: 1, TagStatus.FROZEN: 2}


@dataclass(frozen=True)
class RobotState:
    """Robot hidden state at one timestamp: position, velocity, heading.

    Velocity is expressed in the body frame. z components of position and
    velocity are exactly 0 (planar motion).
    """

    id: int
    t: float
    position: Vec3
    velocity: Vec3
    rotation: Rot

    def __post_init__(self):
        if self.position.z != 0.0 or self.velocity.z != 0.0:
            raise ValueError("planar state requires z == 0 for position and velocity")
        if self.t < 0.0:
            raise ValueError("negative timestamp")

    def with_position(self, p: Vec3) -> "RobotState":
        return RobotState(self.id, self.t, p, self.velocity, self.rotation)


@dataclass(frozen=True)
class TagState:
    """Estimated position and lifecycle status of one backscatter tag."""

    tag_id: int
    position: Vec3
    last_observed: float
    status: TagStatus = TagStatus.UNLOCALIZED

    def __post_init__(self):
        if self.position.z != 0.0:
            raise ValueError("tag position must be planar (z == 0)")

    def advanced(self, status: TagStatus) -> "TagState":
        if _STATUS_ORDER[status] < _STATUS_ORDER[self.status]:
            raise ValueError(f"illegal tag status transition {self.status} -> {status}")
        return TagState(self.tag_id, self.position, self.last_observed, status)

    def with_position(self, p: Vec3) -> "TagState":
        if self.status is TagStatus.FROZEN:
            raise ValueError("frozen tag positions never change")
        return TagState(self.tag_id, p, self.last_observed, self.status)

    def observed_at(self, t: float) -> "TagState":
        return TagState(self.tag_id, self.position, t, self.status)
