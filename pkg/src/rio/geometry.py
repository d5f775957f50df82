"""Rigid transforms and rotation helpers shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-6


class DegenerateInputError(ValueError):
    """Raised when a geometric solve has no unique answer (too few / collinear points)."""


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    return a


def is_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.linalg.norm(R.T @ R - np.eye(3)) < tol and np.linalg.det(R) > 0)


@dataclass(frozen=True)
class RigidPose:
    """Rotation plus translation, acting as ``x -> R @ x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not is_rotation(R):
            raise ValueError("rotation is not a proper orthonormal matrix")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "RigidPose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "RigidPose":
        Rt = self.rotation.T
        return RigidPose(Rt, -Rt @ self.translation)

    def to_dict(self) -> dict:
        return {"rotation": [float(x) for x in self.rotation.ravel()],
                "translation": [float(x) for x in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidPose":
        return cls(np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3), d["translation"])

    def __eq__(self, other):
        if not isinstance(other, RigidPose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation)
                    and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    k = _as_vec3(axis)
    n = np.linalg.norm(k)
    if n == 0:
        raise ValueError("rotation axis must be non-zero")
    k = k / n
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix.

    Uses atan2 of the skew and trace parts so small angles keep full precision.
    """
    R = np.asarray(R, dtype=np.float64)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(s, c))


def rot_x(deg: float) -> np.ndarray:
    return axis_angle_matrix([1, 0, 0], np.deg2rad(deg))


def rot_y(deg: float) -> np.ndarray:
    return axis_angle_matrix([0, 1, 0], np.deg2rad(deg))


def rot_z(deg: float) -> np.ndarray:
    return axis_angle_matrix([0, 0, 1], np.deg2rad(deg))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a random unit quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def cube_rotations() -> list[np.ndarray]:
    """The 24 proper rotations mapping the coordinate axes onto themselves."""
    mats = []
    for perm in ([0, 1, 2], [1, 2, 0], [2, 0, 1], [0, 2, 1], [2, 1, 0], [1, 0, 2]):
        for signs in np.ndindex(2, 2, 2):
            M = np.zeros((3, 3))
            for row, col in enumerate(perm):
                M[row, col] = -1.0 if signs[row] else 1.0
            if np.linalg.det(M) > 0:
                mats.append(M)
    return mats
