"""Planar poses, rigid transforms, angle arithmetic and fixed-rate pose sequences.

Headings are stored unwrapped (cumulative) within a track so recurrent
inputs stay continuous across the +/-pi seam; call :func:`wrap_angle` when
an angular residual is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    wrapped = np.asarray(theta, dtype=np.float64)
    wrapped = (wrapped + math.pi) % TWO_PI - math.pi
    wrapped = np.where(wrapped == -math.pi, math.pi, wrapped)
    if np.ndim(theta) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Pose:
    """Planar position (m) plus heading (rad)."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError(f"non-finite pose ({self.x}, {self.y}, {self.theta})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=np.float64)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


ZERO_POSE = Pose(0.0, 0.0, 0.0)


def _as_pose_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"pose data must be (n, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError("pose sequence must contain at least one pose")
    if not np.all(np.isfinite(arr)):
        raise ValueError("pose data contains non-finite values")
    return arr


@dataclass(frozen=True)
class PoseSequence:
    """Uniformly sampled pose sequence; timestamps are implied by index."""

    data: np.ndarray
    dt: float

    def __post_init__(self):
        arr = _as_pose_array(self.data).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        if not (self.dt > 0.0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive and finite, got {self.dt}")

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, i: int) -> Pose:
        x, y, theta = self.data[i]
        return Pose(float(x), float(y), float(theta))

    @property
    def positions(self) -> np.ndarray:
        return self.data[:, :2]

    @property
    def headings(self) -> np.ndarray:
        return self.data[:, 2]

    @property
    def duration(self) -> float:
        return (len(self) - 1) * self.dt

    def allclose(self, other: "PoseSequence", tol: float = 1e-9) -> bool:
        return (
            self.data.shape == other.data.shape
            and abs(self.dt - other.dt) <= tol
            and bool(np.all(np.abs(self.data - other.data) <= tol))
        )


@dataclass(frozen=True)
class RigidTransform:
    """Planar rigid map p -> R(rotation) p + translation; headings shift by rotation."""

    translation: tuple = (0.0, 0.0)
    rotation: float = 0.0
    _matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        m = np.array([[c, -s], [s, c]], dtype=np.float64)
        m.flags.writeable = False
        object.__setattr__(self, "_matrix", m)

    def apply_pose(self, pose: Pose) -> Pose:
        px, py = self._matrix @ pose.position + np.asarray(self.translation)
        return Pose(float(px), float(py), pose.theta + self.rotation)

    def apply_array(self, data: np.ndarray) -> np.ndarray:
        out = np.empty_like(data)
        out[:, :2] = data[:, :2] @ self._matrix.T + np.asarray(self.translation)
        out[:, 2] = data[:, 2] + self.rotation
        return out

    def apply_sequence(self, seq: PoseSequence) -> PoseSequence:
        return PoseSequence(self.apply_array(seq.data), seq.dt)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Returns the transform equivalent to applying `other` first, then self."""
        t = self._matrix @ np.asarray(other.translation) + np.asarray(self.translation)
        return RigidTransform((float(t[0]), float(t[1])), self.rotation + other.rotation)

    def inverse(self) -> "RigidTransform":
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        tx, ty = self.translation
        return RigidTransform((float(-(c * tx - s * ty)), float(-(s * tx + c * ty))), -self.rotation)

    @staticmethod
    def to_frame_of(origin: Pose) -> "RigidTransform":
        """World -> frame anchored at `origin` (origin maps to the zero pose)."""
        c, s = math.cos(-origin.theta), math.sin(-origin.theta)
        tx = -(c * origin.x - s * origin.y)
        ty = -(s * origin.x + c * origin.y)
        return RigidTransform((float(tx), float(ty)), -origin.theta)


def to_ego_frame(seq: PoseSequence, origin: Pose) -> PoseSequence:
    """Express `seq` relative to `origin` (translate by -origin, rotate by -origin.theta).

    Headings are shifted by -origin.theta without wrapping, preserving
    continuity of unwrapped heading tracks.
    """
    return RigidTransform.to_frame_of(origin).apply_sequence(seq)


def from_ego_frame(seq: PoseSequence, origin: Pose) -> PoseSequence:
    """Inverse of :func:`to_ego_frame`."""
    return RigidTransform.to_frame_of(origin).inverse().apply_sequence(seq)


def ego_array(data: np.ndarray, origin_row: np.ndarray) -> np.ndarray:
    """Array fast path of :func:`to_ego_frame` for (n, 3) pose blocks."""
    origin = Pose(float(origin_row[0]), float(origin_row[1]), float(origin_row[2]))
    return RigidTransform.to_frame_of(origin).apply_array(np.asarray(data, dtype=np.float64))


def resample(seq: PoseSequence, factor: int) -> PoseSequence:
    """Keep every `factor`-th pose counting backward from the last pose.

    The final (current) pose is always retained; output dt scales by `factor`.
    """
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"resample factor must be a positive integer, got {factor!r}")
    n = len(seq)
    start = (n - 1) % factor
    return PoseSequence(seq.data[start::factor], seq.dt * factor)


def resample_indices(n: int, factor: int) -> np.ndarray:
    """Index set used by :func:`resample` on a length-n sequence."""
    if factor < 1:
        raise ValueError(f"resample factor must be a positive integer, got {factor!r}")
    return np.arange((n - 1) % factor, n, factor)
