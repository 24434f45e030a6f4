"""Shared geometric and vector primitives.

Conventions used throughout the package:

* Rigid transforms are stored as a rotation matrix plus a translation in
  meters.  ``pose.apply(p)`` computes ``R @ p + t``.
* The vertical axis is z.  Yaw is the rotation about z, extracted from the
  first column of the rotation matrix, and always reported in degrees
  wrapped to ``(-180, 180]``.
* Descriptors are plain float64 numpy arrays; unit length is the normal
  state and :func:`l2_normalize` is the single place that enforces it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

ZERO_NORM_EPS = 1e-12
ROTATION_TOL = 1e-9


def _as_float_array(value, shape: tuple[int, ...], name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform: ``p_out = rotation @ p_in + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = _as_float_array(self.rotation, (3, 3), "rotation")
        trans = _as_float_array(self.translation, (3,), "translation")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=ROTATION_TOL, rtol=0.0):
            raise ValueError("rotation is not orthonormal")
        if abs(float(np.linalg.det(rot)) - 1.0) > ROTATION_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """Return ``self ∘ other`` (apply ``other`` first, then ``self``)."""
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "PoseSE3":
        rot_inv = self.rotation.T
        return PoseSE3(rot_inv, -rot_inv @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a single 3-vector or an (N, 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "PoseSE3":
        mat = _as_float_array(mat, (4, 4), "matrix")
        return cls(mat[:3, :3], mat[:3, 3])

    @classmethod
    def from_quaternion(cls, translation, quat_xyzw) -> "PoseSE3":
        """Build a pose from a translation and an x-y-z-w unit quaternion."""
        from scipy.spatial.transform import Rotation

        quat = np.asarray(quat_xyzw, dtype=np.float64)
        if quat.shape != (4,):
            raise ValueError(f"quaternion must have 4 entries, got {quat.shape}")
        norm = float(np.linalg.norm(quat))
        if norm < ZERO_NORM_EPS:
            raise ValueError("zero-norm quaternion")
        return cls(Rotation.from_quat(quat / norm).as_matrix(), np.asarray(translation))

    def quaternion_xyzw(self) -> np.ndarray:
        from scipy.spatial.transform import Rotation

        return Rotation.from_matrix(self.rotation).as_quat()


def rotation_about_z(angle_deg: float) -> np.ndarray:
    """Rotation matrix for a yaw of ``angle_deg`` degrees about z."""
    angle = math.radians(angle_deg)
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics plus the camera-from-LiDAR extrinsic."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_from_lidar: PoseSE3 = field(default_factory=PoseSE3.identity)

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


def l2_normalize(vec: np.ndarray) -> tuple[np.ndarray, bool]:
    """Scale ``vec`` to unit length.

    Returns ``(unit_vector, zero_norm)``.  A vector with norm below
    ``ZERO_NORM_EPS`` is returned unchanged with the flag set; the caller
    decides how to handle it (fusion drops the point, indexing rejects it).
    """
    arr = np.asarray(vec, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot normalize non-finite vector")
    norm = float(np.linalg.norm(arr))
    if norm < ZERO_NORM_EPS:
        return arr, True
    return arr / norm, False


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    Inputs are normalized internally, so callers may pass unnormalized
    vectors; zero-norm inputs yield similarity 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    ua, zero_a = l2_normalize(a)
    ub, zero_b = l2_normalize(b)
    if zero_a or zero_b:
        return 0.0
    return float(np.clip(np.dot(ua, ub), -1.0, 1.0))


def se3_relative(pose_a: PoseSE3, pose_b: PoseSE3) -> PoseSE3:
    """Relative transform ``pose_a⁻¹ ∘ pose_b`` (pose_b expressed in frame a)."""
    return pose_a.inverse().compose(pose_b)


def wrap_angle_deg(angle_deg: float) -> float:
    """Wrap an angle in degrees to the interval (-180, 180]."""
    wrapped = math.fmod(angle_deg, 360.0)
    if wrapped > 180.0:
        wrapped -= 360.0
    elif wrapped <= -180.0:
        wrapped += 360.0
    return wrapped


def yaw_from_rotation(rotation: np.ndarray) -> float:
    """Yaw about z in degrees, wrapped to (-180, 180]."""
    rot = np.asarray(rotation, dtype=np.float64)
    if rot.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rot.shape}")
    return wrap_angle_deg(math.degrees(math.atan2(rot[1, 0], rot[0, 0])))


class Projection(NamedTuple):
    u: float
    v: float
    depth: float
    valid: bool


MIN_PROJECTION_DEPTH = 1e-6


def project_to_image(point: np.ndarray, intrinsics: CameraIntrinsics) -> Projection:
    """Project a camera-frame point to pixels.

    ``valid`` is False for points at or behind the camera plane
    (z <= 1e-6) and for projections outside ``[0, width) x [0, height)``.
    """
    pt = _as_float_array(point, (3,), "point")
    x, y, z = pt
    if z <= MIN_PROJECTION_DEPTH:
        return Projection(math.nan, math.nan, float(z), False)
    u = intrinsics.fx * x / z + intrinsics.cx
    v = intrinsics.fy * y / z + intrinsics.cy
    in_bounds = 0.0 <= u < intrinsics.width and 0.0 <= v < intrinsics.height
    return Projection(float(u), float(v), float(z), bool(in_bounds))


def project_points(
    points: np.ndarray, intrinsics: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) camera-frame points.

    Returns ``(uv, depth, valid)`` where invalid rows of ``uv`` are NaN.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    depth = pts[:, 2].copy()
    in_front = depth > MIN_PROJECTION_DEPTH
    uv = np.full((len(pts), 2), np.nan)
    safe_z = np.where(in_front, depth, 1.0)
    uv[:, 0] = np.where(in_front, intrinsics.fx * pts[:, 0] / safe_z + intrinsics.cx, np.nan)
    uv[:, 1] = np.where(in_front, intrinsics.fy * pts[:, 1] / safe_z + intrinsics.cy, np.nan)
    with np.errstate(invalid="ignore"):
        in_bounds = (
            (uv[:, 0] >= 0.0)
            & (uv[:, 0] < intrinsics.width)
            & (uv[:, 1] >= 0.0)
            & (uv[:, 1] < intrinsics.height)
        )
    return uv, depth, in_front & in_bounds


def unproject_pixel(u: float, v: float, depth: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Back-project a pixel at a known depth into the camera frame."""
    if depth <= 0:
        raise ValueError("depth must be positive")
    return np.array(
        [
            (u - intrinsics.cx) / intrinsics.fx * depth,
            (v - intrinsics.cy) / intrinsics.fy * depth,
            depth,
        ]
    )
