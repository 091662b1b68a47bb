"""Coordinate systems, camera model, and the anchor observation model.

World frame is right-handed with z up and origin on the ground plane.
Anchor boresight is local +x; azimuth is measured in the local x-y plane
and elevation from that plane, matching the (radial, azimuth, elevation)
measurement ordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadBox, DegeneratePoint

Vec3 = np.ndarray  # shape (3,), float64


@dataclass(frozen=True)
class PolarMeasurement:
    """One anchor-frame observation (radial m, azimuth rad, elevation rad)."""

    radial: float
    azimuth: float
    elevation: float

    def as_array(self) -> np.ndarray:
        return np.array([self.radial, self.azimuth, self.elevation])


@dataclass(frozen=True)
class AnchorPose:
    """Anchor position (world, m) and orientation as intrinsic Z-Y-X Euler angles (rad)."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float))

    def rotation(self) -> np.ndarray:
        """Local->world rotation matrix built from the Euler angles."""
        return rotation_zyx(self.orientation)


@dataclass(frozen=True)
class CameraIntrinsics:
    f_x: float
    f_y: float
    c_x: float
    c_y: float


@dataclass(frozen=True)
class CameraExtrinsics:
    """World->camera rigid transform: p_cam = rotation @ p_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("extrinsic rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("extrinsic rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class HeadDetection:
    """One head bounding box on the image plane."""

    timestamp: float
    tracklet_id: str
    u: float
    v: float
    w_p: float
    h_p: float = 0.0


def rotation_zyx(angles) -> np.ndarray:
    """Rotation matrix for intrinsic Z-Y-X (yaw, pitch, roll) Euler angles."""
    yaw, pitch, roll = (float(a) for a in angles)
    cz, sz = math.cos(yaw), math.sin(yaw)
    cy, sy = math.cos(pitch), math.sin(pitch)
    cx, sx = math.cos(roll), math.sin(roll)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return rz @ ry @ rx


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    wrapped = np.mod(-np.asarray(a) + np.pi, 2.0 * np.pi)
    return -(wrapped - np.pi)


def world_to_anchor_polar(p: Vec3, pose: AnchorPose) -> PolarMeasurement:
    """Observation model: world point -> (radial, azimuth, elevation) in the anchor frame."""
    p = np.asarray(p, dtype=float)
    local = pose.rotation().T @ (p - pose.position)
    r = float(np.linalg.norm(local))
    if r < 1e-9:
        raise DegeneratePoint("point coincides with the anchor position")
    az = math.atan2(local[1], local[0])
    el = math.asin(np.clip(local[2] / r, -1.0, 1.0))
    return PolarMeasurement(r, az, el)


def world_to_anchor_polar_batch(points: np.ndarray, pose: AnchorPose) -> np.ndarray:
    """Vectorized observation model over an (N, 3) array; returns (N, 3)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    local = (pts - pose.position) @ pose.rotation()
    r = np.linalg.norm(local, axis=1)
    if np.any(r < 1e-9):
        raise DegeneratePoint("a point coincides with the anchor position")
    az = np.arctan2(local[:, 1], local[:, 0])
    el = np.arcsin(np.clip(local[:, 2] / r, -1.0, 1.0))
    return np.column_stack([r, az, el])


def anchor_polar_to_world(z: PolarMeasurement, pose: AnchorPose) -> Vec3:
    """Inverse observation model: polar measurement -> world point."""
    ce = math.cos(z.elevation)
    local = z.radial * np.array(
        [ce * math.cos(z.azimuth), ce * math.sin(z.azimuth), math.sin(z.elevation)]
    )
    return pose.rotation() @ local + pose.position


def head_box_to_world(
    det: HeadDetection,
    intr: CameraIntrinsics,
    extr: CameraExtrinsics,
    w_r: float,
) -> Vec3:
    """Back-project a head box to a world point using depth = f_x * w_r / w_p."""
    if det.w_p <= 0:
        raise BadBox(f"non-positive box width {det.w_p}")
    d = intr.f_x * w_r / det.w_p
    cam = np.array(
        [(det.u - intr.c_x) * d / intr.f_x, (det.v - intr.c_y) * d / intr.f_y, d]
    )
    return extr.rotation.T @ (cam - extr.translation)


def project_to_pixel(p: Vec3, intr: CameraIntrinsics, extr: CameraExtrinsics):
    """World point -> (u, v, depth); depth <= 0 means behind the camera."""
    cam = extr.rotation @ np.asarray(p, dtype=float) + extr.translation
    d = cam[2]
    if d <= 1e-9:
        return None
    u = intr.c_x + intr.f_x * cam[0] / d
    v = intr.c_y + intr.f_y * cam[1] / d
    return u, v, d


def look_at_extrinsics(position: Vec3, target: Vec3) -> CameraExtrinsics:
    """Camera extrinsics for a camera at `position` looking at `target`.

    Camera convention: +z optical axis, +x right, +y down (image v grows down).
    """
    position = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - position
    fwd = fwd / np.linalg.norm(fwd)
    world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, world_up)
    n = np.linalg.norm(right)
    if n < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / n
    down = np.cross(fwd, right)
    R = np.vstack([right, down, fwd])  # rows are camera axes in world coords
    t = -R @ position
    return CameraExtrinsics(rotation=R, translation=t)
