"""Camera extrinsics/intrinsics: look-at construction and pinhole projection.

Conventions: world frame is z-up, metric. The camera frame is z-forward,
x-right, y-down, so pixel coordinates follow directly from projection with
no axis flip: u grows right, v grows toward world-down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegenerateUp

# Points closer than this are treated as behind the camera to keep the
# perspective divide well conditioned.
DEFAULT_NEAR = 0.05

# Used when the viewing direction is parallel to the requested up vector
# (top-down views).
FALLBACK_UP = (0.0, 1.0, 0.0)

_PARALLEL_EPS = 1e-6


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera transform: ``p_cam = rotation @ p_world + translation``.

    ``rotation`` rows are the camera x/y/z axes expressed in world
    coordinates; it is orthonormal with determinant +1.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        residual = np.abs(rot.T @ rot - np.eye(3)).max()
        if residual > 1e-9:
            raise ValueError(f"rotation is not orthonormal (residual {residual:g})")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world-frame points (N, 3) or (3,) into the camera frame.

        Each component is evaluated as ``((r0*x + r1*y) + r2*z) + t`` with
        elementwise operations rather than a matrix product: reductions such
        as ``@`` may regroup sums, and the renderer's depth buffers are
        contractually bit-reproducible.
        """
        pts = np.asarray(points, dtype=np.float64)
        x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
        rot, trans = self.rotation, self.translation
        return np.stack(
            [rot[i, 0] * x + rot[i, 1] * y + rot[i, 2] * z + trans[i] for i in range(3)],
            axis=-1,
        )


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")


@dataclass(frozen=True)
class Projection:
    """Continuous pixel coordinates plus camera-frame forward distance."""

    pixel: tuple[float, float]
    depth: float


def look_at_view_transform(eye, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Build the camera pose for an eye position looking at a target point.

    Camera axes: forward z = normalize(target - eye), right x = normalize(z x up),
    down y = z x x. Raises :class:`DegenerateUp` when forward is parallel to
    ``up``; callers retry with :data:`FALLBACK_UP`.
    """
    eye = np.asarray(eye, dtype=np.float64).reshape(3)
    target = np.asarray(target, dtype=np.float64).reshape(3)
    up = np.asarray(up, dtype=np.float64).reshape(3)

    forward = target - eye
    dist = np.linalg.norm(forward)
    if dist <= _PARALLEL_EPS:
        raise ValueError("eye and target coincide")
    if np.linalg.norm(up) == 0.0:
        raise ValueError("up vector is zero")

    z_cam = forward / dist
    x_cam = np.cross(z_cam, up)
    x_norm = np.linalg.norm(x_cam)
    if x_norm < _PARALLEL_EPS:
        raise DegenerateUp("degenerate up")
    x_cam /= x_norm
    y_cam = np.cross(z_cam, x_cam)

    rotation = np.stack([x_cam, y_cam, z_cam])
    translation = -rotation @ eye
    return CameraPose(rotation, translation)


def look_at_or_fallback(eye, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """look_at_view_transform, retrying with the fallback up for top-down views."""
    try:
        return look_at_view_transform(eye, target, up)
    except DegenerateUp:
        return look_at_view_transform(eye, target, FALLBACK_UP)


def intrinsics_from_fov(fov_deg: float, width: int, height: int) -> Intrinsics:
    """Square-pixel intrinsics from a vertical field of view in degrees."""
    if not 0.0 < fov_deg < 180.0:
        raise ValueError(f"field of view must be in (0, 180), got {fov_deg}")
    fy = (height / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return Intrinsics(fx=fy, fy=fy, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


def project(pose: CameraPose, intr: Intrinsics, point, near: float = DEFAULT_NEAR) -> Projection:
    """Project one world point; raises :class:`BehindCamera` for z <= near."""
    cam = pose.world_to_camera(np.asarray(point, dtype=np.float64).reshape(3))
    depth = float(cam[2])
    if depth <= near:
        raise BehindCamera("point not in front of camera")
    u = intr.fx * cam[0] / depth + intr.cx
    v = intr.fy * cam[1] / depth + intr.cy
    return Projection(pixel=(float(u), float(v)), depth=depth)


def project_points(
    pose: CameraPose, intr: Intrinsics, points: np.ndarray, near: float = DEFAULT_NEAR
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) world points.

    Returns ``(uv, depth, in_front)``: continuous pixel coordinates (N, 2),
    camera-frame depths (N,), and the mask of points with depth > near.
    ``uv`` rows are only meaningful where ``in_front`` holds.
    """
    cam = pose.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    depth = cam[:, 2]
    in_front = depth > near
    safe = np.where(in_front, depth, 1.0)
    u = intr.fx * cam[:, 0] / safe + intr.cx
    v = intr.fy * cam[:, 1] / safe + intr.cy
    return np.stack([u, v], axis=1), depth, in_front


def pixel_round(values: np.ndarray) -> np.ndarray:
    """Round continuous pixel coordinates half-up to integer pixel centers."""
    return np.floor(np.asarray(values) + 0.5).astype(np.int64)
