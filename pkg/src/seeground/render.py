"""Deterministic software point-splat renderer with a z-buffer.

Every point is splatted as a filled disc of fixed pixel radius; each covered
pixel keeps the candidate with the smallest depth, breaking exact ties in
favor of the smaller cloud index. The result is bit-reproducible for a given
cloud, camera, and config.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .camera import (
    DEFAULT_NEAR,
    CameraPose,
    Intrinsics,
    pixel_round,
    project_points,
)
from .scene import PointCloud


@dataclass(frozen=True)
class RenderConfig:
    """Rasterizer knobs: output size, splat radius, near plane, background."""

    width: int = 1000
    height: int = 1000
    splat_radius: int = 2
    near: float = DEFAULT_NEAR
    background: tuple[int, int, int] = (255, 255, 255)
    ceiling_margin: float = 0.3

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if self.splat_radius < 0:
            raise ValueError("splat radius must be non-negative")
        if self.near <= 0:
            raise ValueError("near plane must be positive")


@dataclass(frozen=True)
class RenderOutput:
    """A rendered view: color image, depth map, and the camera that made it.

    ``color`` is (H, W, 3) uint8; ``depth`` is (H, W) float64 with +inf where
    no point was splatted. Depth is the camera-frame z of the winning point,
    not the distance to the disc's pixel.
    """

    color: np.ndarray
    depth: np.ndarray
    pose: CameraPose
    intrinsics: Intrinsics
    near: float

    @property
    def width(self) -> int:
        return self.color.shape[1]

    @property
    def height(self) -> int:
        return self.color.shape[0]

    def depth_at(self, u: int, v: int) -> float | None:
        """Depth at pixel (u, v), or None where the background shows through."""
        if not (0 <= u < self.width and 0 <= v < self.height):
            raise IndexError(f"pixel ({u}, {v}) outside {self.width}x{self.height} image")
        d = self.depth[v, u]
        return None if np.isinf(d) else float(d)


def _disc_offsets(radius: int) -> np.ndarray:
    """Integer (du, dv) offsets covered by a filled disc of given radius."""
    span = np.arange(-radius, radius + 1)
    du, dv = np.meshgrid(span, span, indexing="xy")
    mask = du * du + dv * dv <= radius * radius
    return np.stack([du[mask], dv[mask]], axis=1)


def render(cloud: PointCloud, pose: CameraPose, intrinsics: Intrinsics,
           config: RenderConfig | None = None) -> RenderOutput:
    """Rasterize a point cloud into a color image and depth map.

    Points behind the near plane are dropped; each survivor is splatted as a
    disc of ``config.splat_radius`` pixels around its rounded projection.
    Per pixel, the nearest candidate wins and exact depth ties go to the
    smaller cloud index, so the output does not depend on traversal order.
    """
    if config is None:
        config = RenderConfig()
    w, h = config.width, config.height

    color = np.empty((h, w, 3), dtype=np.uint8)
    color[:] = np.asarray(config.background, dtype=np.uint8)
    depth = np.full((h, w), np.inf, dtype=np.float64)

    uv, z, in_front = project_points(pose, intrinsics, cloud.points, near=config.near)
    if not in_front.any():
        return RenderOutput(color, depth, pose, intrinsics, config.near)

    idx = np.nonzero(in_front)[0]
    centers = pixel_round(uv[idx])  # (M, 2) integer pixel centers
    z = z[idx]

    offsets = _disc_offsets(config.splat_radius)  # (K, 2)
    # Candidate pixels: every disc offset applied to every projected center.
    pix = centers[:, None, :] + offsets[None, :, :]          # (M, K, 2)
    cand_idx = np.broadcast_to(idx[:, None], pix.shape[:2])  # (M, K)
    cand_z = np.broadcast_to(z[:, None], pix.shape[:2])

    pix = pix.reshape(-1, 2)
    cand_idx = cand_idx.reshape(-1)
    cand_z = cand_z.reshape(-1)

    inside = (pix[:, 0] >= 0) & (pix[:, 0] < w) & (pix[:, 1] >= 0) & (pix[:, 1] < h)
    pix = pix[inside]
    cand_idx = cand_idx[inside]
    cand_z = cand_z[inside]
    if len(pix) == 0:
        return RenderOutput(color, depth, pose, intrinsics, config.near)

    flat = pix[:, 1] * w + pix[:, 0]
    # Sort by (pixel, depth, cloud index); the first candidate per pixel is
    # then exactly the winner under the smallest-depth / smallest-index rule.
    order = np.lexsort((cand_idx, cand_z, flat))
    flat = flat[order]
    cand_idx = cand_idx[order]
    cand_z = cand_z[order]
    first = np.unique(flat, return_index=True)[1]

    win_flat = flat[first]
    win_idx = cand_idx[first]
    depth.reshape(-1)[win_flat] = cand_z[first]
    color.reshape(-1, 3)[win_flat] = cloud.colors[win_idx]

    return RenderOutput(color, depth, pose, intrinsics, config.near)


def save_image(image: np.ndarray, path) -> None:
    """Write an (H, W, 3) uint8 array as a PNG."""
    Image.fromarray(np.ascontiguousarray(image), mode="RGB").save(path, format="PNG")


def encode_png(image: np.ndarray) -> bytes:
    """Encode an (H, W, 3) uint8 array as PNG bytes (lossless wire payload)."""
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def load_image(path) -> np.ndarray:
    """Read a PNG back into an (H, W, 3) uint8 array."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB")).copy()


def save_depth(depth: np.ndarray, path) -> None:
    """Write a depth map as raw little-endian float32, row-major."""
    np.ascontiguousarray(depth, dtype="<f4").tofile(path)


def load_depth(path, width: int, height: int) -> np.ndarray:
    """Read a raw float32 depth map written by :func:`save_depth`."""
    data = np.fromfile(path, dtype="<f4")
    if data.size != width * height:
        raise ValueError(f"depth file holds {data.size} values, expected {width * height}")
    return data.reshape(height, width).astype(np.float64)
