"""Depth-aware marker prompting: visibility tests, marker placement, compositing.

An object is marked in the rendered view only where its points actually win
the depth test, so markers never point at occluders. Markers are numbered
discs stamped into a copy of the render; the digit glyphs come from an
embedded 5x7 bitmap font so output bytes are platform-stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import pixel_round, project_points
from .errors import EmptyObjectError
from .render import RenderOutput
from .scene import ObjectRecord, PointCloud

DEFAULT_DEPTH_TOL = 0.10


@dataclass(frozen=True)
class MarkerStyle:
    """Marker appearance and the visibility threshold for placing one."""

    radius: int = 14
    fill: tuple[int, int, int] = (32, 32, 32)
    border: tuple[int, int, int] = (255, 255, 255)
    min_visible: int = 20

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("marker radius must be positive")
        if self.min_visible < 1:
            raise ValueError("min_visible must be positive")


@dataclass(frozen=True)
class VisibilityResult:
    """Where one object's points survive the depth test in a rendered view.

    ``visible_pixels`` holds the distinct (u, v) pixels of visible points,
    sorted; ``visible_count`` is their number. ``total_projected`` counts the
    object's points that land in front of the camera and inside the image,
    whether or not they are visible.
    """

    object_id: int
    visible_pixels: tuple[tuple[int, int], ...]
    visible_count: int
    total_projected: int
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "visible_pixels",
                           tuple((int(u), int(v)) for u, v in self.visible_pixels))
        if self.visible_count != len(self.visible_pixels):
            raise ValueError("visible_count must equal the number of visible pixels")
        if self.visible_count > self.total_projected:
            raise ValueError("more visible pixels than projected points")


@dataclass(frozen=True)
class MarkerSpec:
    """A numbered disc to stamp: geometry plus colors, label is the object id."""

    object_id: int
    center: tuple[int, int]
    radius: int
    fill: tuple[int, int, int]
    border: tuple[int, int, int]
    label_text: str

    def __post_init__(self):
        object.__setattr__(self, "center", (int(self.center[0]), int(self.center[1])))


@dataclass(frozen=True)
class PromptedImage:
    """A render with markers stamped in; pixels outside all stamps are untouched."""

    color: np.ndarray
    markers: tuple[MarkerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "markers", tuple(self.markers))
        self.color.setflags(write=False)

    @property
    def width(self) -> int:
        return self.color.shape[1]

    @property
    def height(self) -> int:
        return self.color.shape[0]


def point_visibility(out: RenderOutput, points: np.ndarray, tol: float):
    """Per-point visibility of arbitrary world points against a rendered view.

    Returns (visible, projected, pixels): boolean masks over the input points
    and the (N, 2) rounded pixel of each point (valid where ``projected``).
    A point is projected when it lies in front of the near plane and inside
    the image; it is visible when additionally its camera depth is at most
    the depth buffer at its pixel plus ``tol``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    uv, depth, in_front = project_points(out.pose, out.intrinsics, pts, near=out.near)

    pixels = np.zeros((len(pts), 2), dtype=np.int64)
    pixels[in_front] = pixel_round(uv[in_front])

    in_bounds = in_front.copy()
    in_bounds[in_front] &= (
        (pixels[in_front, 0] >= 0) & (pixels[in_front, 0] < out.width)
        & (pixels[in_front, 1] >= 0) & (pixels[in_front, 1] < out.height)
    )

    visible = np.zeros(len(pts), dtype=bool)
    if in_bounds.any():
        u = pixels[in_bounds, 0]
        v = pixels[in_bounds, 1]
        visible[in_bounds] = depth[in_bounds] <= out.depth[v, u] + tol
    return visible, in_bounds, pixels


def object_points(record: ObjectRecord, cloud: PointCloud) -> np.ndarray:
    """An object's points: detector indices when present, else box interior."""
    if record.point_indices is not None:
        return cloud.points[list(record.point_indices)]
    return cloud.points[record.box.contains(cloud.points)]


def compute_visibility(out: RenderOutput, record: ObjectRecord, cloud: PointCloud,
                       tol: float = DEFAULT_DEPTH_TOL) -> VisibilityResult:
    """Depth-test one object's points against a rendered view.

    Points come from the detector's indices when available (masks are tighter
    than boxes), else from gathering cloud points inside the object's box.
    """
    pts = object_points(record, cloud)
    if len(pts) == 0:
        raise EmptyObjectError(f"empty object ({record.id})")

    visible, projected, pixels = point_visibility(out, pts, tol)
    if visible.any():
        distinct = np.unique(pixels[visible], axis=0)
        order = np.lexsort((distinct[:, 1], distinct[:, 0]))
        visible_pixels = tuple(map(tuple, distinct[order]))
    else:
        visible_pixels = ()

    return VisibilityResult(
        object_id=record.id,
        visible_pixels=visible_pixels,
        visible_count=len(visible_pixels),
        total_projected=int(projected.sum()),
        width=out.width,
        height=out.height,
    )


def place_marker(vis: VisibilityResult, style: MarkerStyle | None = None) -> MarkerSpec | None:
    """Marker at the rounded mean of the visible pixels, or None below threshold.

    The center is clamped so the disc (not the 2-px border ring) stays inside
    the image.
    """
    if style is None:
        style = MarkerStyle()
    if vis.visible_count < style.min_visible:
        return None

    pixels = np.asarray(vis.visible_pixels, dtype=np.float64)
    center = pixel_round(pixels.mean(axis=0))
    cu = int(np.clip(center[0], style.radius, vis.width - 1 - style.radius))
    cv = int(np.clip(center[1], style.radius, vis.height - 1 - style.radius))

    return MarkerSpec(
        object_id=vis.object_id,
        center=(cu, cv),
        radius=style.radius,
        fill=style.fill,
        border=style.border,
        label_text=str(vis.object_id),
    )


# 5x7 digit bitmaps; each string row is 5 cells, '#' = set.
DIGIT_FONT = {
    "0": ("#####", "#...#", "#..##", "#.#.#", "##..#", "#...#", "#####"),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", "#####"),
    "2": ("#####", "....#", "....#", "#####", "#....", "#....", "#####"),
    "3": ("#####", "....#", "....#", ".####", "....#", "....#", "#####"),
    "4": ("#...#", "#...#", "#...#", "#####", "....#", "....#", "....#"),
    "5": ("#####", "#....", "#....", "#####", "....#", "....#", "#####"),
    "6": ("#####", "#....", "#....", "#####", "#...#", "#...#", "#####"),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": ("#####", "#...#", "#...#", "#####", "#...#", "#...#", "#####"),
    "9": ("#####", "#...#", "#...#", "#####", "....#", "....#", "#####"),
}

GLYPH_WIDTH = 5
GLYPH_HEIGHT = 7
BORDER_THICKNESS = 2


def glyph_scale(radius: int) -> int:
    """Integer upscaling factor for digit glyphs inside a disc of this radius."""
    return max(1, radius // GLYPH_HEIGHT)


def _glyph_block(label_text: str, scale: int) -> np.ndarray:
    """Boolean (h, w) bitmap of the label: glyphs side by side, 1-cell gaps."""
    n = len(label_text)
    width = (GLYPH_WIDTH * n + (n - 1)) * scale
    block = np.zeros((GLYPH_HEIGHT * scale, width), dtype=bool)
    for i, ch in enumerate(label_text):
        rows = DIGIT_FONT[ch]
        x0 = i * (GLYPH_WIDTH + 1) * scale
        for r, row in enumerate(rows):
            for c, cell in enumerate(row):
                if cell == "#":
                    block[r * scale:(r + 1) * scale,
                          x0 + c * scale:x0 + (c + 1) * scale] = True
    return block


def _stamp(buffer: np.ndarray, marker: MarkerSpec) -> None:
    """Stamp one marker into the buffer in place: disc, border ring, glyphs."""
    h, w = buffer.shape[:2]
    cu, cv = marker.center
    r = marker.radius
    outer = r + BORDER_THICKNESS

    u0, u1 = max(0, cu - outer), min(w - 1, cu + outer)
    v0, v1 = max(0, cv - outer), min(h - 1, cv + outer)
    if u0 > u1 or v0 > v1:
        return
    uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1), indexing="xy")
    d2 = (uu - cu) ** 2 + (vv - cv) ** 2

    patch = buffer[v0:v1 + 1, u0:u1 + 1]
    patch[d2 <= r * r] = marker.fill
    patch[(d2 > r * r) & (d2 <= outer * outer)] = marker.border

    scale = glyph_scale(r)
    block = _glyph_block(marker.label_text, scale)
    bh, bw = block.shape
    x0 = cu - bw // 2
    y0 = cv - bh // 2
    # Clip the glyph block against the image.
    gx0, gy0 = max(0, -x0), max(0, -y0)
    gx1, gy1 = min(bw, w - x0), min(bh, h - y0)
    if gx0 >= gx1 or gy0 >= gy1:
        return
    region = buffer[y0 + gy0:y0 + gy1, x0 + gx0:x0 + gx1]
    region[block[gy0:gy1, gx0:gx1]] = marker.border


def composite_prompts(image: np.ndarray, markers) -> PromptedImage:
    """Stamp markers into a copy of the image, ascending object id.

    Pixels outside every stamp equal the source exactly; where stamps
    overlap, the later (higher) id wins because it is stamped last. With no
    markers the output is a byte-for-byte copy.
    """
    buffer = np.array(image, dtype=np.uint8, copy=True)
    ordered = tuple(sorted(markers, key=lambda m: m.object_id))
    ids = [m.object_id for m in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate marker object ids")
    for marker in ordered:
        _stamp(buffer, marker)
    return PromptedImage(buffer, ordered)
