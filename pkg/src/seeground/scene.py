"""Scene data model: point clouds, detected objects, and spatial text.

Loads colored point clouds from PLY, ingests precomputed detector output
into an object lookup table, and renders the table into the line-oriented
spatial description consumed by the grounding agent.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np

from .errors import (
    DetectionError,
    EmptyCropError,
    PlyError,
    UnknownObjectId,
)
from .util import format_half_up

# Detector masks may be slightly looser than the reported box; indexed points
# must lie inside the box inflated by this margin (meters).
BOX_INDEX_SLACK = 0.05


@dataclass(frozen=True)
class PointCloud:
    """Colored point cloud in the world frame (z-up, meters).

    ``points`` is (N, 3) float64 and ``colors`` is (N, 3) uint8 in [0, 255];
    both are read-only and share the same length N >= 1.
    """

    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        cols = np.ascontiguousarray(self.colors, dtype=np.uint8)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("points must have shape (N, 3)")
        if cols.shape != pts.shape:
            raise ValueError("colors must match points in shape")
        if len(pts) < 1:
            raise ValueError("point cloud is empty")
        if not np.isfinite(pts).all():
            raise ValueError("points contain non-finite coordinates")
        pts.setflags(write=False)
        cols.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "colors", cols)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box with componentwise min <= max."""

    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min)
        hi = tuple(float(v) for v in self.max)
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"box min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def center(self) -> tuple[float, float, float]:
        return tuple((a + b) / 2.0 for a, b in zip(self.min, self.max))

    @property
    def size(self) -> tuple[float, float, float]:
        return tuple(b - a for a, b in zip(self.min, self.max))

    @property
    def volume(self) -> float:
        sx, sy, sz = self.size
        return sx * sy * sz

    def inflate(self, margin: float) -> "Aabb":
        return Aabb(tuple(v - margin for v in self.min), tuple(v + margin for v in self.max))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of (N, 3) points inside the closed box."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo = np.asarray(self.min)
        hi = np.asarray(self.max)
        return np.logical_and(pts >= lo, pts <= hi).all(axis=1)

    @classmethod
    def from_points(cls, points: np.ndarray) -> "Aabb":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("cannot build a box from zero points")
        return cls(tuple(pts.min(axis=0)), tuple(pts.max(axis=0)))


@dataclass(frozen=True)
class ObjectRecord:
    """One detected object: id, semantic label, box, optional point indices."""

    id: int
    label: str
    box: Aabb
    point_indices: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.id < 0:
            raise ValueError("object id must be non-negative")
        if not self.label:
            raise ValueError("object label must be non-empty")
        if self.point_indices is not None:
            object.__setattr__(self, "point_indices", tuple(int(i) for i in self.point_indices))


@dataclass(frozen=True)
class ObjectLookupTable:
    """Per-scene table of detected objects, ordered by ascending id."""

    scene_id: str
    records: tuple[ObjectRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ids = [r.id for r in self.records]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("record ids must be strictly increasing")
        object.__setattr__(self, "_by_id", {r.id: r for r in self.records})

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def lookup(self, object_id: int) -> ObjectRecord:
        try:
            return self._by_id[object_id]
        except KeyError:
            raise UnknownObjectId(f"object id {object_id} not in table") from None


@dataclass(frozen=True)
class SpatialText:
    """Line-oriented scene description, one line per object in id order."""

    text: str

    @property
    def lines(self) -> list[str]:
        return self.text.splitlines()


_SPATIAL_LINE = re.compile(
    r"^(\d+)\. (.+?)"
    r"(?:: center=\((-?[\d.]+), (-?[\d.]+), (-?[\d.]+)\),"
    r" size=\((-?[\d.]+), (-?[\d.]+), (-?[\d.]+)\))?$"
)


def parse_spatial_line(line: str):
    """Parse one spatial-text line back into (id, label, center, size).

    center/size are None for lines written without positions.
    """
    m = _SPATIAL_LINE.match(line)
    if m is None:
        raise ValueError(f"unparseable spatial line: {line!r}")
    object_id = int(m.group(1))
    label = m.group(2)
    if m.group(3) is None:
        return object_id, label, None, None
    center = tuple(float(m.group(i)) for i in (3, 4, 5))
    size = tuple(float(m.group(i)) for i in (6, 7, 8))
    return object_id, label, center, size


def describe_scene(olt: ObjectLookupTable, include_positions: bool = True) -> SpatialText:
    """Deterministic text description, one line per record in id order.

    Coordinates are meters with two decimals, rounded half-up. With
    ``include_positions=False`` only ids and labels are listed (used by the
    coordinate-free ablation).
    """
    lines = []
    for rec in olt.records:
        if include_positions:
            c = ", ".join(format_half_up(v, 2) for v in rec.box.center)
            s = ", ".join(format_half_up(v, 2) for v in rec.box.size)
            lines.append(f"{rec.id}. {rec.label}: center=({c}), size=({s})")
        else:
            lines.append(f"{rec.id}. {rec.label}")
    return SpatialText("\n".join(lines))


# ---------------------------------------------------------------------------
# PLY loading
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_COORD_PROPS = ("x", "y", "z")
_COLOR_PROPS = ("red", "green", "blue")


class _PlyElement:
    def __init__(self, name: str, count: int):
        self.name = name
        self.count = count
        self.properties: list[tuple[str, str, str | None]] = []  # (name, dtype, list_count_dtype)

    @property
    def has_list(self) -> bool:
        return any(cd is not None for _, _, cd in self.properties)

    @property
    def row_size(self) -> int:
        return sum(np.dtype(dt).itemsize for _, dt, cd in self.properties if cd is None)


def _read_header(fh):
    """Parse the PLY header; returns (format, elements) and leaves fh at the payload."""
    def next_line():
        offset = fh.tell()
        raw = fh.readline()
        if not raw:
            raise PlyError("unexpected end of header", offset)
        try:
            return raw.decode("ascii").strip(), offset
        except UnicodeDecodeError:
            raise PlyError("non-ascii bytes in header", offset) from None

    magic, offset = next_line()
    if magic != "ply":
        raise PlyError("not a PLY file (missing 'ply' magic)", offset)

    fmt = None
    elements: list[_PlyElement] = []
    while True:
        line, offset = next_line()
        if line == "end_header":
            break
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        parts = line.split()
        if parts[0] == "format":
            if len(parts) != 3 or parts[2] != "1.0":
                raise PlyError(f"unsupported format line: {line!r}", offset)
            if parts[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"unsupported encoding {parts[1]!r}", offset)
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise PlyError(f"malformed element line: {line!r}", offset)
            try:
                count = int(parts[2])
            except ValueError:
                raise PlyError(f"bad element count in {line!r}", offset) from None
            elements.append(_PlyElement(parts[1], count))
        elif parts[0] == "property":
            if not elements:
                raise PlyError("property before any element", offset)
            if parts[1] == "list":
                if len(parts) != 5 or parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise PlyError(f"malformed list property: {line!r}", offset)
                elements[-1].properties.append((parts[4], "<" + _PLY_TYPES[parts[3]], "<" + _PLY_TYPES[parts[2]]))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                    raise PlyError(f"malformed property line: {line!r}", offset)
                elements[-1].properties.append((parts[2], "<" + _PLY_TYPES[parts[1]], None))
        else:
            raise PlyError(f"unrecognized header line: {line!r}", offset)

    if fmt is None:
        raise PlyError("header has no format line", offset)
    return fmt, elements


def _skip_element_ascii(fh, element: _PlyElement):
    for _ in range(element.count):
        offset = fh.tell()
        if not fh.readline():
            raise PlyError(f"truncated '{element.name}' element", offset)


def _skip_element_binary(fh, element: _PlyElement):
    if not element.has_list:
        fh.seek(element.row_size * element.count, 1)
        return
    for _ in range(element.count):
        for _, dtype, count_dtype in element.properties:
            if count_dtype is None:
                fh.seek(np.dtype(dtype).itemsize, 1)
            else:
                offset = fh.tell()
                raw = fh.read(np.dtype(count_dtype).itemsize)
                if len(raw) != np.dtype(count_dtype).itemsize:
                    raise PlyError(f"truncated '{element.name}' element", offset)
                n = int(np.frombuffer(raw, dtype=count_dtype)[0])
                fh.seek(n * np.dtype(dtype).itemsize, 1)


def _check_vertex_properties(element: _PlyElement):
    names = {name: (dtype, count_dtype) for name, dtype, count_dtype in element.properties}
    for prop in _COORD_PROPS:
        if prop not in names:
            raise PlyError(f"missing coordinate property '{prop}'")
        dtype, count_dtype = names[prop]
        if count_dtype is not None or dtype not in ("<f4", "<f8"):
            raise PlyError(f"coordinate property '{prop}' must be float or double")
    for prop in _COLOR_PROPS:
        if prop not in names:
            raise PlyError("missing color property" + f" '{prop}'")
        dtype, count_dtype = names[prop]
        if count_dtype is not None or dtype != "<u1":
            raise PlyError(f"color property '{prop}' must be uchar")


def _read_vertices_ascii(fh, element: _PlyElement):
    columns = {name: i for i, (name, _, _) in enumerate(element.properties)}
    points = np.empty((element.count, 3), dtype=np.float64)
    colors = np.empty((element.count, 3), dtype=np.uint8)
    for row in range(element.count):
        offset = fh.tell()
        raw = fh.readline()
        if not raw:
            raise PlyError(f"truncated vertex data at row {row}", offset)
        tokens = raw.split()
        if len(tokens) < len(element.properties):
            raise PlyError(f"vertex row {row} has {len(tokens)} values, expected {len(element.properties)}", offset)
        try:
            points[row] = [float(tokens[columns[p]]) for p in _COORD_PROPS]
            colors[row] = [int(tokens[columns[p]]) for p in _COLOR_PROPS]
        except ValueError:
            raise PlyError(f"non-numeric vertex value at row {row}", offset) from None
    return points, colors


def _read_vertices_binary(fh, element: _PlyElement):
    if element.has_list:
        raise PlyError("list properties in the vertex element are not supported")
    dtype = np.dtype([(name, dt) for name, dt, _ in element.properties])
    offset = fh.tell()
    raw = fh.read(dtype.itemsize * element.count)
    if len(raw) != dtype.itemsize * element.count:
        raise PlyError("truncated vertex data", offset + len(raw))
    table = np.frombuffer(raw, dtype=dtype)
    points = np.stack([table[p].astype(np.float64) for p in _COORD_PROPS], axis=1)
    colors = np.stack([table[p] for p in _COLOR_PROPS], axis=1)
    return points, colors


def load_point_cloud(path) -> PointCloud:
    """Load a colored point cloud from an ascii or binary-little-endian PLY.

    The vertex element must provide float x/y/z and uchar red/green/blue;
    all other elements and properties are ignored. Errors report the byte
    offset at which parsing failed.
    """
    with open(path, "rb") as fh:
        fmt, elements = _read_header(fh)
        vertex = next((e for e in elements if e.name == "vertex"), None)
        if vertex is None:
            raise PlyError("missing vertex element")
        if vertex.count < 1:
            raise PlyError("vertex element is empty")
        _check_vertex_properties(vertex)

        for element in elements:
            if element.name == "vertex":
                break
            if fmt == "ascii":
                _skip_element_ascii(fh, element)
            else:
                _skip_element_binary(fh, element)

        if fmt == "ascii":
            points, colors = _read_vertices_ascii(fh, vertex)
        else:
            points, colors = _read_vertices_binary(fh, vertex)

    if not np.isfinite(points).all():
        raise PlyError("vertex data contains non-finite coordinates")
    return PointCloud(points, colors)


# ---------------------------------------------------------------------------
# Detections and object-table persistence
# ---------------------------------------------------------------------------


def _box_from_json(obj) -> Aabb:
    try:
        return Aabb(tuple(obj["min"]), tuple(obj["max"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DetectionError(f"malformed box: {exc}") from exc


def _records_from_json(data, cloud: PointCloud | None, require_box: bool):
    if not isinstance(data, dict) or "scene_id" not in data or "objects" not in data:
        raise DetectionError("detection file must contain 'scene_id' and 'objects'")
    objects = data["objects"]
    if not objects:
        raise DetectionError("empty detection list")

    records = []
    seen: set[int] = set()
    for entry in objects:
        try:
            object_id = int(entry["id"])
            label = str(entry["label"]).strip().lower()
        except (KeyError, TypeError, ValueError) as exc:
            raise DetectionError(f"malformed detection entry: {exc}") from exc
        if object_id in seen:
            raise DetectionError(f"duplicate id {object_id}")
        seen.add(object_id)
        if not label:
            raise DetectionError(f"detection {object_id} has an empty label")

        indices = entry.get("indices")
        box_json = entry.get("box")
        if box_json is None and not indices:
            raise DetectionError(f"detection {object_id} has neither box nor indices")
        if require_box and box_json is None:
            raise DetectionError(f"object {object_id} is missing its box")

        point_indices = None
        if indices is not None:
            point_indices = tuple(int(i) for i in indices)
            if cloud is not None:
                bad = [i for i in point_indices if not 0 <= i < len(cloud)]
                if bad:
                    raise DetectionError(f"detection {object_id}: index out of range ({bad[0]})")

        if box_json is not None:
            box = _box_from_json(box_json)
        else:
            box = Aabb.from_points(cloud.points[list(point_indices)])

        if point_indices is not None and cloud is not None:
            inflated = box.inflate(BOX_INDEX_SLACK)
            inside = inflated.contains(cloud.points[list(point_indices)])
            if not inside.all():
                raise DetectionError(
                    f"detection {object_id}: indexed point outside its box (+{BOX_INDEX_SLACK} m)"
                )

        records.append(ObjectRecord(object_id, label, box, point_indices))

    records.sort(key=lambda r: r.id)
    return str(data["scene_id"]), tuple(records)


def ingest_detections(path, cloud: PointCloud) -> ObjectLookupTable:
    """Build the object lookup table from a precomputed detection file.

    Labels are lowercased and trimmed. A detection that supplies point
    indices but no box gets the tight axis-aligned box over those points.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DetectionError(f"invalid JSON: {exc}") from exc
    scene_id, records = _records_from_json(data, cloud, require_box=False)
    return ObjectLookupTable(scene_id, records)


def save_olt(olt: ObjectLookupTable, path) -> None:
    """Persist a lookup table with 6-decimal fixed coordinates, one object per line."""
    def fmt_triple(triple):
        return "[" + ", ".join(f"{v:.6f}" for v in triple) + "]"

    lines = ["{", f'  "scene_id": {json.dumps(olt.scene_id)},', '  "objects": [']
    for i, rec in enumerate(olt.records):
        entry = (
            f'{{"id": {rec.id}, "label": {json.dumps(rec.label)}, '
            f'"box": {{"min": {fmt_triple(rec.box.min)}, "max": {fmt_triple(rec.box.max)}}}'
        )
        if rec.point_indices is not None:
            entry += f', "indices": {json.dumps(list(rec.point_indices))}'
        entry += "}"
        lines.append("    " + entry + ("," if i + 1 < len(olt.records) else ""))
    lines += ["  ]", "}"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_olt(path) -> ObjectLookupTable:
    """Load a persisted lookup table (boxes mandatory, indices preserved)."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DetectionError(f"invalid JSON: {exc}") from exc
    scene_id, records = _records_from_json(data, cloud=None, require_box=True)
    return ObjectLookupTable(scene_id, records)


# ---------------------------------------------------------------------------
# Ceiling crop
# ---------------------------------------------------------------------------


def crop_ceiling(cloud: PointCloud, margin: float = 0.3, max_z: float | None = None) -> PointCloud:
    """Drop the top ``margin`` meters of the cloud (strictly below max_z - margin).

    ``max_z`` defaults to the cloud's own maximum height; passing it
    explicitly lets cropped and uncropped renders share a reference height
    and makes the crop idempotent.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    reference = float(cloud.points[:, 2].max()) if max_z is None else float(max_z)
    keep = cloud.points[:, 2] < reference - margin
    if not keep.any():
        raise EmptyCropError("crop removed all points")
    return PointCloud(cloud.points[keep], cloud.colors[keep])


def scene_box(cloud: PointCloud) -> Aabb:
    """Tight axis-aligned bounds of the whole cloud."""
    return Aabb.from_points(cloud.points)
