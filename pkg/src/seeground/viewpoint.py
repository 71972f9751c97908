"""Viewpoint selection: place the camera so the rendered view matches the query.

The query-aligned strategy puts the eye across the scene center from the
anchor object and faces the anchor, approximating the vantage the query text
was written from. Four static strategies (bird's-eye view and three
corner/edge presets) exist as ablation baselines.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import TargetNotInScene
from .scene import Aabb, ObjectLookupTable, ObjectRecord


class ViewpointStrategy(enum.Enum):
    QUERY_ALIGNED = "query_aligned"
    BIRDS_EYE_VIEW = "bev"
    CENTER2CORNER = "center2corner"
    EDGE2CENTER = "edge2center"
    CORNER2CENTER = "corner2center"


@dataclass(frozen=True)
class ViewConfig:
    """Camera placement knobs (meters and degrees).

    The offsets keep a typical room inside a 60-degree field of view:
    the eye backs off ``back_offset`` from the scene-center start, rises by
    ``up_offset``, and static strategies stand ``eye_height`` above the floor
    (bird's-eye: ``bev_height`` above the ceiling).
    """

    back_offset: float = 1.5
    up_offset: float = 1.0
    eye_height: float = 1.5
    bev_height: float = 1.0
    fov_deg: float = 60.0

    def __post_init__(self):
        if not 0 < self.fov_deg < 180:
            raise ValueError("fov must be in (0, 180) degrees")


@dataclass(frozen=True)
class ParsedQuery:
    """Target/anchor classes extracted from the query text.

    ``anchor_class`` is None when the query names no reference object.
    """

    target_class: str
    anchor_class: str | None = None
    raw_query: str = ""

    def __post_init__(self):
        object.__setattr__(self, "target_class", self.target_class.strip().lower())
        if self.anchor_class is not None:
            anchor = self.anchor_class.strip().lower()
            object.__setattr__(self, "anchor_class", anchor if anchor and anchor != "none" else None)
        if not self.target_class:
            raise ValueError("target class must be non-empty")


@dataclass(frozen=True)
class AnchorSpec:
    """Resolved anchor: a concrete object, or a pseudo-anchor position.

    ``kind`` is "object" when an anchor object was matched (``point`` is its
    box center) and "pseudo" when the anchor is a synthetic position — the
    centroid of the candidate centers.
    """

    kind: str
    point: tuple[float, float, float]
    object: ObjectRecord | None = None

    def __post_init__(self):
        if self.kind not in ("object", "pseudo"):
            raise ValueError(f"unknown anchor kind {self.kind!r}")
        if (self.kind == "object") != (self.object is not None):
            raise ValueError("object anchors need a record; pseudo anchors must not have one")
        object.__setattr__(self, "point", tuple(float(v) for v in self.point))
        if self.object is not None and self.point != self.object.box.center:
            raise ValueError("object anchor point must be its box center")


@dataclass(frozen=True)
class CandidateSet:
    """Objects whose label matches the target class, in id order."""

    records: tuple[ObjectRecord, ...]

    def __post_init__(self):
        if not self.records:
            raise ValueError("candidate set must be non-empty")
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def centroid(self) -> tuple[float, float, float]:
        centers = np.array([r.box.center for r in self.records])
        return tuple(centers.mean(axis=0))


def _label_matches(label: str, query_class: str) -> bool:
    """Substring match in either direction (both already lowercase)."""
    return label in query_class or query_class in label


def match_records(olt: ObjectLookupTable, query_class: str) -> list[ObjectRecord]:
    """Records matching a class name: exact label match, else substring either way.

    Detector vocabularies rarely align exactly with free-form queries, so
    when no label equals the class, "trash can" may match "can" and vice
    versa. Returned in id order.
    """
    query_class = query_class.strip().lower()
    exact = [r for r in olt.records if r.label == query_class]
    if exact:
        return exact
    return [r for r in olt.records if _label_matches(r.label, query_class)]


def resolve_candidates(parsed: ParsedQuery, olt: ObjectLookupTable):
    """Match the parsed classes against the table; returns (anchor, candidates).

    Candidates are every record matching the target class (TargetNotInScene
    when there are none). The anchor is the record matching ``anchor_class``
    nearest the centroid of candidate centers, ties to the smaller id. A
    pseudo-anchor at that centroid stands in when the query has no anchor
    class, when nothing matches it, or when it lexically collides with the
    target class — anchoring a view on the target itself would say nothing
    about where to look from.
    """
    matched = match_records(olt, parsed.target_class)
    if not matched:
        raise TargetNotInScene(f"target class {parsed.target_class!r} not in scene")
    candidates = CandidateSet(tuple(matched))
    centroid = np.asarray(candidates.centroid)

    anchor_records: list[ObjectRecord] = []
    if parsed.anchor_class is not None and not _label_matches(parsed.anchor_class, parsed.target_class):
        anchor_records = match_records(olt, parsed.anchor_class)

    if anchor_records:
        dists = np.array([np.linalg.norm(np.array(r.box.center) - centroid) for r in anchor_records])
        best = int(np.argmin(dists))  # argmin takes the first minimum: smaller id on ties
        rec = anchor_records[best]
        anchor = AnchorSpec("object", rec.box.center, rec)
    else:
        anchor = AnchorSpec("pseudo", tuple(centroid))

    return anchor, candidates


def select_viewpoint(scene_box: Aabb, anchor: AnchorSpec, config: ViewConfig | None = None):
    """Query-aligned eye/target; returns (eye, target) as float64 arrays.

    From a start at the scene center raised to ``eye_height`` above the
    floor, the view direction runs toward the anchor point; the eye backs
    off along that direction by ``back_offset`` and rises by ``up_offset``,
    and the camera faces the anchor point exactly. An anchor that coincides
    with the start (within 1e-6) gets the +x direction. The anchor is
    expected to lie inside the scene box inflated by 1 m.
    """
    if config is None:
        config = ViewConfig()

    cx, cy, _ = scene_box.center
    start = np.array([cx, cy, scene_box.min[2] + config.eye_height])
    target = np.asarray(anchor.point, dtype=np.float64)

    direction = target - start
    norm = np.linalg.norm(direction)
    if norm < 1e-6:
        direction = np.array([1.0, 0.0, 0.0])
    else:
        direction = direction / norm

    eye = start - config.back_offset * direction + np.array([0.0, 0.0, config.up_offset])
    return eye, target


def static_viewpoint(strategy: ViewpointStrategy, scene_box: Aabb,
                     config: ViewConfig | None = None):
    """Eye/target for the fixed-placement baselines.

    Bird's-eye: straight down over the scene center. Center2Corner: from the
    center toward the +x/+y top corner. Corner2Center / Edge2Center: from
    the +x/+y corner (resp. the +x edge midpoint) toward the box center.
    Eyes stand ``eye_height`` above the floor, except bird's-eye at
    ``bev_height`` above the ceiling.
    """
    if config is None:
        config = ViewConfig()
    cx, cy, _ = scene_box.center
    min_z = scene_box.min[2]
    max_x, max_y, max_z = scene_box.max

    if strategy == ViewpointStrategy.BIRDS_EYE_VIEW:
        eye = np.array([cx, cy, max_z + config.bev_height])
        target = np.array([cx, cy, min_z])
    elif strategy == ViewpointStrategy.CENTER2CORNER:
        eye = np.array([cx, cy, min_z + config.eye_height])
        target = np.array([max_x, max_y, max_z])
    elif strategy == ViewpointStrategy.CORNER2CENTER:
        eye = np.array([max_x, max_y, min_z + config.eye_height])
        target = np.array(scene_box.center)
    elif strategy == ViewpointStrategy.EDGE2CENTER:
        eye = np.array([max_x, cy, min_z + config.eye_height])
        target = np.array(scene_box.center)
    else:
        raise ValueError(f"{strategy.value} is not a static strategy")
    return eye, target
