"""Synthetic 3-scene / 20-query benchmark used across the test suite.

Scene 1 is purpose-built to separate viewpoint strategies: a loft slab hides
a crate from straight above, while the query-aligned camera (anchored on the
loft) stands low in the open half of the room and sees underneath. Scenes 2
and 3 are compact rooms whose objects are visible from every strategy, so
they score identically regardless of viewpoint. The generator asserts the
occlusion facts it relies on at build time.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from seeground.camera import intrinsics_from_fov, look_at_or_fallback
from seeground.evaluation import QueryRecord, save_benchmark
from seeground.pipeline import (
    FusionConfig,
    PipelineConfig,
    SceneBundle,
    build_hybrid,
)
from seeground.render import RenderConfig, render
from seeground.scene import (
    Aabb,
    ObjectLookupTable,
    ObjectRecord,
    PointCloud,
    crop_ceiling,
    scene_box,
)
from seeground.viewpoint import (
    AnchorSpec,
    ParsedQuery,
    ViewConfig,
    ViewpointStrategy,
    resolve_candidates,
)

# The whole suite renders small and wide so every room fits one view.
SUITE_RENDER = RenderConfig(width=400, height=400)
SUITE_VIEW = ViewConfig(fov_deg=90.0)


def suite_config(**kwargs) -> PipelineConfig:
    base = dict(render=SUITE_RENDER, view=SUITE_VIEW, fusion=FusionConfig())
    base.update(kwargs)
    return PipelineConfig(**base)


# ---------------------------------------------------------------------------
# PLY writers (independent of the package's loader)
# ---------------------------------------------------------------------------


def write_ply_ascii(path, points, colors) -> None:
    points = np.asarray(points, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.uint8)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\ncomment synthetic test scene\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for (x, y, z), (r, g, b) in zip(points, colors):
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r} {r} {g} {b}\n")


def write_ply_binary(path, points, colors) -> None:
    points = np.asarray(points, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.uint8)
    with open(path, "wb") as fh:
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(points)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property uchar red\nproperty uchar green\nproperty uchar blue\n"
            "end_header\n"
        )
        fh.write(header.encode("ascii"))
        row = struct.Struct("<fffBBB")
        for (x, y, z), (r, g, b) in zip(points, colors):
            fh.write(row.pack(x, y, z, int(r), int(g), int(b)))


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def _scatter_slab(rng, xmin, xmax, ymin, ymax, z, n):
    pts = np.column_stack([
        rng.uniform(xmin, xmax, n),
        rng.uniform(ymin, ymax, n),
        np.full(n, float(z)),
    ])
    return pts


def _grid_slab(xmin, xmax, ymin, ymax, zs, spacing):
    xs = np.arange(xmin, xmax + spacing / 2, spacing)
    ys = np.arange(ymin, ymax + spacing / 2, spacing)
    layers = []
    for z in zs:
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        layers.append(np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(z))]))
    return np.vstack(layers)


def _box_cloud(rng, center, size, n):
    c = np.asarray(center, dtype=np.float64)
    s = np.asarray(size, dtype=np.float64)
    return c + (rng.random((n, 3)) - 0.5) * s


_PALETTE = [
    (200, 60, 60), (60, 140, 200), (80, 170, 90), (210, 160, 60),
    (150, 90, 180), (90, 190, 190), (220, 120, 160), (130, 130, 70),
]


@dataclass
class SceneDef:
    scene_id: str
    ply_format: str
    points: np.ndarray
    colors: np.ndarray
    objects: list  # (object_id, label, index range)

    def olt(self) -> ObjectLookupTable:
        records = []
        for object_id, label, indices in self.objects:
            box = Aabb.from_points(self.points[list(indices)])
            records.append(ObjectRecord(object_id, label, box, tuple(indices)))
        return ObjectLookupTable(self.scene_id, tuple(records))

    def bundle(self) -> SceneBundle:
        return SceneBundle(self.scene_id, PointCloud(self.points, self.colors), self.olt())


class _SceneBuilder:
    def __init__(self, scene_id: str, ply_format: str, seed: int):
        self.scene_id = scene_id
        self.ply_format = ply_format
        self.rng = np.random.default_rng(seed)
        self.chunks: list[np.ndarray] = []
        self.colors: list[np.ndarray] = []
        self.objects: list = []
        self._cursor = 0

    def add(self, points, color) -> range:
        points = np.asarray(points, dtype=np.float64)
        self.chunks.append(points)
        self.colors.append(np.tile(np.asarray(color, dtype=np.uint8), (len(points), 1)))
        span = range(self._cursor, self._cursor + len(points))
        self._cursor += len(points)
        return span

    def add_object(self, object_id, label, points):
        color = _PALETTE[(object_id - 1) % len(_PALETTE)]
        span = self.add(points, color)
        self.objects.append((object_id, label, span))

    def finish(self) -> SceneDef:
        points = np.vstack(self.chunks)
        # Quantize to float32 up front so boxes computed here match boxes
        # recomputed from the persisted (float32) PLY payload exactly.
        points = points.astype("<f4").astype(np.float64)
        colors = np.vstack(self.colors)
        return SceneDef(self.scene_id, self.ply_format, points, colors, self.objects)


def _build_loftroom() -> SceneDef:
    b = _SceneBuilder("loftroom", "binary", seed=11)
    b.add(_scatter_slab(b.rng, 0, 6, 0, 6, 0.0, 3000), (120, 120, 120))      # floor
    b.add(_scatter_slab(b.rng, 0, 6, 0, 6, 3.0, 1500), (200, 200, 200))      # ceiling
    b.add_object(1, "crate", _box_cloud(b.rng, (1.5, 1.5, 0.2), (0.4, 0.4, 0.4), 900))
    b.add_object(2, "crate", _box_cloud(b.rng, (4.6, 4.6, 0.2), (0.4, 0.4, 0.4), 900))
    b.add_object(3, "table", _box_cloud(b.rng, (4.5, 4.0, 0.75), (0.9, 0.9, 0.08), 700))
    b.add_object(4, "lamp", _box_cloud(b.rng, (4.5, 4.0, 0.93), (0.2, 0.2, 0.2), 500))
    b.add_object(5, "loft bed", _grid_slab(0.2, 2.6, 0.2, 2.6, (2.38, 2.42), 0.035))
    return b.finish()


def _build_office() -> SceneDef:
    b = _SceneBuilder("office", "ascii", seed=22)
    b.add(_scatter_slab(b.rng, 0, 5, 0, 4, 0.0, 2500), (120, 120, 120))
    b.add(_scatter_slab(b.rng, 0, 5, 0, 4, 2.5, 1200), (200, 200, 200))
    b.add_object(1, "desk", _box_cloud(b.rng, (2.0, 2.0, 0.75), (1.2, 0.6, 0.08), 700))
    b.add_object(2, "chair", _box_cloud(b.rng, (2.0, 1.3, 0.45), (0.45, 0.45, 0.9), 600))
    b.add_object(3, "chair", _box_cloud(b.rng, (3.2, 2.8, 0.45), (0.45, 0.45, 0.9), 600))
    b.add_object(4, "chair", _box_cloud(b.rng, (1.2, 2.9, 0.45), (0.45, 0.45, 0.9), 600))
    b.add_object(5, "trash can", _box_cloud(b.rng, (2.9, 1.2, 0.3), (0.3, 0.3, 0.6), 400))
    b.add_object(6, "monitor", _box_cloud(b.rng, (2.0, 2.1, 1.0), (0.5, 0.1, 0.35), 400))
    return b.finish()


def _build_bedroom() -> SceneDef:
    b = _SceneBuilder("bedroom", "binary", seed=33)
    b.add(_scatter_slab(b.rng, 0, 5, 0, 5, 0.0, 2500), (120, 120, 120))
    b.add(_scatter_slab(b.rng, 0, 5, 0, 5, 2.5, 1200), (200, 200, 200))
    b.add_object(1, "bed", _box_cloud(b.rng, (2.5, 2.0, 0.3), (1.4, 2.0, 0.6), 1200))
    b.add_object(2, "nightstand", _box_cloud(b.rng, (1.5, 3.2, 0.3), (0.4, 0.4, 0.6), 450))
    b.add_object(3, "nightstand", _box_cloud(b.rng, (3.5, 3.2, 0.3), (0.4, 0.4, 0.6), 450))
    b.add_object(4, "lamp", _box_cloud(b.rng, (1.5, 3.2, 0.75), (0.2, 0.2, 0.3), 350))
    b.add_object(5, "lamp", _box_cloud(b.rng, (3.5, 3.2, 0.75), (0.2, 0.2, 0.3), 350))
    b.add_object(6, "dresser", _box_cloud(b.rng, (4.5, 2.0, 0.5), (0.5, 1.0, 1.0), 600))
    return b.finish()


def build_scenes() -> list[SceneDef]:
    return [_build_loftroom(), _build_office(), _build_bedroom()]


# query_id, scene_id, query text, gt object id, (target, anchor) parse truth
QUERIES = [
    ("q01", "loftroom", "the crate under the loft bed", 1, ("crate", "loft bed")),
    ("q02", "loftroom", "the crate near the table", 2, ("crate", "table")),
    ("q03", "loftroom", "the lamp on the table", 4, ("lamp", "table")),
    ("q04", "loftroom", "the table", 3, ("table", None)),
    ("q05", "loftroom", "the loft bed", 5, ("loft bed", None)),
    ("q06", "loftroom", "the crate closest to the table", 2, ("crate", "table")),
    ("q07", "loftroom", "the crate behind the table", 2, ("crate", "table")),
    ("q08", "office", "the chair in front of the desk", 2, ("chair", "desk")),
    ("q09", "office", "the monitor on the desk", 6, ("monitor", "desk")),
    ("q10", "office", "the trash can near the desk", 5, ("trash can", "desk")),
    ("q11", "office", "the desk", 1, ("desk", None)),
    ("q12", "office", "the chair closest to the trash can", 2, ("chair", "trash can")),
    ("q13", "office", "the chair behind the desk", 3, ("chair", "desk")),
    ("q14", "office", "the chair to the left of the desk", 4, ("chair", "desk")),
    ("q15", "bedroom", "the bed", 1, ("bed", None)),
    ("q16", "bedroom", "the dresser", 6, ("dresser", None)),
    ("q17", "bedroom", "the lamp on the nightstand", 4, ("lamp", "nightstand")),
    ("q18", "bedroom", "the nightstand next to the dresser", 3, ("nightstand", "dresser")),
    ("q19", "bedroom", "the lamp closest to the dresser", 5, ("lamp", "dresser")),
    ("q20", "bedroom", "the nightstand to the right of the bed", 3, ("nightstand", "bed")),
]

VIEW_DEP_QUERY_IDS = {"q07", "q08", "q13", "q14", "q20"}


def _query_records(scenes: dict[str, SceneDef]) -> list[QueryRecord]:
    records = []
    for query_id, scene_id, text, gt_id, _ in QUERIES:
        olt = scenes[scene_id].olt()
        gt = olt.lookup(gt_id)
        same_class = sum(1 for r in olt.records if r.label == gt.label)
        tags = {
            "unique" if same_class == 1 else "multiple",
            "easy" if same_class <= 2 else "hard",
            "view_dep" if query_id in VIEW_DEP_QUERY_IDS else "view_indep",
        }
        records.append(QueryRecord(
            query_id=query_id, scene_id=scene_id, query=text,
            gt_label=gt.label, gt_box=gt.box, gt_object_id=gt.id,
            split_tags=frozenset(tags),
        ))
    return records


# ---------------------------------------------------------------------------
# Construction-time checks of the occlusion story
# ---------------------------------------------------------------------------


def _visible_ids(bundle: SceneBundle, parsed: ParsedQuery, strategy) -> set[int]:
    cfg = suite_config(strategy=strategy)
    hybrid = build_hybrid(bundle, parsed, cfg)
    return {m.object_id for m in hybrid.markers}


def _assert_view_story(scenes: dict[str, SceneDef]) -> None:
    """The facts scene 1 is built around, checked against the real pipeline."""
    bundle = scenes["loftroom"].bundle()
    parsed = ParsedQuery("crate", "loft bed", "the crate under the loft bed")

    qa = _visible_ids(bundle, parsed, ViewpointStrategy.QUERY_ALIGNED)
    assert 1 in qa, "query-aligned view must see the crate under the loft"
    assert 2 not in qa, "the far crate should fall outside the query-aligned frame"

    bev = _visible_ids(bundle, parsed, ViewpointStrategy.BIRDS_EYE_VIEW)
    assert 1 not in bev, "the loft slab must hide the crate from straight above"
    assert 2 in bev, "the open-floor crate must be visible from above"


def build_suite(root) -> "SuitePaths":
    """Materialize scenes, detections, and the benchmark file under ``root``."""
    scene_dir = os.path.join(root, "scenes")
    os.makedirs(scene_dir, exist_ok=True)
    scenes = {s.scene_id: s for s in build_scenes()}
    _assert_view_story(scenes)

    for scene in scenes.values():
        ply_path = os.path.join(scene_dir, f"{scene.scene_id}.ply")
        if scene.ply_format == "ascii":
            write_ply_ascii(ply_path, scene.points, scene.colors)
        else:
            write_ply_binary(ply_path, scene.points, scene.colors)
        detections = {
            "scene_id": scene.scene_id,
            "objects": [
                {"id": object_id, "label": label, "indices": list(indices)}
                for object_id, label, indices in scene.objects
            ],
        }
        with open(os.path.join(scene_dir, f"{scene.scene_id}.json"), "w", encoding="utf-8") as fh:
            json.dump(detections, fh)

    records = _query_records(scenes)
    benchmark_path = os.path.join(root, "benchmark.jsonl")
    save_benchmark(records, benchmark_path)
    return SuitePaths(scene_dir, benchmark_path, records, scenes)


@dataclass
class SuitePaths:
    scene_dir: str
    benchmark_path: str
    queries: list
    scenes: dict
