"""Per-query and per-benchmark orchestration of the grounding loop.

One query flows parse -> view selection -> render -> markers -> ground ->
validate; a benchmark run executes queries with bounded concurrency over a
shared scene cache and emits a metrics report plus a reproducibility
manifest. With a deterministic backend the manifest hash is identical across
runs and parallelism levels.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import json
import os
import threading
from dataclasses import dataclass, field

import numpy as np

from .agent import (
    DEFAULT_MAX_IN_FLIGHT,
    DEFAULT_MAX_RETRIES,
    DEFAULT_TIMEOUT,
    AgentBackend,
    GroundingAnswer,
    KeywordBackend,
    OracleBackend,
    RecordedBackend,
    RemoteBackend,
    TranscriptLog,
    ground,
    parse_query,
)
from .camera import intrinsics_from_fov, look_at_or_fallback
from .errors import SeeGroundError, UnknownObjectId
from .evaluation import (
    GroundingResult,
    MetricsReport,
    QueryRecord,
    evaluate_nr3d,
    evaluate_scanrefer,
    iou_aabb,
)
from .prompting import (
    DEFAULT_DEPTH_TOL,
    MarkerStyle,
    PromptedImage,
    composite_prompts,
    compute_visibility,
    place_marker,
)
from .render import RenderConfig, RenderOutput, render, save_image
from .scene import (
    ObjectLookupTable,
    PointCloud,
    SpatialText,
    crop_ceiling,
    describe_scene,
    ingest_detections,
    load_point_cloud,
    scene_box,
)
from .util import canonical_json, sha256_hex
from .viewpoint import (
    AnchorSpec,
    CandidateSet,
    ParsedQuery,
    ViewConfig,
    ViewpointStrategy,
    resolve_candidates,
    select_viewpoint,
    static_viewpoint,
)

MARKER_POLICIES = ("candidates_and_anchor", "all_visible")
TEXT_SCOPES = ("all_objects", "candidates_only")


@dataclass(frozen=True)
class FusionConfig:
    """Visibility tolerance, marker style, and which objects get markers."""

    tol: float = DEFAULT_DEPTH_TOL
    marker: MarkerStyle = field(default_factory=MarkerStyle)
    marker_policy: str = "candidates_and_anchor"

    def __post_init__(self):
        if self.tol < 0:
            raise ValueError("tol must be non-negative")
        if self.marker_policy not in MARKER_POLICIES:
            raise ValueError(f"marker_policy must be one of {MARKER_POLICIES}")


@dataclass(frozen=True)
class AgentSettings:
    """Which backend to use and its transport limits."""

    backend: str = "keyword"
    endpoint: str = ""
    model: str = "default"
    transcript: str = ""
    max_retries: int = DEFAULT_MAX_RETRIES
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT
    timeout: float = DEFAULT_TIMEOUT


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs; hashable for the reproducibility manifest.

    The ablation switches map one-to-one onto pipeline stages: ``strategy``
    (bev disables query alignment), ``markers_enabled`` (no visual prompts),
    ``send_image`` (text-only), ``include_positions`` (no 3D coordinates in
    the text). ``concurrency`` and ``dump_dir`` are runtime plumbing and stay
    outside the config hash.
    """

    render: RenderConfig = field(default_factory=RenderConfig)
    view: ViewConfig = field(default_factory=ViewConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    agent: AgentSettings = field(default_factory=AgentSettings)
    strategy: ViewpointStrategy = ViewpointStrategy.QUERY_ALIGNED
    text_scope: str = "all_objects"
    include_positions: bool = True
    send_image: bool = True
    markers_enabled: bool = True
    concurrency: int = 4
    dump_dir: str | None = None

    def __post_init__(self):
        if self.text_scope not in TEXT_SCOPES:
            raise ValueError(f"text_scope must be one of {TEXT_SCOPES}")
        if self.concurrency < 1:
            raise ValueError("concurrency must be at least 1")


def config_hash(cfg: PipelineConfig) -> str:
    """Digest of every result-affecting field (not concurrency or dump_dir)."""
    data = dataclasses.asdict(cfg)
    data["strategy"] = cfg.strategy.value
    data.pop("concurrency")
    data.pop("dump_dir")
    return sha256_hex(canonical_json(data).encode("utf-8"))


def _merge_section(defaults: dict, section: dict, context: str) -> dict:
    for key in section:
        if key not in defaults:
            raise ValueError(f"unknown config key {context}{key}")
    merged = dict(defaults)
    merged.update(section)
    return merged


def _tuple3(value):
    return tuple(int(v) for v in value)


def config_from_dict(data: dict) -> PipelineConfig:
    """Build a PipelineConfig from nested plain data (parsed TOML)."""
    data = dict(data)

    render_kw = _merge_section(dataclasses.asdict(RenderConfig()), data.pop("render", {}), "render.")
    render_kw["background"] = _tuple3(render_kw["background"])
    view_kw = _merge_section(dataclasses.asdict(ViewConfig()), data.pop("view", {}), "view.")

    fusion_section = dict(data.pop("fusion", {}))
    marker_kw = dataclasses.asdict(MarkerStyle())
    for key in list(fusion_section):
        if key in marker_kw:
            marker_kw[key] = fusion_section.pop(key)
    marker_kw["fill"] = _tuple3(marker_kw["fill"])
    marker_kw["border"] = _tuple3(marker_kw["border"])
    fusion_kw = _merge_section({"tol": DEFAULT_DEPTH_TOL, "marker_policy": "candidates_and_anchor"},
                               fusion_section, "fusion.")
    agent_kw = _merge_section(dataclasses.asdict(AgentSettings()), data.pop("agent", {}), "agent.")

    defaults = PipelineConfig()
    top = {name: getattr(defaults, name)
           for name in ("text_scope", "include_positions", "send_image",
                        "markers_enabled", "concurrency", "dump_dir")}
    strategy = ViewpointStrategy(data.pop("strategy", ViewpointStrategy.QUERY_ALIGNED.value))
    top = _merge_section(top, data, "")

    return PipelineConfig(
        render=RenderConfig(**render_kw),
        view=ViewConfig(**view_kw),
        fusion=FusionConfig(tol=fusion_kw["tol"], marker=MarkerStyle(**marker_kw),
                            marker_policy=fusion_kw["marker_policy"]),
        agent=AgentSettings(**agent_kw),
        strategy=strategy,
        **top,
    )


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a TOML config file and apply dotted-key overrides.

    Override keys use the file's structure with dots ("render.width",
    "strategy"); values must already have the right type.
    """
    data: dict = {}
    if path is not None:
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    for dotted, value in (overrides or {}).items():
        parts = dotted.split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneBundle:
    """A loaded scene: id, point cloud, and its object lookup table."""

    scene_id: str
    cloud: PointCloud
    olt: ObjectLookupTable

    @classmethod
    def load(cls, scene_dir, scene_id: str) -> "SceneBundle":
        """Load ``{scene_id}.ply`` and ``{scene_id}.json`` from a directory."""
        cloud = load_point_cloud(os.path.join(scene_dir, f"{scene_id}.ply"))
        olt = ingest_detections(os.path.join(scene_dir, f"{scene_id}.json"), cloud)
        return cls(scene_id, cloud, olt)


class SceneCache:
    """Loads each scene at most once; safe to share across worker threads."""

    def __init__(self, scene_dir):
        self._scene_dir = scene_dir
        self._bundles: dict[str, SceneBundle] = {}
        self._lock = threading.Lock()

    def get(self, scene_id: str) -> SceneBundle:
        with self._lock:
            if scene_id not in self._bundles:
                self._bundles[scene_id] = SceneBundle.load(self._scene_dir, scene_id)
            return self._bundles[scene_id]

    def loaded(self) -> dict[str, SceneBundle]:
        with self._lock:
            return dict(self._bundles)


# ---------------------------------------------------------------------------
# Hybrid construction (one query's view + text)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HybridInputs:
    """Everything build_hybrid produced, kept for artifacts and assertions."""

    prompted: PromptedImage
    text: SpatialText
    candidates: CandidateSet
    anchor: AnchorSpec
    render_out: RenderOutput
    eye: tuple[float, float, float]
    target: tuple[float, float, float]
    visibility: tuple
    markers: tuple


def _marker_records(scene: SceneBundle, candidates: CandidateSet,
                    anchor: AnchorSpec, policy: str):
    if policy == "all_visible":
        return list(scene.olt.records)
    records = {rec.id: rec for rec in candidates.records}
    if anchor.object is not None:
        records.setdefault(anchor.object.id, anchor.object)
    return [records[k] for k in sorted(records)]


def _text_records(scene: SceneBundle, candidates: CandidateSet,
                  anchor: AnchorSpec, scope: str):
    if scope == "all_objects":
        return scene.olt
    records = {rec.id: rec for rec in candidates.records}
    if anchor.object is not None:
        records.setdefault(anchor.object.id, anchor.object)
    return ObjectLookupTable(scene.scene_id, tuple(records[k] for k in sorted(records)))


def build_hybrid(scene: SceneBundle, parsed: ParsedQuery, cfg: PipelineConfig) -> HybridInputs:
    """Resolve candidates, choose the view, render, and mark visible objects.

    The ceiling is cropped out before rendering so elevated cameras see into
    the room; visibility is still tested against the full cloud through the
    rendered depth buffer.
    """
    anchor, candidates = resolve_candidates(parsed, scene.olt)
    bounds = scene_box(scene.cloud)

    if cfg.strategy == ViewpointStrategy.QUERY_ALIGNED:
        eye, target = select_viewpoint(bounds, anchor, cfg.view)
    else:
        eye, target = static_viewpoint(cfg.strategy, bounds, cfg.view)

    pose = look_at_or_fallback(eye, target)
    intr = intrinsics_from_fov(cfg.view.fov_deg, cfg.render.width, cfg.render.height)
    cropped = crop_ceiling(scene.cloud, cfg.render.ceiling_margin)
    out = render(cropped, pose, intr, cfg.render)

    visibility = []
    markers = []
    if cfg.markers_enabled:
        for record in _marker_records(scene, candidates, anchor, cfg.fusion.marker_policy):
            vis = compute_visibility(out, record, scene.cloud, cfg.fusion.tol)
            visibility.append(vis)
            marker = place_marker(vis, cfg.fusion.marker)
            if marker is not None:
                markers.append(marker)

    prompted = composite_prompts(out.color, markers)
    text = describe_scene(_text_records(scene, candidates, anchor, cfg.text_scope),
                          include_positions=cfg.include_positions)

    return HybridInputs(
        prompted=prompted, text=text, candidates=candidates, anchor=anchor,
        render_out=out, eye=tuple(np.asarray(eye, dtype=float)),
        target=tuple(np.asarray(target, dtype=float)),
        visibility=tuple(visibility), markers=tuple(markers),
    )


# ---------------------------------------------------------------------------
# Per-query execution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QueryOutcome:
    """What happened to one query: a result, or the stage that failed."""

    query_id: str
    status: str  # "ok" | "failed"
    stage: str
    error: str | None
    result: GroundingResult | None
    answer: GroundingAnswer | None
    transcript: tuple
    artifacts_dir: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _dump_artifacts(dump_dir, query_id: str, hybrid: HybridInputs | None,
                    transcript: TranscriptLog, cfg: PipelineConfig) -> str:
    out_dir = os.path.join(dump_dir, query_id)
    os.makedirs(out_dir, exist_ok=True)
    if hybrid is not None:
        save_image(hybrid.render_out.color, os.path.join(out_dir, "render.png"))
        save_image(hybrid.prompted.color, os.path.join(out_dir, "prompted.png"))
        with open(os.path.join(out_dir, "spatial.txt"), "w", encoding="utf-8") as fh:
            fh.write(hybrid.text.text + "\n")
        with open(os.path.join(out_dir, "view.json"), "w", encoding="utf-8") as fh:
            json.dump({"eye": list(hybrid.eye), "target": list(hybrid.target),
                       "strategy": cfg.strategy.value}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    with open(os.path.join(out_dir, "transcript.jsonl"), "w", encoding="utf-8") as fh:
        for entry in transcript.entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return out_dir


def run_query(scene: SceneBundle, query: str, backend: AgentBackend,
              cfg: PipelineConfig, query_id: str = "") -> QueryOutcome:
    """Ground one query; stage errors become a failed outcome, not an exception.

    An answer naming an id absent from the scene table triggers one re-ask;
    a second bad id fails the query at stage "ground/validate".
    """
    transcript = TranscriptLog()
    hybrid: HybridInputs | None = None
    stage = "parse"
    try:
        parsed = parse_query(backend, query, query_id=query_id, transcript=transcript)
        stage = "build_hybrid"
        hybrid = build_hybrid(scene, parsed, cfg)
        image = hybrid.prompted if cfg.send_image else None

        stage = "ground"
        answer = ground(backend, query, image, hybrid.text,
                        query_id=query_id, transcript=transcript)
        stage = "ground/validate"
        try:
            record = scene.olt.lookup(answer.object_id)
        except UnknownObjectId:
            stage = "ground"
            answer = ground(backend, query, image, hybrid.text,
                            query_id=query_id, transcript=transcript)
            stage = "ground/validate"
            record = scene.olt.lookup(answer.object_id)

        artifacts_dir = None
        if cfg.dump_dir is not None:
            artifacts_dir = _dump_artifacts(cfg.dump_dir, query_id, hybrid, transcript, cfg)
        result = GroundingResult(query_id, record.id, record.box,
                                 transcript_ref=artifacts_dir or "")
        return QueryOutcome(query_id, "ok", "done", None, result, answer,
                            tuple(transcript.entries), artifacts_dir)
    except (SeeGroundError, ValueError, OSError) as exc:
        artifacts_dir = None
        if cfg.dump_dir is not None:
            artifacts_dir = _dump_artifacts(cfg.dump_dir, query_id, hybrid, transcript, cfg)
        return QueryOutcome(query_id, "failed", stage, str(exc), None, None,
                            tuple(transcript.entries), artifacts_dir)


# ---------------------------------------------------------------------------
# Benchmark runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkRun:
    """A scored benchmark: report, reproducibility manifest, raw outcomes."""

    report: MetricsReport
    manifest: dict
    outcomes: tuple[QueryOutcome, ...]


def make_backend(settings: AgentSettings, queries=None) -> AgentBackend:
    """Instantiate the configured backend kind.

    The oracle needs the benchmark queries to know the true ids; its parse
    truth is each query's own ground-truth label with no anchor.
    """
    kind = settings.backend
    if kind == "keyword":
        return KeywordBackend()
    if kind == "recorded":
        if not settings.transcript:
            raise ValueError("recorded backend needs agent.transcript")
        return RecordedBackend.from_transcript(settings.transcript)
    if kind == "oracle":
        if not queries:
            raise ValueError("oracle backend needs benchmark queries")
        missing = [q.query_id for q in queries if q.gt_object_id is None]
        if missing:
            raise ValueError(f"oracle backend needs gt_object_id (missing for {missing[0]!r})")
        return OracleBackend(
            ground_truth={q.query_id: q.gt_object_id for q in queries},
            parse_truth={q.query_id: (q.gt_label, None) for q in queries},
        )
    if kind == "remote":
        if settings.endpoint:
            return RemoteBackend(settings.endpoint, model=settings.model,
                                 timeout=settings.timeout, max_retries=settings.max_retries,
                                 max_in_flight=settings.max_in_flight)
        return RemoteBackend.from_env(model=settings.model, timeout=settings.timeout,
                                      max_retries=settings.max_retries,
                                      max_in_flight=settings.max_in_flight)
    raise ValueError(f"unknown backend kind {kind!r}")


def _transcript_digest(entries) -> str:
    stripped = [{k: v for k, v in entry.items() if k != "latency_ms"} for entry in entries]
    return sha256_hex(canonical_json(stripped).encode("utf-8"))


def build_manifest(cfg: PipelineConfig, backend: AgentBackend, queries,
                   outcomes) -> dict:
    """Reproducibility record: config hash, backend, per-query outcomes.

    The digest covers everything except timing, so two runs of a
    deterministic backend hash identically regardless of parallelism.
    """
    by_id = {q.query_id: q for q in queries}
    per_query = {}
    for outcome in outcomes:
        entry: dict = {"status": outcome.status, "stage": outcome.stage}
        if outcome.result is not None:
            entry["predicted_id"] = outcome.result.predicted_object_id
            query = by_id.get(outcome.query_id)
            if query is not None and query.gt_box is not None:
                entry["iou"] = iou_aabb(outcome.result.predicted_box, query.gt_box)
        if outcome.error is not None:
            entry["error"] = outcome.error
        entry["transcript_sha256"] = _transcript_digest(outcome.transcript)
        per_query[outcome.query_id] = entry

    manifest = {
        "config_hash": config_hash(cfg),
        "backend": backend.name,
        "queries": per_query,
    }
    manifest["manifest_hash"] = sha256_hex(canonical_json(manifest).encode("utf-8"))
    return manifest


def write_manifest(manifest: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_run_transcript(outcomes, path) -> None:
    """Write every agent exchange of a run as JSON lines, ordered by query id.

    The file replays through the recorded backend: per-query exchange order
    is preserved, and sorting by query id makes the bytes independent of the
    run's parallelism.
    """
    ordered = sorted(outcomes, key=lambda o: o.query_id)
    with open(path, "w", encoding="utf-8") as fh:
        for outcome in ordered:
            for entry in outcome.transcript:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


def run_benchmark(queries, scene_dir, backend: AgentBackend, cfg: PipelineConfig,
                  mode: str | None = None) -> BenchmarkRun:
    """Run every query with bounded concurrency and score the results.

    ``mode`` defaults to box scoring when every query carries a gt_box, else
    id scoring. A missing or unreadable scene fails its queries (stage
    "scene") and the run continues.
    """
    queries = list(queries)
    if mode is None:
        mode = "scanrefer" if all(q.gt_box is not None for q in queries) else "nr3d"
    if mode not in ("scanrefer", "nr3d"):
        raise ValueError(f"unknown mode {mode!r}")

    cache = SceneCache(scene_dir)

    def execute(query: QueryRecord) -> QueryOutcome:
        try:
            bundle = cache.get(query.scene_id)
        except (SeeGroundError, OSError, ValueError) as exc:
            return QueryOutcome(query.query_id, "failed", "scene", str(exc),
                                None, None, ())
        return run_query(bundle, query.query, backend, cfg, query_id=query.query_id)

    if cfg.concurrency == 1:
        outcomes = [execute(q) for q in queries]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
            outcomes = list(pool.map(execute, queries))

    results = [o.result for o in outcomes if o.ok]
    olts = {scene_id: bundle.olt for scene_id, bundle in cache.loaded().items()}
    if mode == "scanrefer":
        report = evaluate_scanrefer(results, queries, olts)
    else:
        report = evaluate_nr3d(results, queries, olts)

    manifest = build_manifest(cfg, backend, queries, outcomes)
    return BenchmarkRun(report, manifest, tuple(outcomes))
