"""seeground: training-free 3D visual grounding from point clouds and language.

A query about a scene ("the lamp on the desk") is grounded to a 3D bounding
box by rendering a query-aligned view of the point cloud, marking visible
candidate objects, describing the scene as text, and letting a
vision-language agent pick the object id from the resulting hybrid prompt.
"""

from .camera import (
    CameraPose,
    Intrinsics,
    Projection,
    intrinsics_from_fov,
    look_at_or_fallback,
    look_at_view_transform,
    pixel_round,
    project,
    project_points,
)
from .errors import (
    AgentError,
    BehindCamera,
    DegenerateUp,
    DetectionError,
    EmptyCropError,
    EmptyObjectError,
    EvalError,
    PlyError,
    ReplyParseError,
    SeeGroundError,
    TargetNotInScene,
    TransportError,
    UnknownObjectId,
)
from .scene import (
    Aabb,
    ObjectLookupTable,
    ObjectRecord,
    PointCloud,
    SpatialText,
    crop_ceiling,
    describe_scene,
    ingest_detections,
    load_olt,
    load_point_cloud,
    save_olt,
    scene_box,
)
from .render import RenderConfig, RenderOutput, render, save_image
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
from .prompting import (
    MarkerSpec,
    MarkerStyle,
    PromptedImage,
    VisibilityResult,
    composite_prompts,
    compute_visibility,
    place_marker,
)
from .agent import (
    AgentBackend,
    AgentRequest,
    FewShotSet,
    GroundingAnswer,
    KeywordBackend,
    OracleBackend,
    RecordedBackend,
    RemoteBackend,
    ScriptedBackend,
    TranscriptLog,
    ground,
    parse_answer,
    parse_query,
)
from .evaluation import (
    GroundingResult,
    MetricsReport,
    QueryRecord,
    SplitScores,
    classify_unique_multiple,
    evaluate_nr3d,
    evaluate_scanrefer,
    iou_aabb,
    load_benchmark,
    read_report,
    save_benchmark,
    write_report,
)
from .pipeline import (
    AgentSettings,
    BenchmarkRun,
    FusionConfig,
    HybridInputs,
    PipelineConfig,
    QueryOutcome,
    SceneBundle,
    SceneCache,
    build_hybrid,
    config_hash,
    load_config,
    make_backend,
    run_benchmark,
    run_query,
)

__version__ = "0.1.0"
