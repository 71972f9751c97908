"""Command-line entry points: ground, bench, render, olt, convert."""

from __future__ import annotations

import argparse
import json
import sys

from .agent import OracleBackend
from .camera import intrinsics_from_fov, look_at_or_fallback
from .errors import SeeGroundError
from .evaluation import (
    convert_scanrefer,
    format_report_table,
    load_benchmark,
    load_nr3d_csv,
    save_benchmark,
    write_report,
)
from .pipeline import (
    SceneBundle,
    load_config,
    make_backend,
    run_benchmark,
    run_query,
    save_run_transcript,
    write_manifest,
)
from .render import render, save_depth, save_image
from .scene import crop_ceiling, ingest_detections, load_point_cloud, save_olt, scene_box
from .viewpoint import (
    ParsedQuery,
    ViewpointStrategy,
    resolve_candidates,
    select_viewpoint,
    static_viewpoint,
)

STRATEGY_CHOICES = [s.value for s in ViewpointStrategy]


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="TOML config file")
    sub.add_argument("--strategy", choices=STRATEGY_CHOICES, help="viewpoint strategy")
    sub.add_argument("--backend", help="agent backend kind (keyword, oracle, recorded, remote)")
    sub.add_argument("--endpoint", help="remote endpoint base URL")
    sub.add_argument("--model", help="remote model name")
    sub.add_argument("--transcript", help="transcript file for the recorded backend")
    sub.add_argument("--dump", help="write per-query debug artifacts under this directory")
    sub.add_argument("--concurrency", type=int, help="parallel query workers")
    sub.add_argument("--tol", type=float, help="visibility depth tolerance in meters")
    sub.add_argument("--marker-policy", choices=["candidates_and_anchor", "all_visible"])
    sub.add_argument("--text-scope", choices=["all_objects", "candidates_only"])
    sub.add_argument("--no-image", action="store_true", help="text-only: send no image")
    sub.add_argument("--no-markers", action="store_true", help="send the unmarked render")
    sub.add_argument("--no-positions", action="store_true", help="omit 3D coordinates from text")


def _config_from_args(args) -> "PipelineConfig":
    overrides: dict = {}
    if args.strategy:
        overrides["strategy"] = args.strategy
    if args.backend:
        overrides["agent.backend"] = args.backend
    if args.endpoint:
        overrides["agent.endpoint"] = args.endpoint
    if args.model:
        overrides["agent.model"] = args.model
    if args.transcript:
        overrides["agent.transcript"] = args.transcript
    if args.dump:
        overrides["dump_dir"] = args.dump
    if args.concurrency is not None:
        overrides["concurrency"] = args.concurrency
    if args.tol is not None:
        overrides["fusion.tol"] = args.tol
    if args.marker_policy:
        overrides["fusion.marker_policy"] = args.marker_policy
    if args.text_scope:
        overrides["text_scope"] = args.text_scope
    if args.no_image:
        overrides["send_image"] = False
    if args.no_markers:
        overrides["markers_enabled"] = False
    if args.no_positions:
        overrides["include_positions"] = False
    return load_config(args.config, overrides)


def _fmt_triple(triple) -> str:
    return "(" + ", ".join(f"{v:.6g}" for v in triple) + ")"


def cmd_ground(args) -> int:
    cfg = _config_from_args(args)
    scene = SceneBundle.load(args.scene_dir, args.scene_id)

    if cfg.agent.backend == "oracle":
        if args.gt is None:
            print("error: --backend oracle needs --gt <object id>", file=sys.stderr)
            return 2
        record = scene.olt.lookup(args.gt)
        backend = OracleBackend(ground_truth={args.query_id: record.id},
                                parse_truth={args.query_id: (record.label, None)})
    else:
        backend = make_backend(cfg.agent)

    outcome = run_query(scene, args.query, backend, cfg, query_id=args.query_id)
    if not outcome.ok:
        print(f"failed at {outcome.stage}: {outcome.error}", file=sys.stderr)
        return 1
    box = outcome.result.predicted_box
    print(f"object {outcome.result.predicted_object_id}")
    print(f"box min={_fmt_triple(box.min)} max={_fmt_triple(box.max)}")
    return 0


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    queries = load_benchmark(args.benchmark)
    backend = make_backend(cfg.agent, queries=queries)
    run = run_benchmark(queries, args.scene_dir, backend, cfg, mode=args.mode)

    print(format_report_table(run.report), end="")
    print(f"manifest hash: {run.manifest['manifest_hash']}")
    if args.report:
        write_report(run.report, args.report)
    if args.manifest:
        write_manifest(run.manifest, args.manifest)
    if args.save_transcript:
        save_run_transcript(run.outcomes, args.save_transcript)
    return 0


def cmd_render(args) -> int:
    cfg = _config_from_args(args)
    scene = SceneBundle.load(args.scene_dir, args.scene_id)
    bounds = scene_box(scene.cloud)

    strategy = ViewpointStrategy(args.strategy) if args.strategy else ViewpointStrategy.BIRDS_EYE_VIEW
    if strategy == ViewpointStrategy.QUERY_ALIGNED:
        if not args.query:
            print("error: --strategy query_aligned needs --query", file=sys.stderr)
            return 2
        from .agent import keyword_parse

        target, anchor_class = keyword_parse(args.query)
        anchor, _ = resolve_candidates(ParsedQuery(target, anchor_class, args.query), scene.olt)
        eye, target_pt = select_viewpoint(bounds, anchor, cfg.view)
    else:
        eye, target_pt = static_viewpoint(strategy, bounds, cfg.view)

    pose = look_at_or_fallback(eye, target_pt)
    intr = intrinsics_from_fov(cfg.view.fov_deg, cfg.render.width, cfg.render.height)
    out = render(crop_ceiling(scene.cloud, cfg.render.ceiling_margin), pose, intr, cfg.render)
    save_image(out.color, args.out)
    if args.depth:
        save_depth(out.depth, args.depth)
    print(f"wrote {args.out}")
    return 0


def cmd_olt(args) -> int:
    cloud = load_point_cloud(args.scene)
    olt = ingest_detections(args.detections, cloud)
    save_olt(olt, args.out)
    print(f"wrote {args.out} ({len(olt)} objects)")
    return 0


def cmd_convert(args) -> int:
    if args.format == "scanrefer":
        with open(args.input, "r", encoding="utf-8") as fh:
            rows = json.load(fh)
        boxes = None
        if args.boxes:
            with open(args.boxes, "r", encoding="utf-8") as fh:
                boxes = json.load(fh)
        records = convert_scanrefer(rows, boxes)
    else:
        records = load_nr3d_csv(args.input)
    save_benchmark(records, args.out)
    print(f"wrote {args.out} ({len(records)} queries)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seeground",
        description="Training-free 3D visual grounding: point cloud + query -> 3D box.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    ground_p = commands.add_parser("ground", help="ground a single query in one scene")
    ground_p.add_argument("--scene-dir", required=True)
    ground_p.add_argument("--scene-id", required=True)
    ground_p.add_argument("--query", required=True)
    ground_p.add_argument("--query-id", default="adhoc", dest="query_id")
    ground_p.add_argument("--gt", type=int, help="ground-truth object id (oracle backend)")
    _add_config_flags(ground_p)
    ground_p.set_defaults(func=cmd_ground)

    bench_p = commands.add_parser("bench", help="run and score a benchmark file")
    bench_p.add_argument("--benchmark", required=True, help="JSON-lines benchmark file")
    bench_p.add_argument("--scene-dir", required=True)
    bench_p.add_argument("--mode", choices=["scanrefer", "nr3d"])
    bench_p.add_argument("--report", help="write the report JSON (and .txt table) here")
    bench_p.add_argument("--manifest", help="write the reproducibility manifest here")
    bench_p.add_argument("--save-transcript", help="write all agent exchanges here (JSONL)")
    _add_config_flags(bench_p)
    bench_p.set_defaults(func=cmd_bench)

    render_p = commands.add_parser("render", help="render a scene view (debug)")
    render_p.add_argument("--scene-dir", required=True)
    render_p.add_argument("--scene-id", required=True)
    render_p.add_argument("--out", required=True, help="output PNG path")
    render_p.add_argument("--depth", help="also dump the raw float32 depth map here")
    render_p.add_argument("--query", help="align the view to this query (query_aligned)")
    _add_config_flags(render_p)
    render_p.set_defaults(func=cmd_render)

    olt_p = commands.add_parser("olt", help="build and persist an object lookup table")
    olt_p.add_argument("--scene", required=True, help="scene PLY file")
    olt_p.add_argument("--detections", required=True, help="detection JSON file")
    olt_p.add_argument("--out", required=True)
    olt_p.set_defaults(func=cmd_olt)

    convert_p = commands.add_parser("convert", help="normalize upstream benchmark files")
    convert_p.add_argument("--format", required=True, choices=["scanrefer", "nr3d"])
    convert_p.add_argument("--input", required=True)
    convert_p.add_argument("--boxes", help="scene_id -> object_id -> box JSON (scanrefer)")
    convert_p.add_argument("--out", required=True)
    convert_p.set_defaults(func=cmd_convert)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SeeGroundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
