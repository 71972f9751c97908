"""Benchmark records, IoU scoring, split classification, and reports.

Two scoring modes mirror the two benchmark conventions: box-overlap accuracy
at IoU 0.25/0.5 over detected boxes, and plain id-selection accuracy over
ground-truth boxes. Errored or missing predictions always score as wrong so
accuracies stay comparable across backends with different failure rates.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass

from .errors import EvalError
from .scene import Aabb, ObjectLookupTable
from .util import format_half_up
from .viewpoint import match_records

logger = logging.getLogger(__name__)

ALLOWED_TAGS = frozenset({"unique", "multiple", "easy", "hard", "view_dep", "view_indep"})

# Words that make a query's meaning depend on where the observer stands.
VIEW_DEP_TOKENS = frozenset({
    "front", "behind", "back", "left", "right", "facing",
    "leftmost", "rightmost", "looking", "across",
})

SCANREFER_SPLITS = ("unique", "multiple")
NR3D_SPLITS = ("easy", "hard", "view_dep", "view_indep")


@dataclass(frozen=True)
class QueryRecord:
    """One benchmark row: the query plus its ground truth and split tags."""

    query_id: str
    scene_id: str
    query: str
    gt_label: str
    gt_box: Aabb | None = None
    gt_object_id: int | None = None
    split_tags: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.gt_box is None and self.gt_object_id is None:
            raise ValueError(f"query {self.query_id!r} has neither gt_box nor gt_object_id")
        tags = frozenset(self.split_tags)
        unknown = tags - ALLOWED_TAGS
        if unknown:
            raise ValueError(f"unknown split tags {sorted(unknown)}")
        object.__setattr__(self, "split_tags", tags)
        object.__setattr__(self, "gt_label", self.gt_label.strip().lower())


@dataclass(frozen=True)
class GroundingResult:
    """A successful prediction: the chosen id and its box from the scene table."""

    query_id: str
    predicted_object_id: int
    predicted_box: Aabb
    transcript_ref: str = ""


@dataclass(frozen=True)
class SplitScores:
    """Counts and accuracies for one split (or the overall row)."""

    n: int
    acc_at_25: float | None = None
    acc_at_50: float | None = None
    accuracy: float | None = None


@dataclass(frozen=True)
class MetricsReport:
    """Scored benchmark run: overall plus per-split rows, in a fixed order."""

    mode: str
    overall: SplitScores
    splits: tuple[tuple[str, SplitScores], ...]
    failures: int
    tag_source: str | None = None

    def __post_init__(self):
        if self.mode not in ("scanrefer", "nr3d"):
            raise ValueError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "splits", tuple(self.splits))

    def split(self, name: str) -> SplitScores:
        for key, scores in self.splits:
            if key == name:
                return scores
        raise KeyError(name)


def iou_aabb(a: Aabb, b: Aabb) -> float:
    """Intersection volume over union volume; 0 for disjoint or degenerate boxes."""
    inter = 1.0
    for axis in range(3):
        lo = max(a.min[axis], b.min[axis])
        hi = min(a.max[axis], b.max[axis])
        if hi <= lo:
            return 0.0
        inter *= hi - lo
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def classify_unique_multiple(record: QueryRecord, olt: ObjectLookupTable) -> str:
    """"unique" when exactly one table record matches the query's class."""
    matches = match_records(olt, record.gt_label)
    if not matches:
        logger.warning("query %s: label %r matches nothing in scene %s; tagged multiple",
                       record.query_id, record.gt_label, record.scene_id)
        return "multiple"
    return "unique" if len(matches) == 1 else "multiple"


def _index_results(results) -> dict[str, GroundingResult]:
    indexed: dict[str, GroundingResult] = {}
    for result in results:
        if result.query_id in indexed:
            raise EvalError(f"duplicate result for query {result.query_id!r}")
        indexed[result.query_id] = result
    return indexed


def _ratio(count: int, n: int) -> float:
    return count / n if n else 0.0


def evaluate_scanrefer(results, queries, olts) -> MetricsReport:
    """Box-overlap scoring: correct at threshold t iff IoU(predicted, gt) >= t.

    ``olts`` maps scene_id to that scene's object table (for the
    unique/multiple classification). Queries without a result count as
    incorrect and as failures.
    """
    indexed = _index_results(results)
    known = {q.query_id for q in queries}
    for query_id in indexed:
        if query_id not in known:
            raise EvalError(f"result references unknown query {query_id!r}")

    hits25: dict[str, int] = {"overall": 0, "unique": 0, "multiple": 0}
    hits50: dict[str, int] = {"overall": 0, "unique": 0, "multiple": 0}
    counts: dict[str, int] = {"overall": 0, "unique": 0, "multiple": 0}
    failures = 0

    for query in queries:
        if query.gt_box is None:
            raise EvalError(f"query {query.query_id!r} has no gt_box for box scoring")
        if query.split_tags & {"unique", "multiple"}:
            tag = "unique" if "unique" in query.split_tags else "multiple"
        else:
            olt = olts.get(query.scene_id) if olts else None
            tag = classify_unique_multiple(query, olt) if olt is not None else "multiple"

        counts["overall"] += 1
        counts[tag] += 1
        result = indexed.get(query.query_id)
        if result is None:
            failures += 1
            continue
        overlap = iou_aabb(result.predicted_box, query.gt_box)
        if overlap >= 0.25:
            hits25["overall"] += 1
            hits25[tag] += 1
        if overlap >= 0.50:
            hits50["overall"] += 1
            hits50[tag] += 1

    def scores(key: str) -> SplitScores:
        return SplitScores(n=counts[key],
                           acc_at_25=_ratio(hits25[key], counts[key]),
                           acc_at_50=_ratio(hits50[key], counts[key]))

    return MetricsReport(
        mode="scanrefer",
        overall=scores("overall"),
        splits=tuple((name, scores(name)) for name in SCANREFER_SPLITS),
        failures=failures,
    )


def query_is_view_dependent(query: str) -> bool:
    """Token-list heuristic for view dependence, used when metadata is absent."""
    words = set(re.findall(r"[a-z]+", query.lower()))
    return bool(words & VIEW_DEP_TOKENS)


def _nr3d_tags(query: QueryRecord, olts) -> tuple[set[str], str]:
    """(tags, source) for one query: metadata when present, else fallback rules."""
    tags = set(query.split_tags)
    source = "metadata"
    if not tags & {"easy", "hard"}:
        source = "fallback"
        olt = olts.get(query.scene_id) if olts else None
        if olt is not None:
            same_class = len(match_records(olt, query.gt_label))
            tags.add("easy" if same_class <= 2 else "hard")
        else:
            tags.add("easy")
    if not tags & {"view_dep", "view_indep"}:
        source = "fallback" if source == "fallback" else "mixed"
        tags.add("view_dep" if query_is_view_dependent(query.query) else "view_indep")
    return tags, source


def evaluate_nr3d(results, queries, olts=None) -> MetricsReport:
    """Id-selection scoring: correct iff the predicted id is the ground-truth id.

    Easy/hard and view-dependence tags come from the benchmark metadata when
    present; otherwise a fallback classifies easy as at most two same-class
    instances in the scene (needs ``olts``) and view-dependence by a token
    list. The report records which rule applied.
    """
    indexed = _index_results(results)
    known = {q.query_id for q in queries}
    for query_id in indexed:
        if query_id not in known:
            raise EvalError(f"result references unknown query {query_id!r}")

    hits = {name: 0 for name in ("overall",) + NR3D_SPLITS}
    counts = {name: 0 for name in ("overall",) + NR3D_SPLITS}
    failures = 0
    sources: set[str] = set()

    for query in queries:
        if query.gt_object_id is None:
            raise EvalError(f"query {query.query_id!r} has no gt_object_id for id scoring")
        tags, source = _nr3d_tags(query, olts)
        sources.add(source)
        buckets = ["overall"] + [name for name in NR3D_SPLITS if name in tags]

        for name in buckets:
            counts[name] += 1
        result = indexed.get(query.query_id)
        if result is None:
            failures += 1
            continue
        if result.predicted_object_id == query.gt_object_id:
            for name in buckets:
                hits[name] += 1

    if not sources:
        tag_source = "metadata"
    elif sources == {"metadata"}:
        tag_source = "metadata"
    elif sources == {"fallback"}:
        tag_source = "fallback"
    else:
        tag_source = "mixed"

    def scores(key: str) -> SplitScores:
        return SplitScores(n=counts[key], accuracy=_ratio(hits[key], counts[key]))

    return MetricsReport(
        mode="nr3d",
        overall=scores("overall"),
        splits=tuple((name, scores(name)) for name in NR3D_SPLITS),
        failures=failures,
        tag_source=tag_source,
    )


# ---------------------------------------------------------------------------
# Report persistence
# ---------------------------------------------------------------------------


def _scores_to_json(scores: SplitScores) -> dict:
    out: dict = {"n": scores.n}
    if scores.acc_at_25 is not None:
        out["acc_at_25"] = scores.acc_at_25
    if scores.acc_at_50 is not None:
        out["acc_at_50"] = scores.acc_at_50
    if scores.accuracy is not None:
        out["accuracy"] = scores.accuracy
    return out


def _scores_from_json(data: dict) -> SplitScores:
    return SplitScores(n=int(data["n"]),
                       acc_at_25=data.get("acc_at_25"),
                       acc_at_50=data.get("acc_at_50"),
                       accuracy=data.get("accuracy"))


def _percent(value: float | None) -> str:
    return format_half_up(100.0 * (value or 0.0), 1)


def format_report_table(report: MetricsReport) -> str:
    """Fixed-order aligned text table with half-up one-decimal percentages."""
    if report.mode == "scanrefer":
        header = ("split", "n", "Acc@0.25", "Acc@0.50")
        def row(name, s):
            return (name, str(s.n), _percent(s.acc_at_25), _percent(s.acc_at_50))
    else:
        header = ("split", "n", "Acc")
        def row(name, s):
            return (name, str(s.n), _percent(s.accuracy))

    rows = [header]
    if report.overall.n:
        rows.append(row("overall", report.overall))
        rows.extend(row(name, s) for name, s in report.splits if s.n)

    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i])
                       for i, cell in enumerate(r)) for r in rows]
    lines.append("")
    lines.append(f"failures: {report.failures}")
    if report.tag_source is not None:
        lines.append(f"tags: {report.tag_source}")
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, path) -> None:
    """Write the report as JSON at ``path`` and as a text table at ``path``.txt."""
    payload = {
        "mode": report.mode,
        "failures": report.failures,
        "overall": _scores_to_json(report.overall),
        "splits": {name: _scores_to_json(s) for name, s in report.splits},
        "split_order": [name for name, _ in report.splits],
    }
    if report.tag_source is not None:
        payload["tag_source"] = report.tag_source
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(str(path) + ".txt", "w", encoding="utf-8") as fh:
        fh.write(format_report_table(report))


def read_report(path) -> MetricsReport:
    """Load a report written by :func:`write_report` (field-exact round trip)."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    order = data.get("split_order", sorted(data["splits"]))
    return MetricsReport(
        mode=data["mode"],
        overall=_scores_from_json(data["overall"]),
        splits=tuple((name, _scores_from_json(data["splits"][name])) for name in order),
        failures=int(data["failures"]),
        tag_source=data.get("tag_source"),
    )


# ---------------------------------------------------------------------------
# Benchmark files and dataset converters
# ---------------------------------------------------------------------------


def _record_to_json(record: QueryRecord) -> dict:
    out: dict = {
        "query_id": record.query_id,
        "scene_id": record.scene_id,
        "query": record.query,
        "gt_label": record.gt_label,
    }
    if record.gt_box is not None:
        out["gt_box"] = {"min": list(record.gt_box.min), "max": list(record.gt_box.max)}
    if record.gt_object_id is not None:
        out["gt_object_id"] = record.gt_object_id
    if record.split_tags:
        out["split_tags"] = sorted(record.split_tags)
    return out


def _record_from_json(data: dict) -> QueryRecord:
    box = None
    if data.get("gt_box") is not None:
        box = Aabb(tuple(data["gt_box"]["min"]), tuple(data["gt_box"]["max"]))
    gt_object_id = data.get("gt_object_id")
    return QueryRecord(
        query_id=str(data["query_id"]),
        scene_id=str(data["scene_id"]),
        query=str(data["query"]),
        gt_label=str(data.get("gt_label", "")),
        gt_box=box,
        gt_object_id=int(gt_object_id) if gt_object_id is not None else None,
        split_tags=frozenset(data.get("split_tags", ())),
    )


def save_benchmark(records, path) -> None:
    """Write benchmark rows as JSON lines, one query per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(_record_to_json(record), sort_keys=True) + "\n")


def load_benchmark(path) -> list[QueryRecord]:
    """Read a JSON-lines benchmark file."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(_record_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise EvalError(f"{path}:{lineno}: bad benchmark row: {exc}") from exc
    return records


def _normalize_label(label: str) -> str:
    return label.strip().lower().replace("_", " ")


def convert_scanrefer(rows, boxes=None) -> list[QueryRecord]:
    """Normalize upstream referring-expression rows (JSON list form).

    Rows carry scene_id / object_id / ann_id / description / object_name.
    ``boxes`` optionally maps scene_id -> object_id -> {min, max} to attach
    ground-truth boxes (the upstream annotations ship boxes separately).
    """
    records = []
    for row in rows:
        scene_id = str(row["scene_id"])
        object_id = int(row["object_id"])
        query_id = f"{scene_id}_{object_id}_{row.get('ann_id', 0)}"
        box = None
        if boxes is not None:
            per_scene = boxes.get(scene_id, {})
            raw = per_scene.get(str(object_id), per_scene.get(object_id))
            if raw is not None:
                box = Aabb(tuple(raw["min"]), tuple(raw["max"]))
        records.append(QueryRecord(
            query_id=query_id,
            scene_id=scene_id,
            query=str(row["description"]),
            gt_label=_normalize_label(str(row["object_name"])),
            gt_box=box,
            gt_object_id=object_id,
        ))
    return records


_STIMULUS_INT = re.compile(r"^\d+$")


def parse_stimulus_id(stimulus_id: str):
    """Split 'scene-label-count-target[-distractors...]' (label may contain '-').

    Returns (scene_id, label, n_objects, target_id, distractor_ids).
    """
    parts = stimulus_id.split("-")
    if len(parts) < 4:
        raise EvalError(f"malformed stimulus id {stimulus_id!r}")
    scene_id = parts[0]
    first_int = next((i for i in range(1, len(parts)) if _STIMULUS_INT.match(parts[i])), None)
    if first_int is None or first_int == 1 or first_int + 1 >= len(parts):
        raise EvalError(f"malformed stimulus id {stimulus_id!r}")
    label = " ".join(parts[1:first_int])
    try:
        n_objects = int(parts[first_int])
        target_id = int(parts[first_int + 1])
        distractors = tuple(int(p) for p in parts[first_int + 2:])
    except (ValueError, IndexError) as exc:
        raise EvalError(f"malformed stimulus id {stimulus_id!r}") from exc
    return scene_id, _normalize_label(label), n_objects, target_id, distractors


def convert_nr3d(rows) -> list[QueryRecord]:
    """Normalize upstream id-selection rows (CSV dict form).

    Rows carry stimulus_id and utterance; easy/hard derive from the same-class
    count embedded in the stimulus id (easy iff at most 2) and view-dependence
    from the token heuristic.
    """
    records = []
    for row in rows:
        scene_id, label, n_objects, target_id, _ = parse_stimulus_id(str(row["stimulus_id"]))
        query = str(row["utterance"])
        tags = {"easy" if n_objects <= 2 else "hard"}
        tags.add("view_dep" if query_is_view_dependent(query) else "view_indep")
        records.append(QueryRecord(
            query_id=str(row["stimulus_id"]),
            scene_id=scene_id,
            query=query,
            gt_label=label,
            gt_object_id=target_id,
            split_tags=frozenset(tags),
        ))
    return records


def load_nr3d_csv(path) -> list[QueryRecord]:
    """Read an upstream CSV (stimulus_id, utterance columns) and normalize it."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return convert_nr3d(csv.DictReader(fh))
