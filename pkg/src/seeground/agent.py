"""Vision-language agent boundary: prompts, backends, transport, reply parsing.

The pipeline talks to its agent through two exchanges per query — a text-only
parse of the query into target/anchor classes, then a grounding call carrying
the marked render and the spatial text. Backends share one behavioral
contract, so a remote multimodal endpoint, a recorded transcript, a scripted
stub, a ground-truth oracle, and a keyword heuristic are interchangeable.
"""

from __future__ import annotations

import abc
import base64
import importlib.resources
import json
import re
import threading
import time
from dataclasses import dataclass, field

from .errors import AgentError, ReplyParseError, TransportError
from .prompting import PromptedImage
from .render import encode_png
from .scene import SpatialText, parse_spatial_line
from .util import sha256_hex
from .viewpoint import ParsedQuery

DEFAULT_TIMEOUT = 120.0
DEFAULT_MAX_RETRIES = 2
DEFAULT_MAX_IN_FLIGHT = 4

ENV_URL = "SEEGROUND_VLM_URL"
ENV_KEY = "SEEGROUND_VLM_KEY"


def _template(name: str) -> str:
    return importlib.resources.files("seeground.prompts").joinpath(name).read_text("utf-8")


@dataclass(frozen=True)
class FewShotSet:
    """Worked parse examples shown to the agent: (query, target, anchor|None)."""

    examples: tuple[tuple[str, str, str | None], ...]

    def __post_init__(self):
        if not self.examples:
            raise ValueError("few-shot set must hold at least one example")
        object.__setattr__(self, "examples", tuple(tuple(e) for e in self.examples))

    def render(self) -> str:
        lines = []
        for query, target, anchor in self.examples:
            lines.append(f"Query: {query}")
            lines.append(f"target: {target}")
            lines.append(f"anchor: {anchor if anchor else 'none'}")
            lines.append("")
        return "\n".join(lines)


DEFAULT_FEW_SHOT = FewShotSet((
    ("the office chair next to the window", "office chair", "window"),
    ("the lamp on the desk", "lamp", "desk"),
    ("the trash can", "trash can", None),
))


@dataclass(frozen=True)
class AgentRequest:
    """One exchange: system/user text, optional PNG image, transcript keys."""

    system_text: str
    user_text: str
    image: bytes | None = None
    query_id: str = ""
    stage: str = ""

    def __post_init__(self):
        if not self.user_text:
            raise ValueError("user_text must be non-empty")


@dataclass(frozen=True)
class GroundingAnswer:
    """The grounding verdict: the chosen object id and the raw reply it came from."""

    object_id: int
    raw_reply: str
    backend_name: str


class AgentBackend(abc.ABC):
    """Behavioral contract every agent implementation satisfies.

    ``deterministic`` declares whether identical requests always produce
    identical replies; the benchmark harness refuses to freeze golden files
    from nondeterministic backends. ``complete`` must be safe for concurrent
    calls.
    """

    name: str = "backend"
    deterministic: bool = False

    @abc.abstractmethod
    def complete(self, request: AgentRequest) -> str:
        """Return the reply text for one request."""


class ScriptedBackend(AgentBackend):
    """Replays canned replies: a fixed string, a sequence, or a callable."""

    deterministic = True

    def __init__(self, replies, name: str = "scripted"):
        self.name = name
        self._lock = threading.Lock()
        if callable(replies):
            self._fn = replies
            self._queue = None
        elif isinstance(replies, str):
            self._fn = None
            self._queue = None
            self._constant = replies
        else:
            self._fn = None
            self._queue = list(replies)
            self._cursor = 0

    def complete(self, request: AgentRequest) -> str:
        if self._fn is not None:
            return self._fn(request)
        if self._queue is None:
            return self._constant
        with self._lock:
            if self._cursor >= len(self._queue):
                raise AgentError("scripted replies exhausted")
            reply = self._queue[self._cursor]
            self._cursor += 1
            return reply


class OracleBackend(AgentBackend):
    """Answers from ground truth; establishes the pipeline's agent-free ceiling.

    ``ground_truth`` maps query_id to the true object id; ``parse_truth``
    maps query_id to (target_class, anchor_class|None) so the parse stage is
    also answered perfectly. Harnesses build parse truth from the benchmark's
    own labels.
    """

    name = "oracle"
    deterministic = True

    def __init__(self, ground_truth, parse_truth=None):
        self._ground_truth = dict(ground_truth)
        self._parse_truth = dict(parse_truth) if parse_truth else {}

    def complete(self, request: AgentRequest) -> str:
        if request.stage == "parse":
            if request.query_id not in self._parse_truth:
                raise AgentError(f"unknown query id {request.query_id!r}")
            target, anchor = self._parse_truth[request.query_id]
            return f"target: {target}\nanchor: {anchor if anchor else 'none'}"
        if request.query_id not in self._ground_truth:
            raise AgentError(f"unknown query id {request.query_id!r}")
        return f"Answer: {self._ground_truth[request.query_id]}"


class RecordedBackend(AgentBackend):
    """Replays a saved transcript, keyed by (query_id, stage) in file order.

    Each key keeps its own cursor, so a query whose stage ran twice (reprompt
    or re-ask) replays both exchanges in the original order regardless of
    benchmark parallelism.
    """

    name = "recorded"
    deterministic = True

    def __init__(self, entries):
        self._replies: dict[tuple[str, str], list[str]] = {}
        for entry in entries:
            key = (entry["query_id"], entry["stage"])
            self._replies.setdefault(key, []).append(entry["reply"])
        self._cursors = {key: 0 for key in self._replies}
        self._lock = threading.Lock()

    @classmethod
    def from_transcript(cls, path) -> "RecordedBackend":
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    entries.append(json.loads(line))
        return cls(entries)

    def complete(self, request: AgentRequest) -> str:
        key = (request.query_id, request.stage)
        with self._lock:
            replies = self._replies.get(key)
            if replies is None:
                raise AgentError(f"no recorded reply for query {request.query_id!r} stage {request.stage!r}")
            cursor = self._cursors[key]
            if cursor >= len(replies):
                raise AgentError(f"recorded replies exhausted for query {request.query_id!r} stage {request.stage!r}")
            self._cursors[key] = cursor + 1
            return replies[cursor]


_RELATION_WORDS = (
    "next to", "closest to", "nearest to", "in front of", "to the left of",
    "to the right of", "left of", "right of", "on top of", "underneath",
    "near", "beside", "under", "below", "above", "over", "behind",
    "on", "by", "opposite", "facing",
)
_QUERY_PATTERN = re.compile(
    r"^the (?P<target>.+?) (?:" + "|".join(re.escape(w) for w in _RELATION_WORDS) + r") the (?P<anchor>.+)$"
)


def keyword_parse(query: str) -> tuple[str, str | None]:
    """Heuristic target/anchor extraction: 'the X <relation> the Y' else 'the X'."""
    text = query.strip().lower().rstrip(".!?")
    m = _QUERY_PATTERN.match(text)
    if m:
        return m.group("target").strip(), m.group("anchor").strip()
    if text.startswith("the "):
        return text[4:].strip(), None
    return text, None


class KeywordBackend(AgentBackend):
    """Deterministic text-only heuristic agent; no model behind it.

    Parse stage: pattern-match the query. Ground stage: read the object list,
    the marker-id line, and the query out of the prompt; keep candidates whose
    class matches the target (restricted to marked ids when any candidate is
    marked), then pick the one nearest the anchor object, ties to the smaller
    id. It is deliberately fooled by views in which the true target lost its
    marker to occlusion.
    """

    name = "keyword"
    deterministic = True

    def complete(self, request: AgentRequest) -> str:
        if request.stage == "parse":
            query = _query_from_prompt(request.user_text)
            target, anchor = keyword_parse(query)
            return f"target: {target}\nanchor: {anchor if anchor else 'none'}"
        return self._ground(request.user_text)

    def _ground(self, user_text: str) -> str:
        query = _query_from_prompt(user_text)
        target, anchor = keyword_parse(query)
        entries = _objects_from_prompt(user_text)
        marked = _marked_ids_from_prompt(user_text)

        candidates = _match_entries(entries, target)
        if not candidates:
            candidates = entries
        if marked is not None:
            marked_candidates = [e for e in candidates if e[0] in marked]
            if marked_candidates:
                candidates = marked_candidates

        if anchor is not None:
            anchors = [e for e in _match_entries(entries, anchor) if e[0] not in {c[0] for c in candidates}]
            if anchors and all(e[2] is not None for e in anchors + candidates):
                ax, ay, az = anchors[0][2]
                def dist(entry):
                    cx, cy, cz = entry[2]
                    return ((cx - ax) ** 2 + (cy - ay) ** 2 + (cz - az) ** 2) ** 0.5
                best = min(candidates, key=lambda e: (dist(e), e[0]))
                return f"Answer: {best[0]}"
        return f"Answer: {candidates[0][0]}"


def _query_from_prompt(user_text: str) -> str:
    queries = re.findall(r"^Query: (.*)$", user_text, flags=re.MULTILINE)
    if not queries:
        raise AgentError("prompt carries no query line")
    return queries[-1]


def _objects_from_prompt(user_text: str):
    entries = []
    in_block = False
    for line in user_text.splitlines():
        if line.strip() == "Objects:":
            in_block = True
            continue
        if in_block:
            if not line.strip():
                break
            object_id, label, center, _ = parse_spatial_line(line.strip())
            entries.append((object_id, label, center))
    return entries


def _marked_ids_from_prompt(user_text: str):
    m = re.search(r"^Markers visible in the image: (.*)$", user_text, flags=re.MULTILINE)
    if m is None:
        return None
    listed = m.group(1).strip()
    if listed.lower() == "none":
        return set()
    return {int(tok) for tok in re.findall(r"\d+", listed)}


def _match_entries(entries, query_class: str):
    exact = [e for e in entries if e[1] == query_class]
    if exact:
        return exact
    return [e for e in entries if e[1] in query_class or query_class in e[1]]


class RemoteBackend(AgentBackend):
    """OpenAI-compatible chat-completions client over HTTP.

    Sends system/user messages with the image inlined as a base64 PNG data
    URL at temperature 0; reads the reply from the first choice. Failed
    requests retry with exponential backoff up to ``max_retries`` times; an
    in-flight semaphore caps concurrent requests.
    """

    deterministic = False

    def __init__(self, base_url: str, api_key: str = "", model: str = "default",
                 timeout: float = DEFAULT_TIMEOUT, max_retries: int = DEFAULT_MAX_RETRIES,
                 max_in_flight: int = DEFAULT_MAX_IN_FLIGHT):
        if not base_url:
            raise ValueError("base_url must be non-empty")
        self._base_url = base_url.rstrip("/")
        self._api_key = api_key
        self._model = model
        self._timeout = timeout
        self._max_retries = max_retries
        self._slots = threading.Semaphore(max_in_flight)
        self.name = f"remote:{model}"

    @classmethod
    def from_env(cls, model: str = "default", **kwargs) -> "RemoteBackend":
        import os

        url = os.environ.get(ENV_URL, "")
        if not url:
            raise AgentError(f"{ENV_URL} is not set")
        return cls(url, api_key=os.environ.get(ENV_KEY, ""), model=model, **kwargs)

    def _payload(self, request: AgentRequest) -> dict:
        content: list[dict] = [{"type": "text", "text": request.user_text}]
        if request.image is not None:
            encoded = base64.b64encode(request.image).decode("ascii")
            content.append({
                "type": "image_url",
                "image_url": {"url": f"data:image/png;base64,{encoded}"},
            })
        return {
            "model": self._model,
            "temperature": 0.0,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": content},
            ],
        }

    def complete(self, request: AgentRequest) -> str:
        import requests

        payload = self._payload(request)
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"

        last_error = None
        with self._slots:
            for attempt in range(self._max_retries + 1):
                if attempt:
                    time.sleep(2.0 ** (attempt - 1))
                try:
                    response = requests.post(
                        f"{self._base_url}/chat/completions",
                        json=payload, headers=headers, timeout=self._timeout,
                    )
                    response.raise_for_status()
                    body = response.json()
                    return body["choices"][0]["message"]["content"]
                except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
                    last_error = exc
        raise TransportError(f"remote completion failed: {last_error}", retries=self._max_retries)


# ---------------------------------------------------------------------------
# Transcripts
# ---------------------------------------------------------------------------


@dataclass
class TranscriptLog:
    """Thread-safe exchange log; optionally mirrored to a JSON-lines file."""

    path: str | None = None
    entries: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()

    def record(self, request: AgentRequest, reply: str, latency_ms: float) -> dict:
        entry = {
            "query_id": request.query_id,
            "stage": request.stage,
            "request_text": request.system_text + "\n\n" + request.user_text,
        }
        if request.image is not None:
            entry["image_sha256"] = sha256_hex(request.image)
        entry["reply"] = reply
        entry["latency_ms"] = latency_ms
        with self._lock:
            self.entries.append(entry)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry


def _exchange(backend: AgentBackend, request: AgentRequest,
              transcript: TranscriptLog | None) -> str:
    started = time.perf_counter()
    reply = backend.complete(request)
    latency_ms = (time.perf_counter() - started) * 1000.0
    if transcript is not None:
        transcript.record(request, reply, latency_ms)
    return reply


# ---------------------------------------------------------------------------
# The two agent calls
# ---------------------------------------------------------------------------

_TARGET_LINE = re.compile(r"^\s*target:\s*(.+?)\s*$", re.IGNORECASE | re.MULTILINE)
_ANCHOR_LINE = re.compile(r"^\s*anchor:\s*(.+?)\s*$", re.IGNORECASE | re.MULTILINE)
_ANSWER_TOKEN = re.compile(r"answer:", re.IGNORECASE)
_FIRST_INT = re.compile(r"\d+")
_STANDALONE_INT = re.compile(r"(?<![\w.])(\d+)(?![\w.])")


def parse_answer(raw: str) -> int:
    """Extract the chosen id: first integer after the last 'Answer:' token,
    else the last standalone integer anywhere in the reply."""
    matches = list(_ANSWER_TOKEN.finditer(raw))
    if matches:
        tail = raw[matches[-1].end():]
        m = _FIRST_INT.search(tail)
        if m:
            return int(m.group())
    standalone = _STANDALONE_INT.findall(raw)
    if standalone:
        return int(standalone[-1])
    raise ReplyParseError(f"no integer found in reply: {raw!r}")


def _parse_classes(reply: str) -> ParsedQuery | None:
    target = _TARGET_LINE.search(reply)
    anchor = _ANCHOR_LINE.search(reply)
    if target is None or anchor is None:
        return None
    target_class = target.group(1).strip().lower()
    if not target_class or target_class == "none":
        return None
    return ParsedQuery(target_class, anchor.group(1), raw_query="")


def parse_query(backend: AgentBackend, query: str,
                fewshot: FewShotSet = DEFAULT_FEW_SHOT,
                query_id: str = "",
                transcript: TranscriptLog | None = None) -> ParsedQuery:
    """Ask the agent for the query's target/anchor classes (one reprompt)."""
    if not query:
        raise ValueError("query must be non-empty")
    system_text = _template("parse_system.txt")
    user_text = _template("parse_user.txt").format(examples=fewshot.render(), query=query)
    request = AgentRequest(system_text, user_text, query_id=query_id, stage="parse")
    parsed = _parse_classes(_exchange(backend, request, transcript))
    if parsed is None:
        retry_text = _template("parse_retry.txt").format(query=query)
        retry = AgentRequest(system_text, retry_text, query_id=query_id, stage="parse")
        parsed = _parse_classes(_exchange(backend, retry, transcript))
    if parsed is None:
        raise ReplyParseError("unparseable parse reply")
    return ParsedQuery(parsed.target_class, parsed.anchor_class, raw_query=query)


def marker_ids_line(image: PromptedImage) -> str:
    """The prompt line naming which ids are actually marked in the image."""
    if not image.markers:
        return "none"
    return ", ".join(str(m.object_id) for m in image.markers)


def ground(backend: AgentBackend, query: str, image: PromptedImage | None,
           text: SpatialText,
           query_id: str = "",
           transcript: TranscriptLog | None = None) -> GroundingAnswer:
    """Ask the agent which object the query refers to (one reprompt).

    ``image`` may be None for the text-only ablation; the marker line then
    reads "none" and no image payload is attached.
    """
    system_text = _template("ground_system.txt")
    marker_ids = marker_ids_line(image) if image is not None else "none"
    user_text = _template("ground_user.txt").format(
        spatial_text=text.text, marker_ids=marker_ids, query=query)
    payload = encode_png(image.color) if image is not None else None
    request = AgentRequest(system_text, user_text, image=payload,
                           query_id=query_id, stage="ground")
    reply = _exchange(backend, request, transcript)
    try:
        object_id = parse_answer(reply)
    except ReplyParseError:
        retry_text = _template("ground_retry.txt").format(query=query)
        retry = AgentRequest(system_text, retry_text, image=payload,
                             query_id=query_id, stage="ground")
        reply = _exchange(backend, retry, transcript)
        try:
            object_id = parse_answer(reply)
        except ReplyParseError:
            raise ReplyParseError("unparseable grounding reply") from None
    return GroundingAnswer(object_id, reply, backend.name)
