"""Episodic note extraction and chunking.

``extract_notes`` segments a session and extracts notes with a single
completion call (plus bounded re-prompts on invalid output). The other
entry points need no model: ``fallback_extract`` is a deterministic
stand-in for offline runs, and ``chunk_baseline`` provides the fixed-length
and semantic chunkers used for chunking ablations.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Literal

from .embeddings import Embedder, cosine_similarity
from .errors import CoverageRepairFailed, EmptySession, MalformedExtraction, ZeroVector
from .llm import Backend, ChatTurn
from .model import ConversationSession, Event, Fact, MemoryNote

logger = logging.getLogger(__name__)

FIXED_CHUNK_TOKENS = 512
FIXED_OVERLAP_RATIO = 0.25
SEMANTIC_PERCENTILE = 8.0

NOTE_KEYS = ("start_idx", "end_idx", "summary", "keywords", "persons", "facts", "events", "tag")

STOPWORDS = frozenset("""
about above after again against also always another anything around because been
before being below between both came come could does doing done down during each
even ever every from further going gonna good great have having here hers herself
himself into just know like little look made make many maybe more most much must
myself never next nice only other ours ourselves over pretty quite really right
said same should since some something still such sure take than thank thanks that
their theirs them themselves then there these they thing things think this those
though through time together very want wanna well were what when where which while
will with would yeah your yours yourself yourselves
""".split())

_TEMPORAL_RE = re.compile(
    r"\b(January|February|March|April|May|June|July|August|September|October|November|"
    r"December|Monday|Tuesday|Wednesday|Thursday|Friday|Saturday|Sunday)\b"
)
_ALPHA_RE = re.compile(r"[A-Za-z]+")
_PUNCT_STRIP = ".,!?;:\"()[]{}"


def load_prompt(name: str) -> str:
    return resources.files("toolmem").joinpath("prompts", name).read_text(encoding="utf-8")


@dataclass
class ExtractionConfig:
    prompt_template: str = field(default_factory=lambda: load_prompt("extract.txt"))
    chunk_prompt_template: str = field(default_factory=lambda: load_prompt("extract_chunk.txt"))
    overlap_msgs: int = 1
    max_repair_attempts: int = 1
    fallback_window: int = 10

    def __post_init__(self) -> None:
        if self.overlap_msgs < 0:
            raise ValueError(f"overlap_msgs must be >= 0, got {self.overlap_msgs}")
        if self.max_repair_attempts < 0:
            raise ValueError(f"max_repair_attempts must be >= 0, got {self.max_repair_attempts}")
        if self.fallback_window < 2:
            raise ValueError(f"fallback_window must be >= 2, got {self.fallback_window}")


@dataclass
class ExtractionResult:
    notes: list[MemoryNote]
    calls: int
    repair_attempts: int
    repairs: list[str] = field(default_factory=list)


def render_session(session: ConversationSession, start: int = 0, end: int | None = None) -> str:
    end = len(session.messages) - 1 if end is None else end
    lines = [f"Session timestamp: {session.timestamp}"]
    lines += [f"[{m.index}] {m.speaker}: {m.text}" for m in session.messages[start : end + 1]]
    return "\n".join(lines)


class _InvalidOutput(ValueError):
    pass


class _NoNotes(_InvalidOutput):
    pass


def _json_payload(content: str, opener: str, closer: str) -> Any:
    text = content.strip()
    fence = re.search(r"```(?:json)?\s*(.*?)```", text, re.DOTALL)
    if fence:
        text = fence.group(1).strip()
    lo, hi = text.find(opener), text.rfind(closer)
    if lo < 0 or hi < lo:
        raise _InvalidOutput(f"no JSON {opener}...{closer} found in output")
    try:
        return json.loads(text[lo : hi + 1])
    except ValueError as exc:
        raise _InvalidOutput(f"invalid JSON: {exc}") from exc


def _as_int(value: Any, key: str, i: int) -> int:
    if isinstance(value, bool):
        raise _InvalidOutput(f"note {i}: {key} must be an integer")
    try:
        return int(value)
    except (TypeError, ValueError):
        raise _InvalidOutput(f"note {i}: {key} must be an integer, got {value!r}") from None


def _str_list(value: Any, key: str, i: int) -> list[str]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise _InvalidOutput(f"note {i}: {key} must be a list of strings")
    return [v for v in value if v.strip()]


def _note_fields(rec: Any, i: int) -> dict[str, Any]:
    """Validate the content keys of one note record (everything but the range)."""
    if not isinstance(rec, dict):
        raise _InvalidOutput(f"note {i}: expected an object")
    for key in ("summary", "tag"):
        if not isinstance(rec.get(key), str) or not rec[key].strip():
            raise _InvalidOutput(f"note {i}: {key} must be a non-empty string")
    facts, events = rec.get("facts"), rec.get("events")
    if not isinstance(facts, list) or not isinstance(events, list):
        raise _InvalidOutput(f"note {i}: facts and events must be lists")
    try:
        fact_objs = [Fact(str(f["person"]).strip(), str(f["statement"]).strip()) for f in facts]
        event_objs = [
            Event(str(e["description"]).strip(), str(e.get("temporal_ref") or "").strip())
            for e in events
        ]
    except (KeyError, TypeError) as exc:
        raise _InvalidOutput(f"note {i}: malformed fact or event ({exc})") from None
    return {
        "summary": rec["summary"].strip(),
        "keywords": _str_list(rec.get("keywords"), "keywords", i),
        "persons": _str_list(rec.get("persons"), "persons", i),
        "facts": [f for f in fact_objs if f.person and f.statement],
        "events": [e for e in event_objs if e.description],
        "tag": rec["tag"].strip(),
    }


def _merge(a: dict[str, Any], b: dict[str, Any]) -> dict[str, Any]:
    return {
        "start": min(a["start"], b["start"]),
        "end": max(a["end"], b["end"]),
        "summary": f"{a['summary']} {b['summary']}",
        "keywords": a["keywords"] + b["keywords"],
        "persons": a["persons"] + b["persons"],
        "facts": a["facts"] + b["facts"],
        "events": a["events"] + b["events"],
        "tag": a["tag"],
    }


def parse_notes(content: str, n_messages: int, repairs: list[str]) -> list[MemoryNote]:
    """Validate and repair an extractor reply into notes covering ``0..n_messages-1``.

    Structural problems raise ``_InvalidOutput`` (which triggers a re-prompt);
    fixable ones are repaired in place and described in ``repairs``.
    """
    payload = _json_payload(content, "[", "]")
    if not isinstance(payload, list):
        raise _InvalidOutput("top level must be a JSON array")
    recs: list[dict[str, Any]] = []
    for i, rec in enumerate(payload):
        if not isinstance(rec, dict):
            raise _InvalidOutput(f"note {i}: expected an object")
        missing = [k for k in NOTE_KEYS if k not in rec]
        if missing:
            raise _InvalidOutput(f"note {i}: missing keys {missing}")
        start = _as_int(rec["start_idx"], "start_idx", i)
        end = _as_int(rec["end_idx"], "end_idx", i)
        fields = _note_fields(rec, i)
        if start > end:
            repairs.append(f"note {i}: dropped inverted range ({start}, {end})")
            continue
        cs, ce = max(0, start), min(end, n_messages - 1)
        if (cs, ce) != (start, end):
            repairs.append(f"note {i}: clamped ({start}, {end}) to ({cs}, {ce})")
        if cs > ce:
            raise _InvalidOutput(
                f"note {i}: range ({start}, {end}) lies outside the session's "
                f"{n_messages} messages"
            )
        recs.append({"start": cs, "end": ce, **fields})

    if not recs:
        raise _NoNotes("no usable notes in output")
    recs.sort(key=lambda r: (r["start"], r["end"]))

    merged = [recs[0]]
    for rec in recs[1:]:
        prev = merged[-1]
        if rec["start"] <= prev["end"]:
            repairs.append(
                f"merged overlapping notes ({prev['start']}, {prev['end']}) and "
                f"({rec['start']}, {rec['end']})"
            )
            merged[-1] = _merge(prev, rec)
        else:
            merged.append(rec)

    if merged[0]["start"] > 0:
        repairs.append(f"extended first note start {merged[0]['start']} to 0")
        merged[0]["start"] = 0
    for prev, cur in zip(merged, merged[1:]):
        if cur["start"] > prev["end"] + 1:
            repairs.append(f"filled gap {prev['end'] + 1}..{cur['start'] - 1}")
            prev["end"] = cur["start"] - 1
    if merged[-1]["end"] < n_messages - 1:
        repairs.append(f"extended last note end {merged[-1]['end']} to {n_messages - 1}")
        merged[-1]["end"] = n_messages - 1

    return [MemoryNote(**r) for r in merged]


def extract_session(
    session: ConversationSession, llm: Backend, cfg: ExtractionConfig | None = None
) -> ExtractionResult:
    cfg = cfg or ExtractionConfig()
    if not session.messages:
        raise EmptySession(f"session {session.session_id!r} is empty")
    messages = [
        ChatTurn("system", cfg.prompt_template),
        ChatTurn("user", render_session(session)),
    ]
    calls = 0
    last_error: _InvalidOutput | None = None
    for attempt in range(cfg.max_repair_attempts + 1):
        reply, _ = llm.complete(messages)
        calls += 1
        repairs: list[str] = []
        try:
            notes = parse_notes(reply.content, len(session.messages), repairs)
        except _InvalidOutput as exc:
            last_error = exc
            logger.warning("session %s: invalid extraction (%s)", session.session_id, exc)
            messages += [
                ChatTurn("assistant", reply.content or "(empty)"),
                ChatTurn(
                    "user",
                    f"Your output was invalid: {exc}. Return the corrected JSON array only.",
                ),
            ]
            continue
        for r in repairs:
            logger.info("session %s: repair: %s", session.session_id, r)
        return ExtractionResult(notes, calls, attempt, repairs)

    if isinstance(last_error, _NoNotes):
        raise CoverageRepairFailed(
            f"session {session.session_id!r}: no note ranges to close coverage with"
        )
    raise MalformedExtraction(
        f"session {session.session_id!r}: extraction still invalid after "
        f"{cfg.max_repair_attempts} repair attempt(s): {last_error}"
    )


def extract_notes(
    session: ConversationSession, llm: Backend, cfg: ExtractionConfig | None = None
) -> list[MemoryNote]:
    """Notes for one session from a single extraction call (re-prompted only on invalid output)."""
    return extract_session(session, llm, cfg).notes


def smooth_overlap(notes: list[MemoryNote], overlap_msgs: int, session_len: int) -> list[MemoryNote]:
    """Pull every note after the first back by ``overlap_msgs`` messages."""
    if overlap_msgs <= 0 or len(notes) < 2:
        return list(notes)
    out = [notes[0]]
    for note in notes[1:]:
        out.append(note.with_range(max(0, note.start - overlap_msgs), note.end))
    return out


# -- deterministic fallback --

def _top_keywords(text: str, n: int = 5) -> list[str]:
    tokens = [t.lower() for t in _ALPHA_RE.findall(text)]
    counts = Counter(t for t in tokens if len(t) >= 4 and t not in STOPWORDS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [w for w, _ in ranked[:n]]


def _is_first_person(text: str) -> bool:
    return any(tok.strip(_PUNCT_STRIP) == "I" for tok in text.split())


def heuristic_note(session: ConversationSession, start: int, end: int) -> MemoryNote:
    """Rule-based note over messages ``start..end``."""
    window = session.messages[start : end + 1]
    text = " ".join(m.text for m in window)
    persons = list(dict.fromkeys(m.speaker for m in window))
    facts = [Fact(m.speaker, m.text) for m in window if _is_first_person(m.text)]
    events = [Event(m.text, session.timestamp) for m in window if _TEMPORAL_RE.search(m.text)]
    keywords = _top_keywords(text)
    return MemoryNote(
        start=start,
        end=end,
        summary=" ".join(text.split()[:25]),
        keywords=tuple(keywords),
        persons=tuple(persons),
        facts=tuple(facts),
        events=tuple(events),
        tag=keywords[0] if keywords else "general",
    )


def fallback_windows(n_messages: int, window: int) -> list[tuple[int, int]]:
    ranges = []
    start = 0
    while True:
        end = min(start + window - 1, n_messages - 1)
        ranges.append((start, end))
        if end == n_messages - 1:
            return ranges
        start = end  # consecutive windows share one message


def fallback_extract(session: ConversationSession, cfg: ExtractionConfig | None = None) -> list[MemoryNote]:
    cfg = cfg or ExtractionConfig()
    if not session.messages:
        raise EmptySession(f"session {session.session_id!r} is empty")
    return [heuristic_note(session, s, e) for s, e in fallback_windows(len(session.messages), cfg.fallback_window)]


def llm_chunk_note(
    session: ConversationSession, start: int, end: int, llm: Backend, cfg: ExtractionConfig
) -> MemoryNote:
    """One note for a pre-chunked range; the model is not asked to segment."""
    messages = [
        ChatTurn("system", cfg.chunk_prompt_template),
        ChatTurn("user", render_session(session, start, end)),
    ]
    last_error = ""
    for _ in range(cfg.max_repair_attempts + 1):
        reply, _usage = llm.complete(messages)
        try:
            fields = _note_fields(_json_payload(reply.content, "{", "}"), 0)
            return MemoryNote(start=start, end=end, **fields)
        except _InvalidOutput as exc:
            last_error = str(exc)
            messages += [
                ChatTurn("assistant", reply.content or "(empty)"),
                ChatTurn("user", f"Your output was invalid: {exc}. Return the corrected JSON object only."),
            ]
    raise MalformedExtraction(f"chunk ({start}, {end}) of {session.session_id!r}: {last_error}")


# -- baseline chunkers --

def fixed_chunks(token_counts: list[int], max_tokens: int = FIXED_CHUNK_TOKENS,
                 overlap_ratio: float = FIXED_OVERLAP_RATIO) -> list[tuple[int, int]]:
    """Greedy message packing with whole-message overlap.

    Each chunk holds as many messages as fit in ``max_tokens`` (a single
    oversized message becomes its own chunk). The next chunk backs up whole
    messages from the end of the previous one until at least
    ``overlap_ratio`` of its tokens repeat, while still starting after the
    previous start and leaving room for at least one new message.
    """
    n = len(token_counts)
    chunks: list[tuple[int, int]] = []
    start = 0
    while True:
        end = start
        total = token_counts[start]
        while end + 1 < n and total + token_counts[end + 1] <= max_tokens:
            end += 1
            total += token_counts[end]
        chunks.append((start, end))
        if end == n - 1:
            return chunks
        nxt = end + 1
        overlap = 0
        for j in range(end, start, -1):
            if overlap >= overlap_ratio * total:
                break
            if overlap + token_counts[j] + token_counts[end + 1] > max_tokens:
                break
            overlap += token_counts[j]
            nxt = j
        start = nxt


def percentile_linear(values: list[float], pct: float) -> float:
    """Percentile with linear interpolation between closest ranks."""
    data = sorted(values)
    if not data:
        raise ValueError("percentile of empty data")
    pos = (len(data) - 1) * pct / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(data) - 1)
    return data[lo] + (data[hi] - data[lo]) * (pos - lo)


def semantic_boundaries(similarities: list[float], pct: float = SEMANTIC_PERCENTILE) -> list[int]:
    """Indices ``i`` such that a chunk ends after message ``i``."""
    if not similarities:
        return []
    threshold = percentile_linear(similarities, pct)
    return [i for i, s in enumerate(similarities) if s < threshold]


def chunk_baseline(
    session: ConversationSession,
    mode: Literal["fixed", "semantic"],
    embedder: Embedder | None = None,
) -> list[tuple[int, int]]:
    """Message ranges from the fixed-length or the semantic baseline chunker."""
    if not session.messages:
        raise EmptySession(f"session {session.session_id!r} is empty")
    n = len(session.messages)
    if mode == "fixed":
        return fixed_chunks([len(m.text.split()) for m in session.messages])
    if mode != "semantic":
        raise ValueError(f"unknown chunking mode {mode!r}")
    if embedder is None:
        raise ValueError("semantic chunking needs an embedder")
    vecs = [embedder.embed(m.text) for m in session.messages]
    sims = []
    for a, b in zip(vecs, vecs[1:]):
        try:
            sims.append(cosine_similarity(a, b))
        except ZeroVector:
            sims.append(0.0)
    ranges = []
    start = 0
    for i in semantic_boundaries(sims):
        ranges.append((start, i))
        start = i + 1
    ranges.append((start, n - 1))
    return ranges


def notes_for_ranges(
    session: ConversationSession,
    ranges: list[tuple[int, int]],
    llm: Backend | None = None,
    cfg: ExtractionConfig | None = None,
) -> list[MemoryNote]:
    cfg = cfg or ExtractionConfig()
    if llm is None:
        return [heuristic_note(session, s, e) for s, e in ranges]
    return [llm_chunk_note(session, s, e, llm, cfg) for s, e in ranges]

