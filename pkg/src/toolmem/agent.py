"""Tool-calling retrieval agent.

The agent sees ten tools over a ``MemoryStore`` and loops: ask the backend,
dispatch every requested tool call, feed the results back, until the
backend answers in plain text or the iteration budget runs out. A "turn"
is one assistant completion call. When the budget-th turn still requests
tools, nothing more is dispatched and one extra forced-answer call is made.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any

from .errors import BudgetExceeded, ZeroVectorQuery
from .extractor import load_prompt
from .llm import Backend, ChatTurn, ToolCall, Usage
from .model import MemoryPage
from .store import DEFAULT_K, MAX_K, MemoryStore, PersonProfile, normalize_key

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 7
DEFAULT_TOKEN_CEILING = 200_000
FORCED_FINAL_PROMPT = (
    "Tool budget exhausted. Answer now from the retrieved context only, "
    "in a short phrase, without calling tools."
)
EMPTY_HINT = "no results; consult list_keywords / list_person_names / list_tags for valid keys"


@dataclass(frozen=True)
class ToolParam:
    name: str
    type: str
    description: str
    required: bool = True
    default: Any = None


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameters: tuple[ToolParam, ...] = ()

    def schema(self) -> dict[str, Any]:
        props: dict[str, Any] = {}
        for p in self.parameters:
            prop: dict[str, Any] = {"type": p.type, "description": p.description}
            if p.default is not None:
                prop["default"] = p.default
            props[p.name] = prop
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": props,
                    "required": [p.name for p in self.parameters if p.required],
                },
            },
        }


_K = ToolParam("k", "integer", f"number of top matches to consider (default {DEFAULT_K})", False, DEFAULT_K)

TOOLS: tuple[ToolSpec, ...] = (
    ToolSpec("search_by_keyword", "Fetch memory pages whose keywords include this exact keyword.",
             (ToolParam("keyword", "string", "keyword to match"),)),
    ToolSpec("search_by_person", "Fetch memory pages that involve or mention this person.",
             (ToolParam("name", "string", "person name"),)),
    ToolSpec("search_by_tag", "Fetch memory pages labelled with this semantic tag.",
             (ToolParam("tag", "string", "topic tag"),)),
    ToolSpec("search_events", "Fetch pages whose events are most similar to the query text.",
             (ToolParam("query", "string", "description of the event or activity"), _K)),
    ToolSpec("search_facts", "Fetch pages whose facts are most similar to the query text.",
             (ToolParam("query", "string", "description of the fact"), _K)),
    ToolSpec("get_person_events", "List every event involving a person, with dates.",
             (ToolParam("name", "string", "person name"),)),
    ToolSpec("get_person_facts", "List every stored fact about a person.",
             (ToolParam("name", "string", "person name"),)),
    ToolSpec("list_keywords", "List all keywords available for search_by_keyword."),
    ToolSpec("list_person_names", "List all person names available for person tools."),
    ToolSpec("list_tags", "List all tags available for search_by_tag."),
)
TOOL_NAMES: tuple[str, ...] = tuple(t.name for t in TOOLS)
TOOL_SCHEMAS: list[dict[str, Any]] = [t.schema() for t in TOOLS]
_SPECS = {t.name: t for t in TOOLS}


def tool_list_text() -> str:
    lines = []
    for t in TOOLS:
        params = ", ".join(p.name if p.required else f"{p.name}={p.default}" for p in t.parameters)
        lines.append(f"- {t.name}({params}): {t.description}")
    return "\n".join(lines)


def default_system_prompt() -> str:
    return load_prompt("system.txt").replace("{tool_list}", tool_list_text())


@dataclass
class SessionCache:
    """Pages and profiles already shown within one QA session."""

    seen_page_ids: set[int] = field(default_factory=set)
    seen_profiles: set[tuple[str, str]] = field(default_factory=set)


@dataclass
class ToolResult:
    text: str
    result_size: int = 0
    cache_hit: bool = False
    error: bool = False


@dataclass
class TraceEntry:
    tool_name: str
    arguments: dict[str, Any]
    result_size: int
    cache_hit: bool
    dispatched: bool = True
    error: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "tool_name": self.tool_name,
            "arguments": self.arguments,
            "result_size": self.result_size,
            "cache_hit": self.cache_hit,
            "dispatched": self.dispatched,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TraceEntry:
        return cls(**data)


@dataclass
class QARecord:
    question: str
    category: str
    answer: str
    turns_used: int
    tool_trace: list[TraceEntry]
    usage: Usage
    success: bool
    forced_final: bool
    transcript: list[ChatTurn] = field(default_factory=list, repr=False)

    def transcript_json(self) -> str:
        return json.dumps([t.to_wire() for t in self.transcript], sort_keys=True, ensure_ascii=False)


# -- rendering --

def render_page(page: MemoryPage, score: float | None = None) -> str:
    note = page.note
    head = f"[page {page.page_id}] session {page.session_id} @ {page.session_timestamp}"
    if score is not None:
        head += f" (score {score:.3f})"
    lines = [head, f"summary: {note.summary}", f"tag: {note.tag}"]
    if note.persons:
        lines.append("persons: " + ", ".join(note.persons))
    if note.events:
        lines.append("events:")
        lines += [f"  - {e.description} (when: {e.temporal_ref or 'unspecified'})" for e in note.events]
    if note.facts:
        lines.append("facts:")
        lines += [f"  - {f.person}: {f.statement}" for f in note.facts]
    lines.append("dialogue:")
    lines += [f"  {m.speaker}: {m.text}" for m in page.dialogue]
    return "\n".join(lines)


def _render_pages(pages: list[MemoryPage], scores: list[float] | None, cache: SessionCache) -> ToolResult:
    if not pages:
        return ToolResult(EMPTY_HINT)
    blocks = []
    hit = False
    for i, page in enumerate(pages):
        if page.page_id in cache.seen_page_ids:
            hit = True
            blocks.append(f"page {page.page_id} already retrieved; see above")
        else:
            blocks.append(render_page(page, scores[i] if scores else None))
    cache.seen_page_ids.update(p.page_id for p in pages)
    return ToolResult("\n\n".join(blocks), len(pages), hit)


def _render_profile(profile: PersonProfile, kind: str, cache: SessionCache) -> ToolResult:
    entries = profile.events if kind == "events" else profile.facts
    if not entries:
        return ToolResult(EMPTY_HINT)
    key = (normalize_key(profile.canonical_name), kind)
    if key in cache.seen_profiles:
        return ToolResult(
            f"{kind} of {profile.canonical_name} already retrieved; see above", len(entries), True
        )
    cache.seen_profiles.add(key)
    lines = [f"{kind} of {profile.canonical_name}:"]
    if kind == "events":
        lines += [
            f"- [{e.session_timestamp}] {e.description} (when: {e.temporal_ref or 'unspecified'}; page {e.page_id})"
            for e in profile.events
        ]
    else:
        lines += [f"- [{f.session_timestamp}] {f.statement} (page {f.page_id})" for f in profile.facts]
    return ToolResult("\n".join(lines), len(entries))


def _render_keys(label: str, keys: list[str]) -> ToolResult:
    if not keys:
        return ToolResult(f"no {label} stored yet")
    return ToolResult(f"available {label} ({len(keys)}): " + ", ".join(keys), len(keys))


def _error(text: str) -> ToolResult:
    return ToolResult(f"error: {text}", error=True)


def dispatch_tool(
    call: ToolCall, store: MemoryStore, cache: SessionCache, default_k: int = DEFAULT_K
) -> ToolResult:
    """Run one tool call against the store and render the result as text.

    Never raises for bad calls: unknown tools, missing arguments and
    unembeddable queries come back as error text for the model to read.
    """
    spec = _SPECS.get(call.tool_name)
    if spec is None:
        return _error(f"unknown tool {call.tool_name!r}; valid tools are: " + ", ".join(TOOL_NAMES))
    args = call.arguments
    for p in spec.parameters:
        if p.required and (not isinstance(args.get(p.name), str) or not args[p.name].strip()):
            return _error(f"missing required argument {p.name!r} for {spec.name}")

    name = spec.name
    if name == "search_by_keyword":
        out = store.query_string(args["keyword"], "keyword")
        return _render_pages(out.pages, None, cache)
    if name == "search_by_person":
        out = store.query_string(args["name"], "person")
        return _render_pages(out.pages, None, cache)
    if name == "search_by_tag":
        out = store.query_string(args["tag"], "tag")
        return _render_pages(out.pages, None, cache)
    if name in ("search_events", "search_facts"):
        k = args.get("k", default_k)
        if isinstance(k, str) and k.strip().isdigit():
            k = int(k)
        if not isinstance(k, int) or isinstance(k, bool) or k < 1:
            return _error(f"k must be a positive integer (at most {MAX_K}), got {k!r}")
        kind = "events" if name == "search_events" else "facts"
        try:
            out = store.query_topk(args["query"], kind, k)
        except ZeroVectorQuery:
            return _error("the query has no searchable words; rephrase it")
        return _render_pages(out.pages, out.scores, cache)
    if name == "get_person_events":
        return _render_profile(store.query_person(args["name"], "events"), "events", cache)
    if name == "get_person_facts":
        return _render_profile(store.query_person(args["name"], "facts"), "facts", cache)
    if name == "list_keywords":
        return _render_keys("keywords", store.list_keys("keyword"))
    if name == "list_person_names":
        return _render_keys("person names", store.list_keys("person"))
    return _render_keys("tags", store.list_keys("tag"))


def answer_question(
    question: str,
    store: MemoryStore,
    llm: Backend,
    budget: int = DEFAULT_BUDGET,
    *,
    k: int = DEFAULT_K,
    category: str = "",
    system_prompt: str | None = None,
    token_ceiling: int = DEFAULT_TOKEN_CEILING,
) -> QARecord:
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    transcript = [
        ChatTurn("system", system_prompt if system_prompt is not None else default_system_prompt()),
        ChatTurn("user", question),
    ]
    cache = SessionCache()
    trace: list[TraceEntry] = []
    usage = Usage()
    turns = 0

    def call(tools) -> ChatTurn:
        nonlocal usage, turns
        reply, used = llm.complete(transcript, tools)
        turns += 1
        usage = usage + used
        transcript.append(reply)
        if usage.total_tokens > token_ceiling:
            raise BudgetExceeded(
                f"token ceiling {token_ceiling} exceeded ({usage.total_tokens}) on {question[:60]!r}"
            )
        return reply

    while True:
        reply = call(TOOL_SCHEMAS)
        if not reply.tool_calls:
            return QARecord(question, category, reply.content.strip(), turns, trace, usage,
                            success=True, forced_final=False, transcript=transcript)
        if turns >= budget:
            break
        for tc in reply.tool_calls:
            result = dispatch_tool(tc, store, cache, k)
            trace.append(TraceEntry(tc.tool_name, dict(tc.arguments), result.result_size,
                                    result.cache_hit, True, result.error))
            transcript.append(ChatTurn("tool", result.text, tool_call_id=tc.call_id))

    # budget exhausted: close the pending calls without running them, then force an answer
    for tc in reply.tool_calls:
        trace.append(TraceEntry(tc.tool_name, dict(tc.arguments), 0, False, dispatched=False))
        transcript.append(ChatTurn("tool", "not executed: tool budget exhausted", tool_call_id=tc.call_id))
    transcript.append(ChatTurn("user", FORCED_FINAL_PROMPT))
    final = call([])
    for tc in final.tool_calls:
        trace.append(TraceEntry(tc.tool_name, dict(tc.arguments), 0, False, dispatched=False))
    logger.debug("forced finalization after %d turns: %s", budget, question[:60])
    return QARecord(question, category, final.content.strip(), turns, trace, usage,
                    success=False, forced_final=True, transcript=transcript)
