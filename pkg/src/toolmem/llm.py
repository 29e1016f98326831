"""Chat-completion backends with tool calling.

``ChatCompletionsBackend`` speaks the common ``/chat/completions`` HTTP
protocol. ``ScriptedBackend`` replays canned assistant turns for offline
tests; its reply depends only on the fixture and on how many assistant turns
the incoming conversation already holds, so one instance can serve many
concurrent QA sessions and replays are always identical.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import httpx

from .errors import ProtocolError, ScriptExhausted, ScriptMismatch, TransportError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToolCall:
    call_id: str
    tool_name: str
    arguments: dict[str, Any] = field(default_factory=dict)

    def to_wire(self) -> dict[str, Any]:
        return {
            "id": self.call_id,
            "type": "function",
            "function": {
                "name": self.tool_name,
                "arguments": json.dumps(self.arguments, sort_keys=True),
            },
        }


@dataclass(frozen=True)
class ChatTurn:
    role: str
    content: str = ""
    tool_calls: tuple[ToolCall, ...] = ()
    tool_call_id: str | None = None

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant", "tool"):
            raise ValueError(f"unknown role {self.role!r}")
        object.__setattr__(self, "tool_calls", tuple(self.tool_calls))

    def to_wire(self) -> dict[str, Any]:
        msg: dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_calls:
            msg["tool_calls"] = [tc.to_wire() for tc in self.tool_calls]
        if self.tool_call_id is not None:
            msg["tool_call_id"] = self.tool_call_id
        return msg


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    total_tokens: int = 0
    estimated: bool = False

    def __add__(self, other: Usage) -> Usage:
        return Usage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
            self.total_tokens + other.total_tokens,
            self.estimated or other.estimated,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "total_tokens": self.total_tokens,
            "estimated": self.estimated,
        }


class Backend(Protocol):
    def complete(
        self, messages: list[ChatTurn], tools: list[dict[str, Any]] | None = None
    ) -> tuple[ChatTurn, Usage]: ...


def count_tokens(text: str) -> int:
    """Whitespace token count, used wherever a backend reports no usage."""
    return len(text.split())


def estimate_usage(messages: list[ChatTurn], reply: ChatTurn) -> Usage:
    def turn_tokens(turn: ChatTurn) -> int:
        n = count_tokens(turn.content)
        for tc in turn.tool_calls:
            n += count_tokens(tc.tool_name) + count_tokens(json.dumps(tc.arguments, sort_keys=True))
        return n

    prompt = sum(turn_tokens(m) for m in messages)
    completion = turn_tokens(reply)
    return Usage(prompt, completion, prompt + completion, estimated=True)


def _check_request(messages: list[ChatTurn]) -> None:
    if not messages:
        raise ValueError("messages must be non-empty")
    if messages[0].role != "system":
        raise ValueError("first message must be the system turn")


# -- lenient recovery of tool calls written as fenced JSON in plain content --

_FENCE_RE = re.compile(r"```(?:json|tool_call|tool)?\s*(.*?)```", re.DOTALL)


def parse_fenced_tool_calls(content: str, id_prefix: str = "fenced") -> tuple[str, list[ToolCall]]:
    """Pull ``{"name": ..., "arguments": {...}}`` blocks out of fenced code.

    Returns the remaining text and the recovered calls. Blocks that do not
    look like tool calls are left in the text untouched.
    """
    calls: list[ToolCall] = []
    kept: list[str] = []
    last = 0
    for match in _FENCE_RE.finditer(content):
        try:
            payload = json.loads(match.group(1))
        except ValueError:
            continue
        items = payload if isinstance(payload, list) else [payload]
        if not items:
            continue
        parsed: list[ToolCall] = []
        for item in items:
            if not isinstance(item, dict):
                break
            name = item.get("name") or item.get("tool") or item.get("tool_name")
            args = item.get("arguments", item.get("parameters", {}))
            if isinstance(args, str):
                try:
                    args = json.loads(args) if args.strip() else {}
                except ValueError:
                    break
            if not isinstance(name, str) or not isinstance(args, dict):
                break
            parsed.append(ToolCall(f"{id_prefix}_{len(calls) + len(parsed)}", name, args))
        else:
            calls.extend(parsed)
            kept.append(content[last : match.start()])
            last = match.end()
    kept.append(content[last:])
    return "".join(kept).strip(), calls


@dataclass
class BackendConfig:
    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    model_name: str = "gpt-4o-mini"
    temperature: float = 0.0
    max_retries: int = 3
    request_timeout_s: float = 60.0
    api_key_env: str = "TAMEM_API_KEY"
    max_concurrency: int = 4
    backoff_base_s: float = 0.5
    backoff_cap_s: float = 8.0


class ChatCompletionsBackend:
    """HTTP client for OpenAI-compatible chat completions."""

    def __init__(self, config: BackendConfig | None = None, client: httpx.Client | None = None):
        self.config = config or BackendConfig()
        self._client = client or httpx.Client(timeout=self.config.request_timeout_s)
        self._slots = threading.BoundedSemaphore(max(1, self.config.max_concurrency))
        self._sleep = time.sleep

    def _post(self, payload: dict[str, Any]) -> dict[str, Any]:
        cfg = self.config
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(cfg.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        attempt = 0
        while True:
            try:
                with self._slots:
                    resp = self._client.post(cfg.endpoint_url, json=payload, headers=headers)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise TransportError(f"HTTP {resp.status_code} from {cfg.endpoint_url}")
                if resp.status_code >= 400:
                    raise ProtocolError(f"HTTP {resp.status_code}: {resp.text[:500]}")
                try:
                    return resp.json()
                except ValueError as exc:
                    raise ProtocolError(f"response is not JSON: {exc}") from exc
            except (httpx.TransportError, TransportError) as exc:
                if attempt >= cfg.max_retries:
                    if isinstance(exc, TransportError):
                        raise
                    raise TransportError(f"{cfg.endpoint_url}: {exc}") from exc
                delay = min(cfg.backoff_cap_s, cfg.backoff_base_s * 2**attempt)
                logger.warning("completion request failed (%s); retry in %.1fs", exc, delay)
                self._sleep(delay)
                attempt += 1

    def complete(
        self, messages: list[ChatTurn], tools: list[dict[str, Any]] | None = None
    ) -> tuple[ChatTurn, Usage]:
        _check_request(messages)
        payload: dict[str, Any] = {
            "model": self.config.model_name,
            "messages": [m.to_wire() for m in messages],
            "temperature": self.config.temperature,
        }
        if tools:
            payload["tools"] = tools
        data = self._post(payload)
        turn = parse_completion(data)
        raw_usage = data.get("usage")
        if isinstance(raw_usage, dict) and "total_tokens" in raw_usage:
            usage = Usage(
                int(raw_usage.get("prompt_tokens", 0)),
                int(raw_usage.get("completion_tokens", 0)),
                int(raw_usage["total_tokens"]),
            )
        else:
            usage = estimate_usage(messages, turn)
        return turn, usage


def parse_completion(data: dict[str, Any]) -> ChatTurn:
    """Turn a chat-completions response body into an assistant ``ChatTurn``."""
    try:
        message = data["choices"][0]["message"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"response has no choices[0].message: {exc}") from exc
    content = message.get("content") or ""
    calls: list[ToolCall] = []
    for i, raw in enumerate(message.get("tool_calls") or []):
        try:
            fn = raw["function"]
            args = fn.get("arguments") or "{}"
            args = json.loads(args) if isinstance(args, str) else args
            if not isinstance(args, dict):
                raise ValueError("arguments must decode to an object")
            calls.append(ToolCall(raw.get("id") or f"call_{i}", fn["name"], args))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed tool call {i}: {exc}") from exc
    if not calls and "```" in content:
        content, calls = parse_fenced_tool_calls(content)
    if not content.strip() and not calls:
        raise ProtocolError("assistant turn has neither content nor tool calls")
    return ChatTurn("assistant", content, tuple(calls))


# -- scripted replay --

@dataclass(frozen=True)
class ScriptStep:
    content: str = ""
    tool_calls: tuple[dict[str, Any], ...] = ()
    match: str | None = None

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ScriptStep:
        return cls(
            content=data.get("content") or "",
            tool_calls=tuple(data.get("tool_calls") or ()),
            match=data.get("match"),
        )


@dataclass(frozen=True)
class Script:
    steps: tuple[ScriptStep, ...]
    question: str | None = None
    cycle: bool = False


def _as_script(data: Any, question: str | None = None) -> Script:
    if isinstance(data, list):
        return Script(tuple(ScriptStep.from_dict(s) for s in data), question)
    return Script(
        tuple(ScriptStep.from_dict(s) for s in data["steps"]),
        data.get("question", question),
        bool(data.get("cycle", False)),
    )


class ScriptedBackend:
    """Replays canned assistant turns.

    The reply ordinal is the number of assistant turns already present in
    the request, so the backend keeps no state between calls. A fixture is
    either a plain list of steps, or ``{"scripts": [{"question": ..., "steps": [...]}]}``
    where the script is picked by substring match against the first user turn.
    """

    def __init__(self, steps=None, *, scripts: list[Script] | None = None, cycle: bool = False):
        self.scripts: list[Script] = list(scripts or [])
        if steps is not None:
            self.scripts.append(
                Script(tuple(s if isinstance(s, ScriptStep) else ScriptStep.from_dict(s) for s in steps),
                       None, cycle)
            )
        if not self.scripts:
            raise ValueError("scripted backend needs at least one script")

    @classmethod
    def from_data(cls, data: Any) -> ScriptedBackend:
        if isinstance(data, list):
            return cls(data)
        if isinstance(data, dict) and "scripts" in data:
            return cls(scripts=[_as_script(s) for s in data["scripts"]])
        if isinstance(data, dict) and "steps" in data:
            return cls(scripts=[_as_script(data)])
        raise ValueError("fixture must be a list of steps or an object with 'scripts' or 'steps'")

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedBackend:
        return cls.from_data(json.loads(Path(path).read_text(encoding="utf-8")))

    def _pick(self, messages: list[ChatTurn]) -> Script:
        first_user = next((m.content for m in messages if m.role == "user"), "")
        for script in self.scripts:
            if script.question is None or script.question in first_user:
                return script
        raise ScriptMismatch(f"no script matches question {first_user[:80]!r}")

    def complete(
        self, messages: list[ChatTurn], tools: list[dict[str, Any]] | None = None
    ) -> tuple[ChatTurn, Usage]:
        _check_request(messages)
        script = self._pick(messages)
        ordinal = sum(1 for m in messages if m.role == "assistant")
        if ordinal >= len(script.steps):
            if not script.cycle:
                raise ScriptExhausted(f"fixture has {len(script.steps)} steps, call {ordinal + 1} requested")
            step = script.steps[ordinal % len(script.steps)]
        else:
            step = script.steps[ordinal]
        if step.match is not None:
            last = next((m for m in reversed(messages) if m.role in ("user", "tool")), None)
            if last is None or step.match not in last.content:
                raise ScriptMismatch(
                    f"step {ordinal}: expected last user/tool turn to contain {step.match!r}"
                )
        calls = tuple(
            ToolCall(
                tc.get("id") or f"call_{ordinal}_{j}",
                tc["name"],
                dict(tc.get("arguments") or {}),
            )
            for j, tc in enumerate(step.tool_calls)
        )
        turn = ChatTurn("assistant", step.content, calls)
        if not turn.content and not turn.tool_calls:
            raise ProtocolError(f"fixture step {ordinal} has neither content nor tool calls")
        return turn, estimate_usage(messages, turn)
