"""Conversation, note, and page types plus the page-construction rule.

All message ranges in this package are INCLUSIVE on both ends: a note with
``start=2, end=4`` covers messages 2, 3 and 4.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any

from .errors import IndexOutOfRange

logger = logging.getLogger(__name__)

# LoCoMo writes session times like "1:56 pm on 8 May, 2023".
_TIMESTAMP_FORMATS = (
    "%I:%M %p on %d %B, %Y",
    "%I:%M %p on %d %b, %Y",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%d",
    "%d %B %Y",
    "%B %d, %Y",
)


def parse_timestamp(raw: str) -> datetime | None:
    """Best-effort parse of a session timestamp; ``None`` when nothing fits."""
    text = " ".join(raw.split())
    if not text:
        return None
    for fmt in _TIMESTAMP_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    try:
        return datetime.fromisoformat(text)
    except ValueError:
        return None


@dataclass(frozen=True)
class Message:
    index: int
    speaker: str
    text: str
    source_id: str | None = None

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError(f"message index must be >= 0, got {self.index}")
        if not self.speaker or not self.text:
            raise ValueError(f"message {self.index}: speaker and text must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "speaker": self.speaker,
            "text": self.text,
            "source_id": self.source_id,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Message:
        return cls(data["index"], data["speaker"], data["text"], data.get("source_id"))


@dataclass(frozen=True)
class ConversationSession:
    """One dated session of a multi-session dialogue.

    ``timestamp`` always keeps the raw string; ``parsed_timestamp`` is filled
    in when it can be parsed and stays ``None`` otherwise.
    """

    session_id: str
    timestamp: str
    messages: tuple[Message, ...]
    parsed_timestamp: datetime | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError(f"session {self.session_id!r} has no messages")
        for expected, msg in enumerate(self.messages):
            if msg.index != expected:
                raise ValueError(
                    f"session {self.session_id!r}: message indices must be contiguous "
                    f"from 0, found {msg.index} at position {expected}"
                )
        if self.parsed_timestamp is None:
            object.__setattr__(self, "parsed_timestamp", parse_timestamp(self.timestamp))

    def __len__(self) -> int:
        return len(self.messages)

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "timestamp": self.timestamp,
            "parsed_timestamp": (
                self.parsed_timestamp.isoformat() if self.parsed_timestamp else None
            ),
            "messages": [m.to_dict() for m in self.messages],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ConversationSession:
        parsed = data.get("parsed_timestamp")
        return cls(
            session_id=data["session_id"],
            timestamp=data["timestamp"],
            messages=tuple(Message.from_dict(m) for m in data["messages"]),
            parsed_timestamp=datetime.fromisoformat(parsed) if parsed else None,
        )


@dataclass(frozen=True)
class Fact:
    person: str
    statement: str


@dataclass(frozen=True)
class Event:
    description: str
    temporal_ref: str


def _distinct(items) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for item in items:
        item = str(item).strip()
        if item and item not in seen:
            seen[item] = None
    return tuple(seen)


@dataclass(frozen=True)
class MemoryNote:
    """Structured extraction for one topic-coherent run of messages.

    ``keywords`` and ``persons`` are kept as ordered tuples of distinct values
    so serialization is deterministic. Any person named by a fact but missing
    from ``persons`` is appended on construction.
    """

    start: int
    end: int
    summary: str
    keywords: tuple[str, ...] = ()
    persons: tuple[str, ...] = ()
    facts: tuple[Fact, ...] = ()
    events: tuple[Event, ...] = ()
    tag: str = ""

    def __post_init__(self) -> None:
        if self.start < 0 or self.start > self.end:
            raise IndexOutOfRange(f"invalid note range ({self.start}, {self.end})")
        if not self.summary.strip():
            raise ValueError("note summary must be non-empty")
        if not self.tag.strip():
            raise ValueError("note tag must be non-empty")
        facts = tuple(self.facts)
        object.__setattr__(self, "facts", facts)
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "keywords", _distinct(self.keywords))
        object.__setattr__(
            self, "persons", _distinct([*self.persons, *(f.person for f in facts)])
        )

    def with_range(self, start: int, end: int) -> MemoryNote:
        return MemoryNote(
            start, end, self.summary, self.keywords, self.persons,
            self.facts, self.events, self.tag,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "start": self.start,
            "end": self.end,
            "summary": self.summary,
            "keywords": list(self.keywords),
            "persons": list(self.persons),
            "facts": [{"person": f.person, "statement": f.statement} for f in self.facts],
            "events": [
                {"description": e.description, "temporal_ref": e.temporal_ref}
                for e in self.events
            ],
            "tag": self.tag,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MemoryNote:
        return cls(
            start=data["start"],
            end=data["end"],
            summary=data["summary"],
            keywords=tuple(data.get("keywords", ())),
            persons=tuple(data.get("persons", ())),
            facts=tuple(Fact(f["person"], f["statement"]) for f in data.get("facts", ())),
            events=tuple(
                Event(e["description"], e["temporal_ref"]) for e in data.get("events", ())
            ),
            tag=data["tag"],
        )


@dataclass(frozen=True)
class MemoryPage:
    """The stored retrieval unit: verbatim dialogue slice, its note, and the session time."""

    page_id: int
    conversation_id: str
    session_id: str
    dialogue: tuple[Message, ...]
    note: MemoryNote
    session_timestamp: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "page_id": self.page_id,
            "conversation_id": self.conversation_id,
            "session_id": self.session_id,
            "dialogue": [m.to_dict() for m in self.dialogue],
            "note": self.note.to_dict(),
            "session_timestamp": self.session_timestamp,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MemoryPage:
        return cls(
            page_id=data["page_id"],
            conversation_id=data["conversation_id"],
            session_id=data["session_id"],
            dialogue=tuple(Message.from_dict(m) for m in data["dialogue"]),
            note=MemoryNote.from_dict(data["note"]),
            session_timestamp=data["session_timestamp"],
        )


@dataclass(frozen=True)
class Conversation:
    conversation_id: str
    sessions: tuple[ConversationSession, ...]
    speakers: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "sessions", tuple(self.sessions))
        object.__setattr__(self, "speakers", tuple(self.speakers))

    def session(self, session_id: str) -> ConversationSession:
        for s in self.sessions:
            if s.session_id == session_id:
                return s
        raise KeyError(session_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "conversation_id": self.conversation_id,
            "speakers": list(self.speakers),
            "sessions": [s.to_dict() for s in self.sessions],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Conversation:
        return cls(
            conversation_id=data["conversation_id"],
            sessions=tuple(ConversationSession.from_dict(s) for s in data["sessions"]),
            speakers=tuple(data.get("speakers", ())),
        )


def build_page(
    session: ConversationSession,
    note: MemoryNote,
    page_id: int,
    conversation_id: str = "",
) -> MemoryPage:
    """Attach the verbatim dialogue slice ``messages[start..end]`` and session time to a note."""
    if note.start > note.end or note.end >= len(session.messages) or note.start < 0:
        raise IndexOutOfRange(
            f"note range ({note.start}, {note.end}) invalid for session "
            f"{session.session_id!r} with {len(session.messages)} messages"
        )
    return MemoryPage(
        page_id=page_id,
        conversation_id=conversation_id,
        session_id=session.session_id,
        dialogue=session.messages[note.start : note.end + 1],
        note=note,
        session_timestamp=session.timestamp,
    )
