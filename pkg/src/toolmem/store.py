"""Multi-indexed memory database.

Pages are indexed three ways:

* string indexes for ``person``, ``tag`` and ``keyword`` (exact match after
  key normalization),
* vector indexes over every event and fact (exact top-k cosine scan),
* per-person profiles aggregating events and facts across pages.

Indexes are derived state. Persisted pages are reloaded by replaying
``insert_page``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .embeddings import Embedder
from .errors import DuplicatePageId, ZeroVectorQuery
from .model import ConversationSession, MemoryNote, MemoryPage, build_page

logger = logging.getLogger(__name__)

StringKind = Literal["person", "tag", "keyword"]
VectorKind = Literal["events", "facts"]

STRING_KINDS: tuple[str, ...] = ("person", "tag", "keyword")
VECTOR_KINDS: tuple[str, ...] = ("events", "facts")
DEFAULT_K = 5
MAX_K = 50
# Scores are rounded before ranking so float noise between mathematically
# equal cosines cannot override the page-id tie-break.
SCORE_DECIMALS = 12


def normalize_key(value: str) -> str:
    return " ".join(value.casefold().split())


@dataclass(frozen=True)
class VectorEntry:
    vector: np.ndarray
    text: str
    page_id: int
    temporal_ref: str | None = None


@dataclass(frozen=True)
class ProfileEvent:
    description: str
    temporal_ref: str
    session_timestamp: str
    page_id: int


@dataclass(frozen=True)
class ProfileFact:
    statement: str
    session_timestamp: str
    page_id: int


@dataclass
class PersonProfile:
    canonical_name: str
    events: list[ProfileEvent] = field(default_factory=list)
    facts: list[ProfileFact] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.events and not self.facts


@dataclass
class QueryOutcome:
    pages: list[MemoryPage]
    scores: list[float] | None = None

    @property
    def empty_hint(self) -> bool:
        return not self.pages


def _keys_of(note: MemoryNote, kind: str) -> tuple[str, ...]:
    if kind == "person":
        return note.persons
    if kind == "tag":
        return (note.tag,)
    if kind == "keyword":
        return note.keywords
    raise ValueError(f"unknown string index {kind!r}; expected one of {STRING_KINDS}")


class MemoryStore:
    """Single-writer build, then read-only queries (safe from many threads)."""

    def __init__(self, embedder: Embedder):
        self.embedder = embedder
        self.pages: dict[int, MemoryPage] = {}
        self.string_index: dict[str, dict[str, list[int]]] = {k: {} for k in STRING_KINDS}
        self.display_key: dict[str, dict[str, str]] = {k: {} for k in STRING_KINDS}
        self.vector_index: dict[str, list[VectorEntry]] = {k: [] for k in VECTOR_KINDS}
        self.person_aggregates: dict[str, PersonProfile] = {}
        self._matrix: dict[str, np.ndarray | None] = {k: None for k in VECTOR_KINDS}
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.pages)

    @property
    def next_page_id(self) -> int:
        return self._next_id

    # -- build phase --

    def add(self, session: ConversationSession, note: MemoryNote, conversation_id: str = "") -> int:
        """Build a page for ``note`` with the next free id and insert it."""
        return self.insert_page(build_page(session, note, self._next_id, conversation_id))

    def insert_page(self, page: MemoryPage) -> int:
        pid = page.page_id
        if pid in self.pages:
            raise DuplicatePageId(f"page id {pid} already present")
        self.pages[pid] = page
        self._next_id = max(self._next_id, pid + 1)
        note = page.note

        for kind in STRING_KINDS:
            for key in _keys_of(note, kind):
                norm = normalize_key(key)
                if not norm:
                    continue
                ids = self.string_index[kind].setdefault(norm, [])
                if pid not in ids:
                    ids.append(pid)
                    ids.sort()
                self.display_key[kind].setdefault(norm, key.strip())

        for event in note.events:
            vec = self.embedder.embed(event.description)
            self.vector_index["events"].append(
                VectorEntry(vec, event.description, pid, event.temporal_ref)
            )
        for fact in note.facts:
            vec = self.embedder.embed(fact.statement)
            self.vector_index["facts"].append(VectorEntry(vec, fact.statement, pid))
        self._matrix = {k: None for k in VECTOR_KINDS}

        for person in note.persons:
            norm = normalize_key(person)
            if not norm:
                continue
            profile = self.person_aggregates.setdefault(norm, PersonProfile(person.strip()))
            for event in note.events:
                profile.events.append(
                    ProfileEvent(event.description, event.temporal_ref, page.session_timestamp, pid)
                )
            for fact in note.facts:
                if normalize_key(fact.person) == norm:
                    profile.facts.append(ProfileFact(fact.statement, page.session_timestamp, pid))
        return pid

    # -- queries --

    def query_string(self, value: str, kind: StringKind) -> QueryOutcome:
        if kind not in STRING_KINDS:
            raise ValueError(f"unknown string index {kind!r}; expected one of {STRING_KINDS}")
        ids = self.string_index[kind].get(normalize_key(value), [])
        return QueryOutcome([self.pages[i] for i in ids])

    def _scores(self, kind: str, query: np.ndarray) -> np.ndarray:
        mat = self._matrix[kind]
        if mat is None:
            entries = self.vector_index[kind]
            mat = np.vstack([e.vector for e in entries])
            self._matrix[kind] = mat
        # row-wise reduction: identical rows always produce identical scores
        scores = np.round(np.clip((mat * query).sum(axis=1), -1.0, 1.0), SCORE_DECIMALS)
        scores[~np.any(mat, axis=1)] = -np.inf
        return scores

    def query_topk(self, text: str, kind: VectorKind, k: int = DEFAULT_K) -> QueryOutcome:
        """Top-``k`` entries by cosine, collapsed to their owning pages.

        Entries are ranked by score descending, then page id, then insertion
        order. A page owning several of the top-``k`` entries appears once, at
        its best rank, so fewer than ``k`` pages may be returned.
        """
        if kind not in VECTOR_KINDS:
            raise ValueError(f"unknown vector index {kind!r}; expected one of {VECTOR_KINDS}")
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        k = min(k, MAX_K)
        entries = self.vector_index[kind]
        if not entries:
            return QueryOutcome([], [])
        query = self.embedder.embed(text)
        if not np.any(query):
            raise ZeroVectorQuery(f"query {text!r} has no embeddable content")
        scores = self._scores(kind, query)
        page_ids = np.fromiter((e.page_id for e in entries), dtype=np.int64, count=len(entries))
        order = np.lexsort((np.arange(len(entries)), page_ids, -scores))
        pages: list[MemoryPage] = []
        out_scores: list[float] = []
        seen: set[int] = set()
        for idx in order[:k]:
            if not np.isfinite(scores[idx]):
                break
            pid = int(page_ids[idx])
            if pid in seen:
                continue
            seen.add(pid)
            pages.append(self.pages[pid])
            out_scores.append(float(scores[idx]))
        return QueryOutcome(pages, out_scores)

    def query_person(self, name: str, kind: VectorKind) -> PersonProfile:
        """Events (``kind="events"``) or facts of one person; empty profile when unknown."""
        if kind not in VECTOR_KINDS:
            raise ValueError(f"unknown profile kind {kind!r}; expected one of {VECTOR_KINDS}")
        profile = self.person_aggregates.get(normalize_key(name))
        if profile is None:
            return PersonProfile(name.strip())
        if kind == "events":
            return PersonProfile(profile.canonical_name, events=list(profile.events))
        return PersonProfile(profile.canonical_name, facts=list(profile.facts))

    def list_keys(self, kind: StringKind) -> list[str]:
        if kind not in STRING_KINDS:
            raise ValueError(f"unknown string index {kind!r}; expected one of {STRING_KINDS}")
        display = self.display_key[kind]
        return [display[norm] for norm in sorted(display)]
