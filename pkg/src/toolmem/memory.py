"""Build memory stores from conversations and persist them.

A conversation's memory is saved as one JSON document holding its sessions
and pages (see ``schemas/memory.schema.json``). Loading replays the pages
through ``MemoryStore.insert_page``; indexes are never stored.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Literal

from .embeddings import Embedder
from .extractor import (
    ExtractionConfig,
    chunk_baseline,
    extract_notes,
    fallback_extract,
    notes_for_ranges,
    smooth_overlap,
)
from .llm import Backend
from .model import Conversation, MemoryNote, MemoryPage
from .store import MemoryStore

logger = logging.getLogger(__name__)

ExtractorMode = Literal["llm", "fallback", "fixed", "semantic"]
EXTRACTOR_MODES = ("llm", "fallback", "fixed", "semantic")
SCHEMA_VERSION = 1


def session_notes(
    session,
    mode: ExtractorMode,
    embedder: Embedder,
    llm: Backend | None = None,
    cfg: ExtractionConfig | None = None,
) -> list[MemoryNote]:
    """Final (overlap-smoothed where applicable) notes for one session."""
    cfg = cfg or ExtractionConfig()
    if mode == "llm":
        if llm is None:
            raise ValueError("extractor mode 'llm' needs a completion backend")
        notes = extract_notes(session, llm, cfg)
        return smooth_overlap(notes, cfg.overlap_msgs, len(session.messages))
    if mode == "fallback":
        # windows already share one message; no extra smoothing
        return fallback_extract(session, cfg)
    if mode in ("fixed", "semantic"):
        ranges = chunk_baseline(session, mode, embedder)
        return notes_for_ranges(session, ranges, llm, cfg)
    raise ValueError(f"unknown extractor mode {mode!r}; expected one of {EXTRACTOR_MODES}")


def build_store(
    conversation: Conversation,
    embedder: Embedder,
    mode: ExtractorMode = "fallback",
    llm: Backend | None = None,
    cfg: ExtractionConfig | None = None,
) -> MemoryStore:
    store = MemoryStore(embedder)
    for session in conversation.sessions:
        for note in session_notes(session, mode, embedder, llm, cfg):
            store.add(session, note, conversation.conversation_id)
    logger.info(
        "built store for %s: %d pages from %d sessions",
        conversation.conversation_id, len(store), len(conversation.sessions),
    )
    return store


def memory_document(conversation: Conversation, pages: list[MemoryPage]) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        **conversation.to_dict(),
        "pages": [p.to_dict() for p in pages],
    }


def save_memory(path: str | Path, conversation: Conversation, store: MemoryStore) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pages = [store.pages[i] for i in sorted(store.pages)]
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(
        json.dumps(memory_document(conversation, pages), indent=2, ensure_ascii=False),
        encoding="utf-8",
    )
    tmp.replace(path)
    return path


def load_memory(path: str | Path, embedder: Embedder) -> tuple[Conversation, MemoryStore]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    conversation = Conversation.from_dict(data)
    store = MemoryStore(embedder)
    for raw in data["pages"]:
        store.insert_page(MemoryPage.from_dict(raw))
    return conversation, store


def store_path(store_dir: str | Path, conversation_id: str) -> Path:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in conversation_id)
    return Path(store_dir) / f"{safe}.json"


def build_or_load(
    conversation: Conversation,
    store_dir: str | Path | None,
    embedder: Embedder,
    mode: ExtractorMode = "fallback",
    llm: Backend | None = None,
    cfg: ExtractionConfig | None = None,
) -> MemoryStore:
    """Reuse a persisted store when present, otherwise build and persist it."""
    if store_dir is None:
        return build_store(conversation, embedder, mode, llm, cfg)
    path = store_path(store_dir, conversation.conversation_id)
    if path.exists():
        logger.info("loading store %s", path)
        return load_memory(path, embedder)[1]
    store = build_store(conversation, embedder, mode, llm, cfg)
    save_memory(path, conversation, store)
    return store
