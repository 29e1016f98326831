from __future__ import annotations

import json
from pathlib import Path

import pytest

from toolmem.embeddings import HashingEmbedder
from toolmem.model import Conversation, ConversationSession, Event, Fact, MemoryNote, Message
from toolmem.store import MemoryStore

FIXTURES = Path(__file__).parent / "fixtures"


def make_session(lines, session_id="s1", timestamp="1:56 pm on 8 May, 2023") -> ConversationSession:
    """``lines`` is a list of (speaker, text) pairs."""
    msgs = tuple(Message(i, spk, text, f"D:{i}") for i, (spk, text) in enumerate(lines))
    return ConversationSession(session_id, timestamp, msgs)


SESSION_1 = [
    ("Caroline", "I went to a LGBTQ support group yesterday and it was so powerful."),
    ("Melanie", "Wow, that's cool, Caroline! What happened that was so awesome?"),
    ("Caroline", "The transgender stories were so inspiring! I want to pursue counseling."),
    ("Melanie", "I'm painting a sunrise landscape these days."),
    ("Caroline", "Painting sounds relaxing. Do you paint outdoors?"),
    ("Melanie", "Yes, in my garden, where I grow tomatoes."),
]
SESSION_2 = [
    ("Melanie", "I ran a charity race for mental health last Saturday."),
    ("Caroline", "That's great! I went hiking with friends on Sunday."),
    ("Melanie", "My garden has lots of roses now."),
]


def demo_conversation() -> Conversation:
    return Conversation(
        "conv-demo",
        (
            make_session(SESSION_1, "session_1", "1:56 pm on 8 May, 2023"),
            make_session(SESSION_2, "session_2", "1:14 pm on 25 May, 2023"),
        ),
        ("Caroline", "Melanie"),
    )


def demo_notes() -> list[tuple[str, MemoryNote]]:
    return [
        ("session_1", MemoryNote(
            0, 2, "Caroline describes a moving LGBTQ support group and wants to study counseling.",
            keywords=("support group", "counseling"), persons=("Caroline", "Melanie"),
            facts=(Fact("Caroline", "Caroline wants to pursue counseling."),),
            events=(Event("Caroline attended an LGBTQ support group.", "7 May 2023"),),
            tag="support group",
        )),
        ("session_1", MemoryNote(
            3, 5, "Melanie paints sunrise landscapes and grows tomatoes in her garden.",
            keywords=("painting", "garden", "tomatoes"), persons=("Melanie", "Caroline"),
            facts=(Fact("Melanie", "Melanie paints sunrise landscapes."),
                   Fact("Melanie", "Melanie grows tomatoes in her garden.")),
            events=(Event("Melanie is painting a sunrise landscape.", "May 2023"),),
            tag="painting",
        )),
        ("session_2", MemoryNote(
            0, 2, "Melanie ran a charity race; Caroline went hiking; Melanie's roses bloom.",
            keywords=("charity race", "hiking", "garden"), persons=("Melanie", "Caroline"),
            facts=(Fact("Melanie", "Melanie has roses in her garden."),),
            events=(Event("Melanie ran a charity race for mental health.", "20 May 2023"),
                    Event("Caroline went hiking with friends.", "21 May 2023")),
            tag="fitness",
        )),
    ]


def demo_store() -> MemoryStore:
    conv = demo_conversation()
    store = MemoryStore(HashingEmbedder())
    for sid, note in demo_notes():
        store.add(conv.session(sid), note, conv.conversation_id)
    return store


def happy_path_steps() -> list[dict]:
    return [
        {"tool_calls": [{"name": "list_person_names", "arguments": {}}]},
        {"match": "Caroline",
         "tool_calls": [{"name": "get_person_events", "arguments": {"name": "Caroline"}}]},
        {"match": "support group", "content": "7 May 2023"},
    ]


def load_fixture(name: str):
    return json.loads((FIXTURES / name).read_text(encoding="utf-8"))


@pytest.fixture
def embedder():
    return HashingEmbedder()


@pytest.fixture
def store():
    return demo_store()


@pytest.fixture
def conversation():
    return demo_conversation()
