import json
import math
import random
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_session
from toolmem.embeddings import HashingEmbedder
from toolmem.errors import CoverageRepairFailed, EmptySession, MalformedExtraction
from toolmem.extractor import (
    ExtractionConfig,
    chunk_baseline,
    extract_notes,
    extract_session,
    fallback_extract,
    fixed_chunks,
    heuristic_note,
    llm_chunk_note,
    percentile_linear,
    semantic_boundaries,
    smooth_overlap,
)
from toolmem.llm import ScriptedBackend
from toolmem.model import MemoryNote


def ten_messages():
    return make_session([("Ana" if i % 2 else "Ben", f"message number {i}") for i in range(10)])


def record(start, end, tag="topic", **kw):
    rec = {
        "start_idx": start, "end_idx": end, "summary": f"summary {start}-{end}",
        "keywords": ["alpha"], "persons": ["Ana"],
        "facts": [{"person": "Ben", "statement": "Ben likes tea."}],
        "events": [{"description": "Ana moved", "temporal_ref": "May 2023"}],
        "tag": tag,
    }
    rec.update(kw)
    return rec


class CountingBackend:
    def __init__(self, inner):
        self.inner, self.calls = inner, 0

    def complete(self, messages, tools=None):
        self.calls += 1
        return self.inner.complete(messages, tools)


def scripted(*contents):
    return CountingBackend(ScriptedBackend([{"content": c} for c in contents]))


def test_two_wellformed_notes():
    llm = scripted(json.dumps([record(0, 4), record(5, 9)]))
    notes = extract_notes(ten_messages(), llm)
    assert [(n.start, n.end) for n in notes] == [(0, 4), (5, 9)]
    assert llm.calls == 1
    assert notes[0].persons == ("Ana", "Ben")  # fact person repaired in


def test_broken_then_valid_output_records_one_repair():
    llm = scripted("[{not json", "```json\n" + json.dumps([record(0, 9)]) + "\n```")
    result = extract_session(ten_messages(), llm)
    assert result.repair_attempts == 1
    assert result.calls == llm.calls == 2
    assert [(n.start, n.end) for n in result.notes] == [(0, 9)]


def test_end_index_clamped_with_logged_repair():
    llm = scripted(json.dumps([record(0, 99)]))
    result = extract_session(ten_messages(), llm)
    assert [(n.start, n.end) for n in result.notes] == [(0, 9)]
    assert any("clamped" in r for r in result.repairs)


def test_start_beyond_session_fails_after_retries():
    bad = json.dumps([record(12, 99)])
    llm = scripted(bad, bad)
    with pytest.raises(MalformedExtraction):
        extract_notes(ten_messages(), llm)
    assert llm.calls == 2


def test_no_retries_when_disabled():
    llm = scripted("nonsense")
    with pytest.raises(MalformedExtraction):
        extract_notes(ten_messages(), llm, ExtractionConfig(max_repair_attempts=0))
    assert llm.calls == 1


def test_gaps_filled_and_overlaps_merged():
    llm = scripted(json.dumps([record(2, 3), record(3, 5, tag="b"), record(8, 8)]))
    result = extract_session(ten_messages(), llm)
    assert [(n.start, n.end) for n in result.notes] == [(0, 7), (8, 9)]
    assert any("merged" in r for r in result.repairs)
    assert any("gap" in r for r in result.repairs)


def test_inverted_notes_dropped():
    llm = scripted(json.dumps([record(5, 2), record(0, 9)]))
    result = extract_session(ten_messages(), llm)
    assert [(n.start, n.end) for n in result.notes] == [(0, 9)]
    assert any("dropped" in r for r in result.repairs)


def test_all_notes_dropped_is_coverage_failure():
    only_inverted = json.dumps([record(5, 2)])
    with pytest.raises(CoverageRepairFailed):
        extract_notes(ten_messages(), scripted(only_inverted, only_inverted))


def test_missing_key_triggers_reprompt_with_error():
    bad = [record(0, 9)]
    del bad[0]["tag"]
    backend = ScriptedBackend([
        {"content": json.dumps(bad)},
        {"match": "missing keys", "content": json.dumps([record(0, 9)])},
    ])
    assert len(extract_notes(ten_messages(), backend)) == 1


def test_prompt_is_one_shot_and_renders_indices():
    seen = {}

    class Spy:
        def complete(self, messages, tools=None):
            seen["messages"] = messages
            return ScriptedBackend([{"content": json.dumps([record(0, 9)])}]).complete(messages)

    extract_notes(ten_messages(), Spy())
    system, user = seen["messages"]
    assert "Example output" in system.content
    assert "[9] Ana: message number 9" in user.content
    assert user.content.startswith("Session timestamp:")


def test_smooth_overlap_examples():
    a = MemoryNote(0, 4, "s", tag="t")
    b = MemoryNote(5, 9, "s", tag="t")
    assert [(n.start, n.end) for n in smooth_overlap([a, b], 1, 10)] == [(0, 4), (4, 9)]
    assert smooth_overlap([a], 1, 10) == [a]
    assert smooth_overlap([a, b], 0, 10) == [a, b]


def test_fallback_windowing():
    session = make_session([("A", f"line {i}") for i in range(12)])
    notes = fallback_extract(session, ExtractionConfig(fallback_window=10))
    assert [(n.start, n.end) for n in notes] == [(0, 9), (9, 11)]


def test_fallback_month_event_and_first_person_fact():
    session = make_session([("Ana", "We met in May"), ("Ben", "I adopted a cat"), ("Ana", "I'm tired")],
                           timestamp="3 June 2023")
    (note,) = fallback_extract(session)
    assert [(e.description, e.temporal_ref) for e in note.events] == [("We met in May", "3 June 2023")]
    assert [(f.person, f.statement) for f in note.facts] == [("Ben", "I adopted a cat")]
    assert note.persons == ("Ana", "Ben")


def test_fallback_keywords_frequency_then_lexicographic():
    session = make_session([
        ("A", "garden garden zebra apple apple mango kiwi"),
        ("B", "this that with about melon berry"),
    ])
    note = heuristic_note(session, 0, 1)
    # counts: apple 2, garden 2, then 1s in lexicographic order; stopwords excluded
    assert note.keywords == ("apple", "garden", "berry", "kiwi", "mango")
    assert note.tag == "apple"


def test_fallback_summary_first_25_tokens():
    session = make_session([("A", " ".join(f"w{i}" for i in range(40)))])
    assert fallback_extract(session)[0].summary == " ".join(f"w{i}" for i in range(25))


def test_fallback_empty_session():
    empty = SimpleNamespace(session_id="x", messages=(), timestamp="")
    with pytest.raises(EmptySession):
        fallback_extract(empty)
    with pytest.raises(EmptySession):
        chunk_baseline(empty, "fixed")


def uniform_session(n, tokens):
    return make_session([("A", " ".join(["tok"] * tokens)) for _ in range(n)])


def test_fixed_chunks_uniform_fixture():
    # 5 x 100 tokens fill 500 <= 512; backing up 2 messages gives 200 >= 125 overlap
    assert chunk_baseline(uniform_session(10, 100), "fixed") == [(0, 4), (3, 7), (6, 9)]


def test_fixed_chunks_short_session_is_one_chunk():
    assert chunk_baseline(uniform_session(4, 50), "fixed") == [(0, 3)]


def test_fixed_chunks_oversized_message_stands_alone():
    assert fixed_chunks([600, 10, 10]) == [(0, 0), (1, 2)]


class AngleEmbedder:
    """Maps message i to a unit 2-d vector at a preset angle."""

    def __init__(self, angles):
        self.angles = {f"m{i}": a for i, a in enumerate(angles)}
        self.dimension = 2

    def embed(self, text):
        a = self.angles[text]
        return np.array([math.cos(a), math.sin(a)])


def test_semantic_single_outlier_boundary():
    steps = [0.1] * 10
    steps[5] = 1.5
    angles = np.concatenate([[0.0], np.cumsum(steps)])
    session = make_session([("A", f"m{i}") for i in range(11)])
    # oracle: numpy's linear-interpolation percentile over the adjacent cosines
    sims = [math.cos(s) for s in steps]
    threshold = np.percentile(sims, 8)
    assert [i for i, s in enumerate(sims) if s < threshold] == [5]
    assert chunk_baseline(session, "semantic", AngleEmbedder(angles)) == [(0, 5), (6, 10)]


@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=50))
def test_percentile_matches_numpy(values):
    assert percentile_linear(values, 8.0) == pytest.approx(float(np.percentile(values, 8)), abs=1e-12)


def test_semantic_uniform_similarities_no_split():
    assert semantic_boundaries([0.5] * 10) == []


def test_semantic_with_hashing_embedder_covers_session():
    session = make_session([("A", t) for t in ["hiking trip", "hiking hills", "cake recipe", "baking cake",
                                                 "yoga class", "yoga mat", "hiking boots"]])
    ranges = chunk_baseline(session, "semantic", HashingEmbedder())
    assert ranges[0][0] == 0 and ranges[-1][1] == len(session) - 1
    assert all(b[0] == a[1] + 1 for a, b in zip(ranges, ranges[1:]))


def test_llm_chunk_note_forces_range():
    reply = json.dumps({k: v for k, v in record(0, 0).items() if not k.endswith("_idx")})
    note = llm_chunk_note(ten_messages(), 3, 6, ScriptedBackend([{"content": reply}]), ExtractionConfig())
    assert (note.start, note.end) == (3, 6)
    assert note.tag == "topic"


def test_config_validation():
    with pytest.raises(ValueError):
        ExtractionConfig(overlap_msgs=-1)
    with pytest.raises(ValueError):
        ExtractionConfig(fallback_window=1)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 40), window=st.integers(2, 12))
def test_fallback_coverage_and_order(n, window):
    session = make_session([("A", f"text {i}") for i in range(n)])
    notes = fallback_extract(session, ExtractionConfig(fallback_window=window))
    covered = set()
    for note in notes:
        covered.update(range(note.start, note.end + 1))
    assert covered == set(range(n))
    assert all(b.start > a.start for a, b in zip(notes, notes[1:]))
    assert all(b.start <= a.end + 1 for a, b in zip(notes, notes[1:]))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_fixed_chunks_bounds_and_overlap(seed):
    rng = random.Random(seed)
    counts = [rng.randint(1, 120) for _ in range(rng.randint(1, 60))]
    chunks = fixed_chunks(counts)
    assert chunks[0][0] == 0 and chunks[-1][1] == len(counts) - 1
    for s, e in chunks:
        assert sum(counts[s : e + 1]) <= 512
    for (s0, e0), (s1, e1) in zip(chunks, chunks[1:]):
        assert s0 < s1 <= e0 + 1 and e1 > e0
        overlap = sum(counts[s1 : e0 + 1])
        assert overlap >= 0.25 * sum(counts[s0 : e0 + 1]) or (s1 == s0 + 1 and overlap >= counts[e0])
