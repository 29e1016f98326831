import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import demo_notes, make_session
from oracles import absent_keys, all_stored_keys, brute_topk, linear_scan, random_store
from toolmem.embeddings import HashingEmbedder
from toolmem.errors import DuplicatePageId, ZeroVectorQuery
from toolmem.model import Event, Fact, MemoryNote, build_page
from toolmem.store import MAX_K, MemoryStore, normalize_key

SESSION = make_session([("A", f"m{i}") for i in range(5)])


def note(tag="t", keywords=(), persons=(), facts=(), events=(), start=0, end=0):
    return MemoryNote(start, end, "summary", keywords, persons, facts, events, tag)


def test_first_ids_are_monotone(embedder):
    store = MemoryStore(embedder)
    assert store.add(SESSION, note()) == 0
    assert store.add(SESSION, note()) == 1


def test_duplicate_page_id_rejected(embedder):
    store = MemoryStore(embedder)
    store.insert_page(build_page(SESSION, note(), 3))
    with pytest.raises(DuplicatePageId):
        store.insert_page(build_page(SESSION, note(), 3))
    assert store.add(SESSION, note()) == 4


def test_keyword_listed_after_insert(embedder):
    store = MemoryStore(embedder)
    store.add(SESSION, note(keywords=("hiking",)))
    assert "hiking" in store.list_keys("keyword")


def test_person_facts_union_over_pages(embedder):
    store = MemoryStore(embedder)
    store.add(SESSION, note(persons=("Joanna",), facts=(Fact("Joanna", "Joanna writes screenplays."),)))
    store.add(SESSION, note(persons=("Joanna", "Nate"), facts=(Fact("Joanna", "Joanna has a dog."),)))
    profile = store.query_person("Joanna", "facts")
    assert [f.statement for f in profile.facts] == ["Joanna writes screenplays.", "Joanna has a dog."]
    assert profile.events == []


def test_query_string_empty_store(embedder):
    out = MemoryStore(embedder).query_string("anything", "tag")
    assert out.pages == [] and out.empty_hint


def test_query_string_case_insensitive_tag(embedder):
    store = MemoryStore(embedder)
    for tag in ("travel", "music", "Travel"):
        store.add(SESSION, note(tag=tag))
    # oracle: linear scan over the three pages
    expected = linear_scan(store.pages.values(), "Travel", "tag")
    assert expected == [0, 2]
    assert [p.page_id for p in store.query_string("Travel", "tag").pages] == expected


def test_query_string_absent_keyword(store):
    out = store.query_string("nonexistent", "keyword")
    assert out.pages == [] and out.empty_hint


def test_query_string_normalizes_whitespace(store):
    assert [p.page_id for p in store.query_string("  SUPPORT   group ", "keyword").pages] == [0]


def test_query_topk_returns_all_pages_ranked(embedder):
    store = MemoryStore(embedder)
    store.add(SESSION, note(events=(Event("went hiking in the hills", "May"),)))
    store.add(SESSION, note(events=(Event("baked a lemon cake", "June"),)))
    store.add(SESSION, note(events=(Event("hiking trip with friends", "July"),)))
    out = store.query_topk("hiking", "events", 5)
    assert sorted(p.page_id for p in out.pages) == [0, 1, 2]
    assert out.scores == sorted(out.scores, reverse=True)
    assert all(-1 <= s <= 1 for s in out.scores)
    assert [p.page_id for p in out.pages] == brute_topk(store.pages.values(), embedder, "hiking", "events", 5)


def test_query_topk_self_similarity(store):
    out = store.query_topk("Melanie ran a charity race for mental health.", "events", 5)
    assert out.pages[0].page_id == 2
    assert out.scores[0] == pytest.approx(1.0, abs=1e-6)


def test_query_topk_tie_breaks_on_page_id(embedder):
    store = MemoryStore(embedder)
    store.insert_page(build_page(SESSION, note(facts=(Fact("A", "likes jazz"),)), 5))
    store.insert_page(build_page(SESSION, note(facts=(Fact("A", "likes jazz"),)), 2))
    out = store.query_topk("jazz", "facts", 5)
    assert [p.page_id for p in out.pages] == [2, 5]
    assert out.scores[0] == out.scores[1]


def test_query_topk_collapses_duplicate_pages(embedder):
    store = MemoryStore(embedder)
    store.add(SESSION, note(events=(Event("hiking", "a"), Event("hiking trip", "b"))))
    store.add(SESSION, note(events=(Event("cake", "c"),)))
    out = store.query_topk("hiking", "events", 2)
    assert [p.page_id for p in out.pages] == [0]


def test_query_topk_empty_index(embedder):
    store = MemoryStore(embedder)
    store.add(SESSION, note())
    out = store.query_topk("hiking", "events", 5)
    assert out.pages == [] and out.empty_hint


def test_query_topk_zero_vector_query(store):
    with pytest.raises(ZeroVectorQuery):
        store.query_topk("?!", "facts", 5)


def test_query_topk_k_validation_and_cap(store):
    with pytest.raises(ValueError):
        store.query_topk("garden", "facts", 0)
    assert len(store.query_topk("garden", "facts", 10_000).pages) <= MAX_K


def test_zero_vector_entries_never_ranked(embedder):
    store = MemoryStore(embedder)
    store.add(SESSION, note(events=(Event("...", "x"),)))
    store.add(SESSION, note(events=(Event("garden party", "y"),)))
    out = store.query_topk("garden", "events", 5)
    assert [p.page_id for p in out.pages] == [1]


def test_query_person_unknown(store):
    profile = store.query_person("Nobody", "events")
    assert profile.empty


def test_query_person_events_across_sessions(store):
    profile = store.query_person("caroline", "events")
    # manual union: page 0 (session 1) + page 1 (session 1) + page 2 (session 2)
    stamps = {(e.description, e.session_timestamp) for e in profile.events}
    assert ("Caroline attended an LGBTQ support group.", "1:56 pm on 8 May, 2023") in stamps
    assert ("Caroline went hiking with friends.", "1:14 pm on 25 May, 2023") in stamps
    assert [e.page_id for e in profile.events] == [0, 1, 2, 2]


def test_query_person_facts_in_insertion_order(store):
    facts = store.query_person("Melanie", "facts").facts
    assert [(f.statement, f.page_id) for f in facts] == [
        ("Melanie paints sunrise landscapes.", 1),
        ("Melanie grows tomatoes in her garden.", 1),
        ("Melanie has roses in her garden.", 2),
    ]


def test_list_keys(embedder):
    store = MemoryStore(embedder)
    assert store.list_keys("tag") == []
    store.add(SESSION, note(tag="travel", persons=("joanna",)))
    store.add(SESSION, note(tag="music", persons=("Joanna",)))
    assert store.list_keys("tag") == ["music", "travel"]
    assert store.list_keys("person") == ["joanna"]


def test_unknown_index_kind(store):
    with pytest.raises(ValueError):
        store.query_string("x", "colour")
    with pytest.raises(ValueError):
        store.query_topk("x", "places", 1)


def test_store_invariants_on_demo(store):
    for kind, index in store.string_index.items():
        for ids in index.values():
            assert all(i in store.pages for i in ids)
    n_events = sum(len(p.note.events) for p in store.pages.values())
    n_facts = sum(len(p.note.facts) for p in store.pages.values())
    assert len(store.vector_index["events"]) == n_events
    assert len(store.vector_index["facts"]) == n_facts


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_pages=st.integers(0, 60))
def test_string_queries_match_linear_scan(seed, n_pages):
    rng = random.Random(seed)
    store = random_store(rng, n_pages)
    pages = list(store.pages.values())
    for kind in ("person", "tag", "keyword"):
        for key in all_stored_keys(pages, kind) + absent_keys(rng, 5):
            got = [p.page_id for p in store.query_string(key, kind).pages]
            assert got == linear_scan(pages, key, kind)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_pages=st.integers(1, 60), k=st.sampled_from([1, 3, 5, 10]))
def test_topk_matches_brute_force(seed, n_pages, k):
    rng = random.Random(seed)
    emb = HashingEmbedder()
    store = random_store(rng, n_pages, emb)
    for kind in ("events", "facts"):
        for query in ("hiking", "garden race", "paint music cat"):
            got = [p.page_id for p in store.query_topk(query, kind, k).pages]
            assert got == brute_topk(store.pages.values(), emb, query, kind, k)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_pages=st.integers(0, 40))
def test_reachability_and_aggregates(seed, n_pages):
    store = random_store(random.Random(seed), n_pages)
    for page in store.pages.values():
        note_ = page.note
        for key in note_.keywords:
            assert page in store.query_string(key, "keyword").pages
        for key in note_.persons:
            assert page in store.query_string(key, "person").pages
        assert page in store.query_string(note_.tag, "tag").pages
    for norm_name, profile in store.person_aggregates.items():
        owning = [p for p in store.pages.values() if norm_name in {normalize_key(x) for x in p.note.persons}]
        assert len(profile.events) == sum(len(p.note.events) for p in owning)
        assert len(profile.facts) == sum(
            1 for p in owning for f in p.note.facts if normalize_key(f.person) == norm_name
        )


def test_identical_inserts_give_identical_results():
    a, b = random_store(random.Random(7), 50), random_store(random.Random(7), 50)
    assert a.string_index == b.string_index
    for kind in ("events", "facts"):
        va = np.array([e.vector for e in a.vector_index[kind]])
        vb = np.array([e.vector for e in b.vector_index[kind]])
        assert va.tobytes() == vb.tobytes()
        qa, qb = a.query_topk("cake yoga", kind, 5), b.query_topk("cake yoga", kind, 5)
        assert [p.page_id for p in qa.pages] == [p.page_id for p in qb.pages]
        assert qa.scores == qb.scores


def test_demo_notes_fixture_is_consistent():
    assert len(demo_notes()) == 3
