from __future__ import annotations

import os
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from persim.corpus import ProductItem, build_index
from persim.dialogue import InterviewConfig, Transcript, Utterance
from persim.llm_backend import ScriptedBackend
from persim.persona import make_persona
from persim.recommend import (
    SCENARIOS,
    Backends,
    PipelineConfig,
    PipelineError,
    QueryPhrase,
    RankedItem,
    RankingError,
    RecommendationList,
    SessionResult,
    aggregate_and_finalize,
    batch_rank,
    batch_retrieve,
    formulate_query,
    normalize_query,
    parse_ranking,
    retrieve_pool,
    run_cross_task,
    run_persona,
    run_session_a,
    run_session_b,
)
from persim.synthetic import PERSONA_A, PERSONA_B, demo_personas, pipeline_backend

from oracles import brute_force

GOLDEN = Path(__file__).parent / "golden"


class Recorder:
    kind = "scripted"

    def __init__(self, inner):
        self.inner = inner
        self.prompts = []

    def complete(self, request):
        self.prompts.append(request.messages[-1].content)
        return self.inner.complete(request)


def transcript(*texts, label="SessionA"):
    utterances = [Utterance("user" if i % 2 == 0 else "agent", t, i) for i, t in enumerate(texts)]
    return Transcript.from_dict({
        "session_id": "s", "persona_id": "p", "task_label": label,
        "utterances": [u.to_dict() for u in utterances],
    })


def ranked(*ids):
    return [RankedItem(ProductItem(i, f"title {i}", "Electronics"), n, "why") for n, i in enumerate(ids, 1)]


# -- query ---------------------------------------------------------------------


def test_query_short_phrase(persona_a):
    q = formulate_query(persona_a, transcript("hi"), ScriptedBackend(["fragrance-free rosacea moisturizer"]))
    assert q == QueryPhrase("fragrance-free rosacea moisturizer", 3, False)


def test_query_nine_words_truncated(persona_a):
    raw = "Gentle fragrance free moisturizer for rosacea prone sensitive skin."
    q = formulate_query(persona_a, transcript("hi"), ScriptedBackend([raw]))
    assert q == QueryPhrase(" ".join(raw.split()[:5]), 5, True)


@pytest.mark.parametrize(
    "raw, text",
    [
        ('"1TB external drive."', "1TB external drive"),
        ("Output: magnesium glycinate\nextra line", "magnesium glycinate"),
        ("**tinted moisturizer**", "tinted moisturizer"),
        ("\n\n  Search phrase: 'eco cleaning spray'!", "eco cleaning spray"),
    ],
)
def test_normalize_strips_decoration(raw, text):
    assert normalize_query(raw).text == text


@given(st.text(max_size=120))
def test_normalize_invariants(raw):
    q = normalize_query(raw)
    assert q.word_count == len(q.text.split()) <= 5
    first = next((ln for ln in raw.splitlines() if ln.strip()), "")
    if len(first.split()) <= 5:
        assert not q.truncated


def test_query_failure_on_empty(persona_a):
    with pytest.raises(Exception, match="no words"):
        formulate_query(persona_a, transcript("hi"), ScriptedBackend(['""']))


def test_persona_b_query_mentions_storage(index, persona_b):
    result = run_session_a(persona_b, index, Backends.single(pipeline_backend()), PipelineConfig())
    assert "storage" in result.recommendations.query.text


def test_query_prompt_uses_template(persona_a):
    backend = Recorder(ScriptedBackend(["x"]))
    formulate_query(persona_a, transcript("hello there"), backend)
    prompt = backend.prompts[0]
    assert prompt.startswith("You are a shopping assistant tasked with ranking products")
    assert "Reference Interview:\nUser: hello there\n" in prompt
    assert prompt.endswith("Output: One short phrase that reflects the user's intent.")


# -- retrieval -----------------------------------------------------------------


def test_retrieve_no_shared_tokens(index):
    assert batch_retrieve(transcript("zzqx", "qqq?", "vvvv"), index, 10) == []


def test_retrieve_single_qa_matches_oracle(corpus, index):
    t = transcript("I need a coffee maker", "Any brand?", "Keurig or similar, under $100")
    q = QueryPhrase("compact coffee maker", 3)
    pool = batch_retrieve(t, index, 10, query=q, pool_size=50)
    best = {}
    for key in [q.text, *t.user_texts]:
        for item_id, score in brute_force(corpus, key, 10):
            best[item_id] = max(score, best.get(item_id, float("-inf")))
    want = sorted(best.items(), key=lambda p: (-p[1], p[0]))
    assert [(s.item.item_id) for s in pool] == [i for i, _ in want]
    assert all(abs(s.score - w) <= 1e-9 for s, (_, w) in zip(pool, want))


def test_retrieve_k1_single_query(index):
    assert retrieve_pool(["walking shoes"], index, 1, 20) == index.search("walking shoes", 1)
    assert batch_retrieve(transcript("walking shoes"), index, 1) == index.search("walking shoes", 1)


def test_pool_size_caps(index):
    pool = batch_retrieve(transcript("coffee tea snacks shoes drive"), index, 10, pool_size=4)
    assert len(pool) == 4


# -- ranking -------------------------------------------------------------------


def test_parse_ranking_formats():
    text = (
        "Here you go:\n"
        "1. B01 — great fit\n"
        "2) **B02** - cheap\n"
        "3. [B03]: reliable\n"
        "not a ranking line\n"
    )
    assert parse_ranking(text) == [("B01", "great fit"), ("B02", "cheap"), ("B03", "reliable")]


def test_rank_single_candidate(corpus, persona_a):
    item = corpus[0]
    out = batch_rank([item], persona_a, transcript("x"), ScriptedBackend([f"1. {item.item_id} — fits"]))
    assert [(r.item.item_id, r.rank) for r in out] == [(item.item_id, 1)]


def test_rank_three_in_order(corpus, persona_a):
    cands = corpus[:6]
    text = "\n".join(f"{n}. {c.item_id} — reason {n}" for n, c in enumerate([cands[4], cands[1], cands[2]], 1))
    out = batch_rank(cands, persona_a, transcript("x"), ScriptedBackend([text]))
    assert [r.item.item_id for r in out] == [cands[4].item_id, cands[1].item_id, cands[2].item_id]
    assert [r.justification for r in out] == ["reason 1", "reason 2", "reason 3"]


def test_rank_drops_hallucinations(corpus, persona_a):
    cands = corpus[:3]
    text = f"1. FAKE999 — invented\n2. {cands[2].item_id} — real"
    out = batch_rank(cands, persona_a, transcript("x"), ScriptedBackend([text]))
    assert [r.item.item_id for r in out] == [cands[2].item_id]
    assert out[0].rank == 1


def test_rank_reprompts_once(corpus, persona_a):
    cands = corpus[:2]
    backend = Recorder(ScriptedBackend(["I like them all!", f"1. {cands[1].item_id} — ok"]))
    out = batch_rank(cands, persona_a, transcript("x"), backend)
    assert [r.item.item_id for r in out] == [cands[1].item_id]
    assert "could not be parsed" in backend.prompts[1]
    with pytest.raises(RankingError):
        batch_rank(cands, persona_a, transcript("x"), ScriptedBackend(["no", "still no"]))


def test_persona_a_list_shape(index, persona_a):
    cands = [s.item for s in index.search("fragrance-free moisturizer rosacea redness", 10)]
    backend = Recorder(pipeline_backend())
    out = aggregate_and_finalize(batch_rank(cands, persona_a, transcript("x"), backend))
    assert len(out) == 3
    for entry in out:
        assert entry.item.price is not None
        assert entry.justification and "\n" not in entry.justification
    assert "price: $" in backend.prompts[0]
    assert "Provide a ranked list of the top 3 products" in backend.prompts[0]


def test_finalize_cases():
    assert aggregate_and_finalize([]) == []
    out = aggregate_and_finalize(ranked("A", "B") + ranked("A") + ranked("C"))
    assert [(r.item.item_id, r.rank) for r in out] == [("A", 1), ("B", 2), ("C", 3)]
    assert [r.item.item_id for r in aggregate_and_finalize(ranked(*"VWXYZ"))] == ["V", "W", "X"]


@given(st.lists(st.sampled_from("ABCDEF"), max_size=12))
def test_finalize_idempotent_and_order_preserving(ids):
    entries = [RankedItem(ProductItem(i, i, "Electronics"), n + 1, "w") for n, i in enumerate(ids)]
    once = aggregate_and_finalize(entries)
    assert aggregate_and_finalize(once) == once
    assert [r.item.item_id for r in once] == list(dict.fromkeys(ids))[:3]
    assert [r.rank for r in once] == list(range(1, len(once) + 1))


def test_recommendation_list_invariants(corpus):
    item = corpus[0]
    with pytest.raises(ValueError):
        RecommendationList("SessionA", (RankedItem(item, 1, "w"),), QueryPhrase("x", 1), ())
    with pytest.raises(ValueError):
        RecommendationList("SessionA", (RankedItem(item, 2, "w"),), QueryPhrase("x", 1), (item.item_id,))


# -- scenarios -----------------------------------------------------------------


def scenario_results(persona, index, config=PipelineConfig()):
    return run_persona(persona, index, Backends.single(pipeline_backend()), config)


@pytest.mark.parametrize("pid", ["PA", "PB"])
@pytest.mark.parametrize("scenario", SCENARIOS)
def test_golden_results(index, pid, scenario):
    persona = make_persona({"PA": PERSONA_A, "PB": PERSONA_B}[pid])
    result = scenario_results(persona, index)[scenario]
    path = GOLDEN / result.file_name
    if os.environ.get("PERSIM_UPDATE_GOLDEN"):
        path.parent.mkdir(exist_ok=True)
        path.write_text(result.dumps(), encoding="utf-8")
    assert result.dumps() == path.read_text(encoding="utf-8")
    assert len(result.recommendations.items) == 3


def test_session_a_is_pure(index, persona_a):
    a = scenario_results(persona_a, index)
    b = scenario_results(persona_a, index)
    assert {k: v.dumps() for k, v in a.items()} == {k: v.dumps() for k, v in b.items()}


def test_session_result_round_trip(index, persona_b):
    for result in scenario_results(persona_b, index).values():
        assert SessionResult.loads(result.dumps()).dumps() == result.dumps()


def test_minimal_pipeline_ranks_the_match(persona_a):
    only = ProductItem("X1", "Quokka plush toy", "Clothing, Shoes and Jewelry", price=9.0)
    other = ProductItem("X2", "Steel kettle", "Home and Kitchen", price=20.0)
    index = build_index([only, other])
    persona = make_persona(PERSONA_A, opening_query="I want a quokka plush.")
    config = PipelineConfig(InterviewConfig(n_pairs=0))
    result = run_session_a(persona, index, Backends.single(pipeline_backend()), config)
    assert result.recommendations.item_ids == ["X1"]
    assert len(result.transcript.utterances) == 1


def test_empty_pool_gives_empty_list():
    index = build_index([ProductItem("X2", "Steel kettle", "Home and Kitchen")])
    persona = make_persona(PERSONA_A, opening_query="I want a quokka plush.")
    config = PipelineConfig(InterviewConfig(n_pairs=0))
    result = run_session_a(persona, index, Backends.single(pipeline_backend()), config)
    assert result.recommendations.items == ()
    assert result.relevant_labels == ()


def test_session_b_sees_session_a(index, persona_a):
    backend = Recorder(pipeline_backend())
    backends = Backends.single(backend)
    a = run_session_a(persona_a, index, backends, PipelineConfig())
    backend.prompts.clear()
    b = run_session_b(persona_a, a, index, backends, PipelineConfig())
    assert "tinted moisturizer" in b.transcript.opening_query.text
    assert len(b.recommendations.items) == 3
    rank_prompt = next(p for p in backend.prompts if "Retrieved Items:" in p)
    assert "Prior Session Context (Session A)" in rank_prompt
    assert a.transcript.opening_query.text.split()[0] in rank_prompt
    for label in a.relevant_labels:
        assert label in rank_prompt
    assert b.provenance["prior_context"] is True
    assert b.provenance["prior_labels"] == list(a.relevant_labels)


def test_session_b_without_prior(index, persona_a):
    empty_a = SessionResult(
        transcript("hi"), RecommendationList("SessionA", (), QueryPhrase("hi", 1), ()), ()
    )
    backend = Recorder(pipeline_backend())
    b = run_session_b(persona_a, empty_a, index, Backends.single(backend), PipelineConfig())
    assert b.provenance["prior_context"] is False
    assert not any("Prior Session Context" in p for p in backend.prompts)


def test_cross_task_uses_task_a_labels(index, persona_b):
    backend = Recorder(pipeline_backend())
    backends = Backends.single(backend)
    a = run_session_a(persona_b, index, backends, PipelineConfig())
    b = run_session_b(persona_b, a, index, backends, PipelineConfig())
    backend.prompts.clear()
    c = run_cross_task(persona_b, b, index, backends, PipelineConfig())
    assert "joints" in c.transcript.opening_query.text
    assert c.transcript.qa_pairs == ()
    assert len(c.recommendations.items) == 3
    rank_prompt = next(p for p in backend.prompts if "Retrieved Items:" in p)
    for label in b.relevant_labels:
        assert label in rank_prompt
    # no interview: only the query and rank prompts were issued
    assert not any(p.startswith("You are a highly capable") for p in backend.prompts)
    assert len(backend.prompts) == 2


def test_cross_task_cold_start(index, persona_b):
    empty = SessionResult(
        transcript("earlier text about coffee"),
        RecommendationList("SessionB", (), QueryPhrase("x", 1), ()),
        (),
    )
    c = run_cross_task(persona_b, empty, index, Backends.single(pipeline_backend()), PipelineConfig())
    keys = [c.recommendations.query.text, persona_b.cross_task_query]
    want = retrieve_pool(keys, index, 10, 20)
    assert list(c.recommendations.candidate_ids) == [s.item.item_id for s in want]
    assert c.provenance["prior_context"] is False


def test_every_recommendation_is_a_candidate(index):
    for persona in demo_personas(4):
        for result in scenario_results(persona, index).values():
            recs = result.recommendations
            assert set(recs.item_ids) <= set(recs.candidate_ids)
            assert all(i in index for i in recs.item_ids)
            assert len(set(recs.item_ids)) == len(recs.item_ids)


def test_stage_failure_is_reported(index, persona_a):
    with pytest.raises(PipelineError) as err:
        run_session_a(persona_a, index, Backends.single(ScriptedBackend(["only one"])), PipelineConfig())
    assert err.value.stage == "interview"


def test_run_persona_reports_new_results(index, persona_a):
    seen = []
    backends = Backends.single(pipeline_backend())
    out = run_persona(persona_a, index, backends, PipelineConfig(), ["SessionB"], on_result=seen.append)
    assert [r.scenario for r in seen] == ["SessionA", "SessionB"]
    seen.clear()
    run_persona(persona_a, index, backends, PipelineConfig(), SCENARIOS, existing=out, on_result=seen.append)
    assert [r.scenario for r in seen] == ["CrossTaskB"]
