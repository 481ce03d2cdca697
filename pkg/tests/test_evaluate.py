from __future__ import annotations

import csv
import io
import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from persim.evaluate import (
    METRIC_DEFINITIONS,
    METRICS,
    AggregationError,
    JudgeError,
    JudgeParseError,
    MetricScores,
    TrialRecord,
    aggregate,
    dump_trials,
    emit_report,
    judge_list,
    load_trials,
    parse_judgement,
    plotdata_csv,
    report_csv,
    run_trials,
)
from persim.llm_backend import ScriptedBackend
from persim.recommend import SCENARIOS, QueryPhrase, RankedItem, RecommendationList
from persim.synthetic import REFERENCE_PATTERN, demo_personas, reference_pattern_trials, synthetic_corpus

from oracles import judge_fuzz_corpus


def recs(scenario="SessionA", n=3):
    items = synthetic_corpus()[:n]
    return RecommendationList(
        scenario,
        tuple(RankedItem(it, i + 1, "fits") for i, it in enumerate(items)),
        QueryPhrase("q", 1),
        tuple(it.item_id for it in items),
    )


def trial(pid, scenario, r, d, n):
    return TrialRecord(pid, scenario, MetricScores(r, d, n), f"{pid}.{scenario}.json", "T")


class Recorder:
    kind = "scripted"

    def __init__(self, texts):
        self.inner = ScriptedBackend(texts)
        self.requests = []

    def complete(self, request):
        self.requests.append(request)
        return self.inner.complete(request)


# -- parsing -------------------------------------------------------------------


def test_parse_labeled_lines():
    s = parse_judgement("relevance: 5\ndiversity: 3\nnovelty: 2")
    assert s.as_tuple() == (5, 3, 2)


def test_parse_json():
    assert parse_judgement('{"relevance":4,"diversity":4,"novelty":4}').as_tuple() == (4, 4, 4)


def test_parse_keeps_justifications():
    s = parse_judgement("Relevance: 4 - on target\n**Diversity**: 2/5 (samey)\nnovelty = 3: meh")
    assert s.as_tuple() == (4, 2, 3)
    assert s.justifications == {"relevance": "on target", "diversity": "samey", "novelty": "meh"}


def test_parse_fenced_json_with_justifications():
    text = '```json\n{"relevance": 5, "diversity": 1, "novelty": 2, "relevance_justification": "spot on"}\n```'
    s = parse_judgement(text)
    assert s.as_tuple() == (5, 1, 2)
    assert s.justifications == {"relevance": "spot on"}


@pytest.mark.parametrize(
    "text",
    [
        "relevance: 7\ndiversity: 3\nnovelty: 2",
        "relevance: 0\ndiversity: 3\nnovelty: 2",
        "relevance: 4.5\ndiversity: 3\nnovelty: 2",
        "relevance: four\ndiversity: 3\nnovelty: 2",
        "relevance: 4\ndiversity: 3",
        "relevance: 4\nrelevance: 5\ndiversity: 3\nnovelty: 2",
        '{"relevance": 6, "diversity": 3, "novelty": 2}',
        '{"relevance": "4", "diversity": 3, "novelty": 2}',
        '{"relevance": true, "diversity": 3, "novelty": 2}',
        '{"relevance": 4.0, "diversity": 3, "novelty": 2}',
        '{"relevance": 4, "diversity": 3}',
        "",
        "I loved it!",
    ],
)
def test_parse_rejects(text):
    with pytest.raises(JudgeParseError):
        parse_judgement(text)


@pytest.mark.parametrize("case", judge_fuzz_corpus(seed=1, size=240), ids=lambda c: c[2])
def test_parse_fuzz(case):
    text, expected, _ = case
    if expected is None:
        with pytest.raises(JudgeParseError):
            parse_judgement(text)
    else:
        assert parse_judgement(text).as_tuple() == expected


@given(st.integers(), st.integers(), st.integers())
def test_parsed_scores_always_in_range(r, d, n):
    text = f"relevance: {r}\ndiversity: {d}\nnovelty: {n}"
    try:
        s = parse_judgement(text)
    except JudgeParseError:
        assert not all(1 <= v <= 5 for v in (r, d, n))
    else:
        assert s.as_tuple() == (r, d, n)


def test_metric_scores_validation():
    with pytest.raises(ValueError):
        MetricScores(6, 1, 1)
    with pytest.raises(ValueError):
        MetricScores(True, 1, 1)


# -- judge_list ----------------------------------------------------------------


def test_judge_prompt_and_temperature():
    persona = demo_personas(1)[0]
    backend = Recorder(["relevance: 5\ndiversity: 3\nnovelty: 2"])
    scores = judge_list(persona, recs(), backend, seed=3)
    assert scores.as_tuple() == (5, 3, 2)
    [request] = backend.requests
    assert request.temperature == 0.0
    prompt = request.messages[-1].content
    for definition in METRIC_DEFINITIONS.values():
        assert definition in prompt
    assert "Interaction context: SessionA" in prompt
    assert "Aquaphor Healing Ointment" in prompt


def test_judge_retries_then_fails():
    persona = demo_personas(1)[0]
    backend = Recorder(["relevance: 7", "relevance: 7"])
    with pytest.raises(JudgeError, match="after re-prompt"):
        judge_list(persona, recs(), backend)
    assert len(backend.requests) == 2
    assert backend.requests[1].messages[-2].content == "relevance: 7"


def test_judge_recovers_after_correction():
    persona = demo_personas(1)[0]
    backend = ScriptedBackend(["great list!", '{"relevance": 3, "diversity": 3, "novelty": 3}'])
    assert judge_list(persona, recs(), backend).as_tuple() == (3, 3, 3)


def test_judge_refuses_empty_list():
    with pytest.raises(ValueError):
        judge_list(demo_personas(1)[0], recs(n=0), ScriptedBackend(["x"]))


# -- trials --------------------------------------------------------------------


def test_reference_pattern_has_360_trials():
    trials = reference_pattern_trials()
    assert len(trials) == 360
    assert all(t.ok for t in trials)


def test_zero_personas():
    assert run_trials([], {}, ScriptedBackend([])) == []


def test_four_personas_twelve_trials():
    personas = demo_personas(4)
    results = {p.persona_id: {s: recs(s) for s in SCENARIOS} for p in personas}
    script = [
        "relevance: 5\ndiversity: 3\nnovelty: 3",
        "relevance: 4\ndiversity: 4\nnovelty: 3",
        "relevance: 5\ndiversity: 3\nnovelty: 2",
    ]
    by_scenario = dict(zip(SCENARIOS, script))

    def judge():
        return ScriptedBackend(lambda r: by_scenario[r.messages[-1].content.split("Interaction context: ")[1].split()[0]])

    a = run_trials(personas, results, judge(), parallelism=4, judged_at="T")
    b = run_trials(personas, results, judge(), parallelism=1, judged_at="T")
    assert dump_trials(a) == dump_trials(b)
    assert [(t.persona_id, t.scenario) for t in a] == [(p.persona_id, s) for p in personas for s in SCENARIOS]
    assert [t.scores.as_tuple() for t in a] == [parse_judgement(by_scenario[s]).as_tuple() for _ in personas for s in SCENARIOS]


def test_failures_are_recorded_not_dropped():
    personas = demo_personas(2)
    results = {personas[0].persona_id: {"SessionA": recs()}}
    trials = run_trials(personas, results, ScriptedBackend(lambda r: "relevance: 9"), scenarios=["SessionA", "SessionB"])
    assert len(trials) == 4
    assert all(not t.ok and t.error for t in trials)


def test_trials_round_trip():
    trials = reference_pattern_trials(5) + [TrialRecord("x", "SessionA", None, "x.SessionA.json", "T", "boom")]
    text = dump_trials(trials)
    assert dump_trials(load_trials(text.splitlines())) == text


# -- aggregation ---------------------------------------------------------------


def test_constant_scores():
    trials = [trial(f"p{i}", s, 3, 3, 3) for i in range(4) for s in SCENARIOS]
    report = aggregate(trials)
    assert all(c.mean == 3.0 and c.stddev == 0.0 and c.count == 4 for c in report.cells.values())


def test_mean_four_and_a_half():
    trials = [trial(f"p{i}", "SessionA", r, 3, 3) for i, r in enumerate([5, 4, 5, 4])]
    cell = aggregate(trials).cells[("SessionA", "relevance")]
    assert cell.mean == 4.5
    assert cell.stddev == pytest.approx(math.sqrt(1 / 3), abs=1e-12)


@given(st.lists(st.tuples(st.sampled_from(SCENARIOS), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)), min_size=1, max_size=40))
def test_aggregate_matches_brute_force(rows):
    trials = [trial(f"p{i}", s, r, d, n) for i, (s, r, d, n) in enumerate(rows)]
    report = aggregate(trials)
    for scenario in SCENARIOS:
        mine = [row for row in rows if row[0] == scenario]
        for m, metric in enumerate(METRICS):
            if not mine:
                assert (scenario, metric) not in report.cells
                continue
            values = [row[m + 1] for row in mine]
            mean = sum(values) / len(values)
            var = sum((v - mean) ** 2 for v in values) / (len(values) - 1) if len(values) > 1 else 0.0
            cell = report.cells[(scenario, metric)]
            assert abs(cell.mean - mean) <= 1e-9
            assert abs(cell.stddev - math.sqrt(var)) <= 1e-9
            assert cell.count == len(values)
            assert 1 <= cell.mean <= 5


def test_session_zscore():
    trials = [trial("a", "SessionA", 5, 3, 1), trial("b", "SessionA", 5, 3, 1)]
    report = aggregate(trials, "session_zscore")
    pooled = [5, 3, 1, 5, 3, 1]
    mu = sum(pooled) / 6
    sd = math.sqrt(sum((v - mu) ** 2 for v in pooled) / 6)
    assert report.cells[("SessionA", "relevance")].mean == pytest.approx((5 - mu) / sd)
    assert report.cells[("SessionA", "diversity")].mean == pytest.approx(0.0)


def test_aggregate_skips_failures_and_rejects_nothing():
    ok = trial("a", "SessionA", 4, 4, 4)
    bad = TrialRecord("b", "SessionA", None, "", "T", "boom")
    report = aggregate([ok, bad])
    assert report.failed_count == 1 and report.cells[("SessionA", "novelty")].count == 1
    with pytest.raises(AggregationError):
        aggregate([bad])
    with pytest.raises(AggregationError):
        aggregate([ok], "minmax")


def test_reference_pattern_grid():
    report = aggregate(reference_pattern_trials())
    for scenario, means in REFERENCE_PATTERN.items():
        for metric, expected in zip(METRICS, means):
            assert abs(report.mean(scenario, metric) - expected) < 0.005
    assert report.mean("SessionA", "relevance") == pytest.approx(4.63, abs=0.01)


# -- report files --------------------------------------------------------------


def test_report_csv_has_nine_rows():
    report = aggregate(reference_pattern_trials(6))
    rows = list(csv.reader(io.StringIO(report_csv(report))))
    assert rows[0] == ["scenario", "metric", "mean", "stddev", "count"]
    assert len(rows) == 10


def test_plotdata_reference_rows():
    rows = list(csv.reader(io.StringIO(plotdata_csv(aggregate(reference_pattern_trials())))))
    assert rows[0] == ["scenario", "relevance", "diversity", "novelty"]
    assert rows[1] == ["SessionA", "4.63", "3.33", "2.97"]
    assert rows[2] == ["SessionB", "4.45", "3.42", "3.05"]
    assert rows[3][0] == "CrossTaskB" and rows[3][1] == "4.75" and rows[3][3] == "2.95"


def test_emit_twice_identical(tmp_path):
    report = aggregate(reference_pattern_trials(10), metadata={"generated_at": "T", "seed": 1})
    first = {p.name: p.read_bytes() for p in emit_report(report, tmp_path / "a")}
    second = {p.name: p.read_bytes() for p in emit_report(report, tmp_path / "b")}
    assert first == second
    assert set(first) == {"report.json", "report.csv", "plotdata.csv"}
    assert json.loads(first["report.json"])["metadata"] == {"generated_at": "T", "seed": 1}
