"""LLM-judged relevance/diversity/novelty scoring and report emission."""

from __future__ import annotations

import csv
import io
import json
import math
import re
import statistics
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .llm_backend import (
    JUDGE_TEMPERATURE,
    Backend,
    BackendError,
    ChatMessage,
    CompletionRequest,
)
from .persona import Persona, profile_digest
from .recommend import SCENARIOS, RecommendationList
from .seeds import derive_seed

METRICS = ("relevance", "diversity", "novelty")
NORMALIZATIONS = ("raw", "session_zscore")

METRIC_DEFINITIONS = {
    "relevance": "How well the items align with the user's stated preferences.",
    "diversity": "Topical or functional variety among the top-k items.",
    "novelty": "The degree to which items are unexpected or go beyond prior known preferences.",
}

SCENARIO_DESCRIPTIONS = {
    "SessionA": "Session A (initial interaction)",
    "SessionB": "Session B (follow-up session)",
    "CrossTaskB": "Cross-task B (goal-shifted sub-task within the same session)",
}

JUDGE_SYSTEM = (
    "You are simulating the shopper described below and judging the product recommendations "
    "a shopping assistant gave you. Be consistent and rate only what is shown."
)

JUDGE_TEMPLATE = (
    "User Profile:\n{profile}\n\n"
    "Interaction context: {scenario} - {scenario_description}\n"
    "Search phrase used: {query}\n\n"
    "Recommendations:\n{items}\n\n"
    "Rate the recommendation list on each metric using a 5-point Likert scale "
    "(1 = low, 5 = high):\n{definitions}\n\n"
    "Reply with exactly three lines, each an integer score and a short justification:\n"
    "relevance: <1-5> - <justification>\n"
    "diversity: <1-5> - <justification>\n"
    "novelty: <1-5> - <justification>"
)

JUDGE_CORRECTION = (
    "That reply could not be used. Every metric needs a whole-number score from 1 to 5. "
    "Reply with exactly three lines:\n"
    "relevance: <1-5> - <justification>\n"
    "diversity: <1-5> - <justification>\n"
    "novelty: <1-5> - <justification>"
)


class JudgeParseError(ValueError):
    pass


class JudgeError(RuntimeError):
    def __init__(self, message: str, raw: str) -> None:
        super().__init__(f"{message}; raw response: {raw[:300]!r}")
        self.raw = raw


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class MetricScores:
    relevance: int
    diversity: int
    novelty: int
    justifications: Mapping[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        for metric in METRICS:
            value = getattr(self, metric)
            if isinstance(value, bool) or not isinstance(value, int) or not 1 <= value <= 5:
                raise ValueError(f"{metric} score {value!r} is not an integer in [1, 5]")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.relevance, self.diversity, self.novelty)

    def to_dict(self) -> dict[str, Any]:
        return {m: getattr(self, m) for m in METRICS}


# -- parsing ----------------------------------------------------------------

_LABELED = re.compile(
    r"^[\s*_#>\-•]*(?P<metric>relevance|diversity|novelty)[*_]*\s*(?:score)?\s*[:=]\s*[*_]*"
    r"(?P<value>[^\s/,;:*_()|—–]+)[*_]*(?:\s*/\s*5\b)?(?!\s*/)(?:\s*(?:[-–—:|,;(]\s*)?(?P<rest>.*))?$",
    re.IGNORECASE,
)
_SCORE = re.compile(r"^[1-5]$")
_FENCE = re.compile(r"^```[a-zA-Z]*\s*$", re.MULTILINE)


def _parse_json(text: str) -> MetricScores | None:
    body = _FENCE.sub("", text).strip()
    start, end = body.find("{"), body.rfind("}")
    if start < 0 or end <= start:
        return None
    try:
        data = json.loads(body[start : end + 1])
    except json.JSONDecodeError:
        return None
    if not isinstance(data, dict) or not any(m in data for m in METRICS):
        return None
    scores = {}
    for metric in METRICS:
        if metric not in data:
            raise JudgeParseError(f"JSON reply lacks {metric!r}")
        value = data[metric]
        if isinstance(value, bool) or not isinstance(value, int) or not 1 <= value <= 5:
            raise JudgeParseError(f"{metric} value {value!r} is not an integer 1-5")
        scores[metric] = value
    nested = data.get("justifications")
    justifications = {}
    for metric in METRICS:
        why = data.get(f"{metric}_justification")
        if why is None and isinstance(nested, dict):
            why = nested.get(metric)
        if isinstance(why, str) and why.strip():
            justifications[metric] = why.strip()
    return MetricScores(**scores, justifications=justifications)


def parse_judgement(text: str) -> MetricScores:
    """Read scores from labelled lines (``relevance: 4 - ...``) or a flat JSON object.

    Scores must be whole numbers 1-5; fractions, words, and repeated or
    missing metrics are rejected rather than repaired.
    """
    parsed = _parse_json(text)
    if parsed is not None:
        return parsed
    found: dict[str, int] = {}
    justifications: dict[str, str] = {}
    for line in text.splitlines():
        m = _LABELED.match(line)
        if not m:
            continue
        metric = m.group("metric").lower()
        if metric in found:
            raise JudgeParseError(f"{metric} given more than once")
        value = m.group("value")
        if not _SCORE.match(value):
            raise JudgeParseError(f"{metric} value {value!r} is not an integer 1-5")
        found[metric] = int(value)
        rest = (m.group("rest") or "").strip().rstrip(")").strip()
        if rest:
            justifications[metric] = rest
    missing = [m for m in METRICS if m not in found]
    if missing:
        raise JudgeParseError(f"missing metric(s): {', '.join(missing)}")
    return MetricScores(**found, justifications=justifications)


# -- judging ----------------------------------------------------------------


def recommendation_digest(recommendations: RecommendationList) -> str:
    lines = []
    for entry in recommendations.items:
        item = entry.item
        price = "N/A" if item.price is None else f"${item.price:.2f}"
        lines.append(
            f"{entry.rank}. {item.title} ({item.brand or 'unknown brand'}, {item.domain}, "
            f"{price}) - {entry.justification}"
        )
    return "\n".join(lines)


def render_judge_prompt(persona: Persona, recommendations: RecommendationList) -> str:
    return JUDGE_TEMPLATE.format(
        profile=profile_digest(persona.profile),
        scenario=recommendations.scenario,
        scenario_description=SCENARIO_DESCRIPTIONS[recommendations.scenario],
        query=recommendations.query.text,
        items=recommendation_digest(recommendations),
        definitions="\n".join(
            f"- {m.capitalize()}: {METRIC_DEFINITIONS[m]}" for m in METRICS
        ),
    )


def judge_list(
    persona: Persona,
    recommendations: RecommendationList,
    judge_backend: Backend,
    *,
    seed: int = 0,
    model_name: str = "",
    temperature: float = JUDGE_TEMPERATURE,
) -> MetricScores:
    if not recommendations.items:
        raise ValueError("cannot judge an empty recommendation list")
    messages = [
        ChatMessage("system", JUDGE_SYSTEM),
        ChatMessage("user", render_judge_prompt(persona, recommendations)),
    ]
    request_seed = derive_seed(seed, persona.persona_id, f"{recommendations.scenario}.judge")

    def ask(msgs: list[ChatMessage]) -> str:
        request = CompletionRequest(
            messages=tuple(msgs), temperature=temperature, seed=request_seed, model_name=model_name
        )
        return judge_backend.complete(request).text

    raw = ask(messages)
    try:
        return parse_judgement(raw)
    except JudgeParseError:
        pass
    messages += [ChatMessage("assistant", raw or "(empty)"), ChatMessage("user", JUDGE_CORRECTION)]
    raw = ask(messages)
    try:
        return parse_judgement(raw)
    except JudgeParseError as exc:
        raise JudgeError(f"judge reply unusable after re-prompt ({exc})", raw) from exc


# -- trials -----------------------------------------------------------------


@dataclass(frozen=True)
class TrialRecord:
    persona_id: str
    scenario: str
    scores: MetricScores | None
    recommendation_ref: str
    judged_at: str
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.scores is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "persona_id": self.persona_id,
            "scenario": self.scenario,
            "status": "ok" if self.ok else "failed",
            "scores": self.scores.to_dict() if self.scores else None,
            "justifications": dict(self.scores.justifications) if self.scores else {},
            "recommendation_ref": self.recommendation_ref,
            "judged_at": self.judged_at,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TrialRecord:
        scores = None
        if data.get("scores") is not None:
            scores = MetricScores(**data["scores"], justifications=data.get("justifications") or {})
        return cls(
            persona_id=data["persona_id"],
            scenario=data["scenario"],
            scores=scores,
            recommendation_ref=data.get("recommendation_ref", ""),
            judged_at=data.get("judged_at", ""),
            error=data.get("error"),
        )


def dump_trials(trials: Iterable[TrialRecord]) -> str:
    return "".join(json.dumps(t.to_dict(), ensure_ascii=False, sort_keys=True) + "\n" for t in trials)


def load_trials(lines: Iterable[str]) -> list[TrialRecord]:
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            out.append(TrialRecord.from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"trials line {lineno}: {exc}") from exc
    return out


def run_trials(
    personas: Sequence[Persona],
    scenario_results: Mapping[str, Mapping[str, RecommendationList]],
    judge_backend: Backend,
    parallelism: int = 1,
    *,
    scenarios: Sequence[str] = SCENARIOS,
    judged_at: str = "",
    seed: int = 0,
    model_name: str = "",
) -> list[TrialRecord]:
    """Judge every (persona, scenario) pair; failures become failed records.

    Records come back in persona-then-scenario order whatever the
    parallelism.
    """
    jobs = [(p, s) for p in personas for s in scenarios]

    def one(job: tuple[Persona, str]) -> TrialRecord:
        persona, scenario = job
        ref = f"{persona.persona_id}.{scenario}.json"
        recs = scenario_results.get(persona.persona_id, {}).get(scenario)
        try:
            if recs is None:
                raise LookupError(f"no {scenario} result for {persona.persona_id}")
            scores = judge_list(persona, recs, judge_backend, seed=seed, model_name=model_name)
        except (BackendError, JudgeError, LookupError, ValueError) as exc:
            return TrialRecord(persona.persona_id, scenario, None, ref, judged_at, str(exc))
        return TrialRecord(persona.persona_id, scenario, scores, ref, judged_at)

    if parallelism <= 1:
        return [one(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, jobs))


# -- aggregation ------------------------------------------------------------


@dataclass(frozen=True)
class CellStats:
    mean: float
    stddev: float
    count: int


@dataclass(frozen=True)
class AggregateReport:
    cells: Mapping[tuple[str, str], CellStats]
    normalization: str = "raw"
    failed_count: int = 0
    metadata: Mapping[str, Any] = field(default_factory=dict)

    @property
    def scenarios(self) -> list[str]:
        present = {s for s, _ in self.cells}
        return [s for s in SCENARIOS if s in present]

    def mean(self, scenario: str, metric: str) -> float:
        return self.cells[(scenario, metric)].mean

    def to_dict(self) -> dict[str, Any]:
        return {
            "normalization": self.normalization,
            "failed_count": self.failed_count,
            "metadata": dict(self.metadata),
            "cells": [
                {"scenario": s, "metric": m, "mean": c.mean, "stddev": c.stddev, "count": c.count}
                for (s, m), c in self.cells.items()
            ],
        }


def _sample_stddev(values: Sequence[float]) -> float:
    return statistics.stdev(values) if len(values) > 1 else 0.0


def aggregate(
    trials: Sequence[TrialRecord],
    normalization: str = "raw",
    metadata: Mapping[str, Any] | None = None,
) -> AggregateReport:
    """Per-(scenario, metric) mean, sample stddev and count over successful trials.

    ``session_zscore`` first standardises each score against all scores
    (every metric, every persona) in the same scenario, so the report is in
    standard units and metrics can be compared across scenarios.
    """
    if normalization not in NORMALIZATIONS:
        raise AggregationError(f"unknown normalization {normalization!r}")
    judged = [t for t in trials if t.scores is not None]
    failed = len(trials) - len(judged)
    if not judged:
        raise AggregationError(f"no successful trials to aggregate ({failed} failed)")

    values: dict[tuple[str, str], list[float]] = {}
    for scenario in SCENARIOS:
        rows = [t.scores for t in judged if t.scenario == scenario]
        if not rows:
            continue
        for s in rows:
            assert all(1 <= v <= 5 for v in s.as_tuple())
        shift, scale = 0.0, 1.0
        if normalization == "session_zscore":
            pooled = [float(v) for s in rows for v in s.as_tuple()]
            shift = math.fsum(pooled) / len(pooled)
            scale = statistics.pstdev(pooled) or 1.0
        for metric in METRICS:
            values[(scenario, metric)] = [(getattr(s, metric) - shift) / scale for s in rows]

    cells = {
        key: CellStats(math.fsum(v) / len(v), _sample_stddev(v), len(v)) for key, v in values.items()
    }
    return AggregateReport(cells, normalization, failed, dict(metadata or {}))


# -- report files -----------------------------------------------------------


def _csv_text(rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def report_csv(report: AggregateReport) -> str:
    rows: list[Sequence[Any]] = [("scenario", "metric", "mean", "stddev", "count")]
    for (scenario, metric), c in report.cells.items():
        rows.append((scenario, metric, repr(c.mean), repr(c.stddev), c.count))
    return _csv_text(rows)


def plotdata_csv(report: AggregateReport) -> str:
    """One row per scenario, one column per metric, means to two decimals."""
    rows: list[Sequence[Any]] = [("scenario", *METRICS)]
    for scenario in report.scenarios:
        row = [scenario]
        for metric in METRICS:
            cell = report.cells.get((scenario, metric))
            row.append("" if cell is None else f"{cell.mean:.2f}")
        rows.append(row)
    return _csv_text(rows)


def emit_report(report: AggregateReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    files = {
        "report.json": json.dumps(report.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        "report.csv": report_csv(report),
        "plotdata.csv": plotdata_csv(report),
    }
    written = []
    for name, text in files.items():
        path = out / name
        try:
            out.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
        written.append(path)
    return written
