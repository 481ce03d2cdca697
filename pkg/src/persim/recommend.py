"""Query formulation, candidate retrieval, LLM re-ranking and scenario runs."""

from __future__ import annotations

import json
import re
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from typing import Any

from .corpus import CorpusIndex, ProductItem, ScoredItem
from .dialogue import (
    InterviewConfig,
    InterviewError,
    Transcript,
    Utterance,
    conduct_interview,
    generate_opening_query,
)
from .llm_backend import Backend, BackendError, ChatMessage, CompletionRequest
from .persona import Persona, profile_digest
from .seeds import derive_seed

SCENARIOS = ("SessionA", "SessionB", "CrossTaskB")
MAX_QUERY_WORDS = 5
TOP_K = 3

QUERY_PROMPT_TEMPLATE = (
    "You are a shopping assistant tasked with ranking products for a specific user. "
    "Based on the following structured profile and reference interview, generate a "
    "concise search phrase (under 5 words) that captures the user's needs.\n"
    "User Profile:\n{user_profile}\n"
    "Reference Interview:\n{reference_interview}\n"
    "{prior_context}"
    "Output: One short phrase that reflects the user's intent."
)

RERANK_PROMPT_TEMPLATE = (
    "You are a helpful agent that has retrieved a set of candidate products for a specific "
    "user. Based on the user's profile and interview, re-rank the items below by considering "
    "both preference alignment and diversity. Provide a ranked list of the top {n} products "
    "along with a one-line justification for each.\n"
    "User Profile:\n{user_profile}\n"
    "Reference Interview:\n{reference_interview}\n"
    "{prior_context}"
    "Retrieved Items:\n{retrieved_items}\n"
    "Output: Top {n} ranked items with justifications, one per line, formatted exactly as\n"
    "1. <item_id> — <one-line justification>"
)

RERANK_CORRECTION = (
    "Your answer could not be parsed. Reply with only the numbered list, one item per line, "
    "formatted exactly as\n1. <item_id> — <one-line justification>\n"
    "using item_id values from the Retrieved Items list."
)

FOLLOWUP_TASK = (
    "You are returning for a follow-up visit. Last time you were shopping for: {previous}. "
    "Now ask for a related follow-up or complementary product."
)
CROSS_TASK = (
    "Still in the same visit, ask for help with a different but related product need."
)


class PipelineError(RuntimeError):
    """A scenario stage failed; ``stage`` names it and ``transcript`` is any partial dialogue."""

    def __init__(self, stage: str, cause: BaseException, transcript: Transcript | None = None) -> None:
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
        self.transcript = transcript


class RankingError(RuntimeError):
    def __init__(self, message: str, raw: str) -> None:
        super().__init__(f"{message}; raw response: {raw[:300]!r}")
        self.raw = raw


class QueryError(RuntimeError):
    pass


@dataclass(frozen=True)
class QueryPhrase:
    text: str
    word_count: int
    truncated: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text, "word_count": self.word_count, "truncated": self.truncated}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> QueryPhrase:
        return cls(data["text"], data["word_count"], data["truncated"])


@dataclass(frozen=True)
class RankedItem:
    item: ProductItem
    rank: int
    justification: str

    def __post_init__(self) -> None:
        if not self.justification.strip():
            raise ValueError("justification must be non-empty")
        if self.rank < 1:
            raise ValueError("ranks start at 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "item_id": self.item.item_id,
            "rank": self.rank,
            "justification": self.justification,
            "item": self.item.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RankedItem:
        return cls(ProductItem.from_dict(data["item"]), data["rank"], data["justification"])


@dataclass(frozen=True)
class RecommendationList:
    scenario: str
    items: tuple[RankedItem, ...]
    query: QueryPhrase
    candidate_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "candidate_ids", tuple(self.candidate_ids))
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        ids = self.item_ids
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate item in recommendation list")
        if not set(ids) <= set(self.candidate_ids):
            raise ValueError("recommended item missing from candidate pool")
        if [i.rank for i in self.items] != list(range(1, len(self.items) + 1)):
            raise ValueError("ranks must be contiguous from 1")

    @property
    def item_ids(self) -> list[str]:
        return [i.item.item_id for i in self.items]


@dataclass(frozen=True)
class SessionResult:
    transcript: Transcript
    recommendations: RecommendationList
    relevant_labels: tuple[str, ...]
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "relevant_labels", tuple(self.relevant_labels))
        if not set(self.relevant_labels) <= set(self.recommendations.item_ids):
            raise ValueError("relevant labels must be recommended items")

    @property
    def persona_id(self) -> str:
        return self.transcript.persona_id

    @property
    def scenario(self) -> str:
        return self.recommendations.scenario

    @property
    def file_name(self) -> str:
        return f"{self.persona_id}.{self.scenario}.json"

    def to_dict(self) -> dict[str, Any]:
        recs = self.recommendations
        return {
            "persona_id": self.persona_id,
            "scenario": recs.scenario,
            "transcript": self.transcript.to_dict(),
            "query": recs.query.to_dict(),
            "candidate_ids": list(recs.candidate_ids),
            "items": [i.to_dict() for i in recs.items],
            "relevant_labels": list(self.relevant_labels),
            "provenance": dict(self.provenance),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SessionResult:
        recs = RecommendationList(
            scenario=data["scenario"],
            items=tuple(RankedItem.from_dict(i) for i in data["items"]),
            query=QueryPhrase.from_dict(data["query"]),
            candidate_ids=tuple(data["candidate_ids"]),
        )
        return cls(
            transcript=Transcript.from_dict(data["transcript"]),
            recommendations=recs,
            relevant_labels=tuple(data["relevant_labels"]),
            provenance=dict(data.get("provenance", {})),
        )

    @classmethod
    def loads(cls, text: str) -> SessionResult:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Backends:
    agent: Backend
    user: Backend
    judge: Backend | None = None

    @classmethod
    def single(cls, backend: Backend) -> Backends:
        return cls(agent=backend, user=backend, judge=backend)


@dataclass(frozen=True)
class PipelineConfig:
    interview: InterviewConfig = field(default_factory=InterviewConfig)
    k_per_query: int = 10
    pool_size: int = 20
    session_b_pairs: int | None = None

    def __post_init__(self) -> None:
        if self.k_per_query < 1 or self.pool_size < 1:
            raise ValueError("k_per_query and pool_size must be positive")


@dataclass(frozen=True)
class PriorContext:
    """Earlier-task material appended to Session B and cross-task prompts."""

    heading: str
    transcript: Transcript
    labels: tuple[ProductItem, ...]

    def render(self) -> str:
        lines = [f"{self.heading}:", "Earlier Reference Interview:", self.transcript.render()]
        lines.append("Relevant Items From Earlier Task:")
        lines.extend(f"- {i.item_id}: {i.title}" for i in self.labels)
        return "\n".join(lines) + "\n"


# -- query ------------------------------------------------------------------

_QUOTES = "\"'`“”‘’*"
_TRAILING = ".,;:!?"
_LABEL = re.compile(r"^(?:output|search phrase|query)\s*:\s*", re.IGNORECASE)


def normalize_query(raw: str) -> QueryPhrase:
    """First non-empty line, label and quotes stripped, hard-capped at five words."""
    line = next((ln.strip() for ln in raw.splitlines() if ln.strip()), "")
    line = _LABEL.sub("", line)
    line = line.strip().strip(_QUOTES).strip().rstrip(_TRAILING).strip().strip(_QUOTES).strip()
    words = line.split()
    truncated = len(words) > MAX_QUERY_WORDS
    words = words[:MAX_QUERY_WORDS]
    if truncated:
        words = " ".join(words).rstrip(_TRAILING).split()
    return QueryPhrase(" ".join(words), len(words), truncated)


def _single_turn(
    backend: Backend,
    prompt: str,
    config: InterviewConfig,
    seed: int,
    history: Sequence[ChatMessage] = (),
) -> str:
    request = CompletionRequest(
        messages=tuple(history) or (ChatMessage("user", prompt),),
        temperature=config.simulation_temperature,
        max_output_tokens=config.max_output_tokens,
        seed=seed,
        model_name=config.model_name,
    )
    return backend.complete(request).text


def render_query_prompt(
    persona: Persona, transcript: Transcript, prior: PriorContext | None = None
) -> str:
    return QUERY_PROMPT_TEMPLATE.format(
        user_profile=profile_digest(persona.profile),
        reference_interview=transcript.render(),
        prior_context=prior.render() if prior else "",
    )


def formulate_query(
    persona: Persona,
    transcript: Transcript,
    backend: Backend,
    *,
    prior: PriorContext | None = None,
    config: InterviewConfig | None = None,
) -> QueryPhrase:
    config = config or InterviewConfig()
    prompt = render_query_prompt(persona, transcript, prior)
    seed = derive_seed(config.seed, persona.persona_id, f"{transcript.task_label}.query")
    raw = _single_turn(backend, prompt, config, seed)
    phrase = normalize_query(raw)
    if not phrase.text:
        raise QueryError(f"query formulation produced no words: {raw!r}")
    return phrase


# -- retrieval --------------------------------------------------------------


def retrieve_pool(
    keys: Iterable[str], index: CorpusIndex, k_per_query: int, pool_size: int
) -> list[ScoredItem]:
    """One search per key, merged by max score, ordered by (score desc, item_id)."""
    best: dict[str, ScoredItem] = {}
    for key in keys:
        for hit in index.search(key, k_per_query):
            seen = best.get(hit.item.item_id)
            if seen is None or hit.score > seen.score:
                best[hit.item.item_id] = hit
    merged = sorted(best.values(), key=lambda s: (-s.score, s.item.item_id))
    return merged[:pool_size]


def retrieval_keys(transcript: Transcript, query: QueryPhrase | None = None) -> list[str]:
    """The formulated phrase plus every user utterance; agent questions carry no preferences."""
    keys = [query.text] if query is not None else []
    keys.extend(transcript.user_texts)
    return keys


def batch_retrieve(
    transcript: Transcript,
    index: CorpusIndex,
    k_per_query: int = 10,
    *,
    query: QueryPhrase | None = None,
    pool_size: int = 20,
) -> list[ScoredItem]:
    return retrieve_pool(retrieval_keys(transcript, query), index, k_per_query, pool_size)


# -- ranking ----------------------------------------------------------------


def _money(price: float | None) -> str:
    return "N/A" if price is None else f"${price:.2f}"


def candidate_digest(candidates: Sequence[ProductItem], feature_chars: int = 160) -> str:
    lines = []
    for n, item in enumerate(candidates, start=1):
        features = "; ".join(item.features)
        if len(features) > feature_chars:
            features = features[: feature_chars - 3].rstrip() + "..."
        lines.append(
            f"[{n}] {item.item_id} | {item.title} | brand: {item.brand or 'unknown'} | "
            f"price: {_money(item.price)} | features: {features or 'none listed'}"
        )
    return "\n".join(lines)


def render_rank_prompt(
    candidates: Sequence[ProductItem],
    persona: Persona,
    transcript: Transcript,
    prior: PriorContext | None = None,
) -> str:
    return RERANK_PROMPT_TEMPLATE.format(
        n=min(TOP_K, len(candidates)),
        user_profile=profile_digest(persona.profile),
        reference_interview=transcript.render(),
        prior_context=prior.render() if prior else "",
        retrieved_items=candidate_digest(candidates),
    )


_RANK_LINE = re.compile(
    r"^\s*(?:[*_#>]+\s*)?\(?(?P<num>\d+)[.):]?\)?\s+[*_]*\[?(?P<id>[^\s\]*]+?)\]?[*_]*"
    r"\s*(?:—|–|--|-|:|\|)\s+(?P<just>\S.*?)\s*$"
)


def parse_ranking(text: str) -> list[tuple[str, str]]:
    """Extract ``(item_id, justification)`` from numbered lines, in listed order."""
    entries = []
    for line in text.splitlines():
        m = _RANK_LINE.match(line)
        if m:
            entries.append((m.group("id").strip(".,;:"), " ".join(m.group("just").split())))
    return entries


def batch_rank(
    candidates: Sequence[ProductItem],
    persona: Persona,
    transcript: Transcript,
    backend: Backend,
    *,
    prior: PriorContext | None = None,
    config: InterviewConfig | None = None,
) -> list[RankedItem]:
    """Ask the backend for a top-3 re-ranking of ``candidates``.

    Unparseable output earns one corrective re-prompt. Entries naming an
    item outside the candidate list are dropped.
    """
    if not candidates:
        raise ValueError("batch_rank needs at least one candidate")
    config = config or InterviewConfig()
    by_id = {c.item_id: c for c in candidates}
    prompt = render_rank_prompt(candidates, persona, transcript, prior)
    seed = derive_seed(config.seed, persona.persona_id, f"{transcript.task_label}.rank")

    history = [ChatMessage("user", prompt)]
    raw = _single_turn(backend, prompt, config, seed)
    entries = parse_ranking(raw)
    if not entries:
        history += [ChatMessage("assistant", raw or "(empty)"), ChatMessage("user", RERANK_CORRECTION)]
        raw = _single_turn(backend, prompt, config, seed, history=history)
        entries = parse_ranking(raw)
        if not entries:
            raise RankingError("ranking response unparseable after re-prompt", raw)

    ranked: list[RankedItem] = []
    for item_id, why in entries:
        item = by_id.get(item_id)
        if item is None or not why:
            continue
        ranked.append(RankedItem(item, len(ranked) + 1, why))
    if not ranked:
        raise RankingError("no ranked entry names a retrieved candidate", raw)
    return ranked


def aggregate_and_finalize(ranked: Sequence[RankedItem], top_k: int = TOP_K) -> list[RankedItem]:
    out: list[RankedItem] = []
    seen: set[str] = set()
    for entry in ranked:
        if entry.item.item_id in seen:
            continue
        seen.add(entry.item.item_id)
        out.append(replace(entry, rank=len(out) + 1))
        if len(out) == top_k:
            break
    return out


# -- scenarios --------------------------------------------------------------


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except InterviewError as exc:
        raise PipelineError(name, exc, exc.transcript) from exc
    except (BackendError, RankingError, QueryError, ValueError) as exc:
        raise PipelineError(name, exc) from exc


def _finish(
    scenario: str,
    persona: Persona,
    transcript: Transcript,
    backend: Backend,
    query: QueryPhrase,
    pool: Sequence[ScoredItem],
    carried: Sequence[ProductItem],
    prior: PriorContext | None,
    config: PipelineConfig,
    provenance: dict[str, Any],
) -> SessionResult:
    candidates = [s.item for s in pool]
    pool_ids = {c.item_id for c in candidates}
    extra = [c for c in carried if c.item_id not in pool_ids]
    candidates.extend(extra)
    provenance = {
        **provenance,
        "pool_size": len(pool),
        "carried_items": [c.item_id for c in extra],
    }
    items: list[RankedItem] = []
    if candidates:
        ranked = _stage(
            "rank", batch_rank, candidates, persona, transcript, backend,
            prior=prior, config=config.interview,
        )
        items = _stage("finalize", aggregate_and_finalize, ranked)
    recs = RecommendationList(scenario, tuple(items), query, tuple(c.item_id for c in candidates))
    return SessionResult(transcript, recs, tuple(recs.item_ids), provenance)


def run_session_a(
    persona: Persona, index: CorpusIndex, backends: Backends, config: PipelineConfig
) -> SessionResult:
    """Interview, formulate, retrieve, rank, finalize, in that order."""
    icfg = config.interview
    transcript = _stage(
        "interview", conduct_interview, backends.agent, backends.user, persona, icfg,
        task_label="SessionA",
    )
    query = _stage("formulate", formulate_query, persona, transcript, backends.agent, config=icfg)
    pool = _stage(
        "retrieve", batch_retrieve, transcript, index, config.k_per_query,
        query=query, pool_size=config.pool_size,
    )
    return _finish(
        "SessionA", persona, transcript, backends.agent, query, pool, (), None, config,
        {"prior_context": False, "prior_labels": []},
    )


def _prior(heading: str, earlier: SessionResult, index: CorpusIndex) -> PriorContext | None:
    labels = tuple(i for i in (index.get(x) for x in earlier.relevant_labels) if i is not None)
    if not labels:
        return None
    return PriorContext(heading, earlier.transcript, labels)


def run_session_b(
    persona: Persona,
    session_a: SessionResult,
    index: CorpusIndex,
    backends: Backends,
    config: PipelineConfig,
) -> SessionResult:
    """Follow-up visit: fresh interview, with Session A's dialogue and labels in the prompts.

    Session A's labelled items join the candidate pool so the ranker can
    carry them forward.
    """
    icfg = config.interview
    if config.session_b_pairs is not None:
        icfg = replace(icfg, n_pairs=config.session_b_pairs)
    prior = _prior("Prior Session Context (Session A)", session_a, index)
    task = FOLLOWUP_TASK.format(previous=" ".join(session_a.transcript.opening_query.text.split()))
    opening = _stage(
        "interview", generate_opening_query, backends.user, persona, task,
        preset=persona.followup_query, config=icfg, stage="SessionB.opening",
    )
    transcript = _stage(
        "interview", conduct_interview, backends.agent, backends.user, persona, icfg,
        opening=opening, task_label="SessionB",
    )
    query = _stage(
        "formulate", formulate_query, persona, transcript, backends.agent, prior=prior, config=icfg
    )
    pool = _stage(
        "retrieve", batch_retrieve, transcript, index, config.k_per_query,
        query=query, pool_size=config.pool_size,
    )
    return _finish(
        "SessionB", persona, transcript, backends.agent, query, pool,
        prior.labels if prior else (), prior, config,
        {"prior_context": prior is not None, "prior_labels": list(session_a.relevant_labels)},
    )


def run_cross_task(
    persona: Persona,
    task_a: SessionResult,
    index: CorpusIndex,
    backends: Backends,
    config: PipelineConfig,
) -> SessionResult:
    """New sub-task in the same session, served from task A's elicitation alone.

    The only user input is one new request; no interview turns are run.
    With no task-A labels the run degrades to cold retrieval on that request.
    """
    icfg = config.interview
    prior = _prior("Earlier Sub-task Context (Task A)", task_a, index)
    opening: Utterance = _stage(
        "interview", generate_opening_query, backends.user, persona, CROSS_TASK,
        preset=persona.cross_task_query, config=icfg, stage="CrossTaskB.opening",
    )
    transcript = Transcript(
        f"{persona.persona_id}.CrossTaskB", persona.persona_id, opening, (), "CrossTaskB"
    )
    query = _stage(
        "formulate", formulate_query, persona, transcript, backends.agent, prior=prior, config=icfg
    )
    keys = retrieval_keys(transcript, query)
    if prior is not None:
        keys.extend(task_a.transcript.user_texts)
    pool = _stage("retrieve", retrieve_pool, keys, index, config.k_per_query, config.pool_size)
    return _finish(
        "CrossTaskB", persona, transcript, backends.agent, query, pool,
        prior.labels if prior else (), prior, config,
        {"prior_context": prior is not None, "prior_labels": list(task_a.relevant_labels)},
    )


def run_persona(
    persona: Persona,
    index: CorpusIndex,
    backends: Backends,
    config: PipelineConfig,
    scenarios: Sequence[str] = SCENARIOS,
    existing: Mapping[str, SessionResult] | None = None,
    on_result: Callable[[SessionResult], None] | None = None,
) -> dict[str, SessionResult]:
    """Run the requested scenarios in dependency order, reusing ``existing`` results.

    Session B needs Session A, and the cross-task run builds on Session B.
    ``on_result`` sees each newly computed result before the next stage starts.
    """
    results = dict(existing or {})
    wanted = set(scenarios)
    steps = (
        ("SessionA", bool(wanted), lambda: run_session_a(persona, index, backends, config)),
        ("SessionB", bool(wanted & {"SessionB", "CrossTaskB"}),
         lambda: run_session_b(persona, results["SessionA"], index, backends, config)),
        ("CrossTaskB", "CrossTaskB" in wanted,
         lambda: run_cross_task(persona, results["SessionB"], index, backends, config)),
    )
    for name, needed, run in steps:
        if needed and name not in results:
            results[name] = run()
            if on_result is not None:
                on_result(results[name])
    return results
