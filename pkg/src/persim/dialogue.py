"""Reference interview between the shopping assistant and a simulated user."""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

from .llm_backend import (
    SIMULATION_TEMPERATURE,
    Backend,
    BackendError,
    ChatMessage,
    CompletionRequest,
)
from .persona import Persona
from .seeds import derive_seed

TASK_LABELS = ("SessionA", "SessionB", "CrossTaskB")

# Counted turns exclude the opening user query: 4 agent questions + 4 answers.
DEFAULT_MAX_TURNS = 8
DEFAULT_N_PAIRS = 4


@dataclass(frozen=True)
class Subtask:
    name: str
    description: str


CANONICAL_SUBTASKS = (
    Subtask("Product Discovery", "identify and suggest relevant products based on user preferences"),
    Subtask("Price Comparison", "provide competitive price analysis across multiple vendors"),
    Subtask(
        "Personalized Recommendations",
        "tailor suggestions based on user history, preferences, and context",
    ),
)

DEFAULT_TASK = "to assist users in their shopping journey"
DEFAULT_DATASET = (
    "An Amazon-derived product catalogue spanning Electronics, Home and Kitchen, "
    "Grocery and Gourmet Food, Clothing, Shoes and Jewelry, and Health and Household."
)

AGENT_PROMPT_TEMPLATE = (
    "You are a highly capable shopping assistant designed to help users with their "
    "shopping needs. Your primary work task is {task} by handling {count} subtasks: "
    "{subtasks}.\n"
    "To achieve these tasks, you must conduct a structured reference interview to elicit "
    "user needs, including their preferences for these {count} sub-tasks such as preferred "
    "brands, price range, product features, shopping urgency, and other relevant factors. "
    "Your goal is to efficiently gather the user's needs, requirements, and preferences "
    "without overwhelming the user."
)

_NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")


class InterviewError(RuntimeError):
    """The interview stopped early; ``transcript`` holds every complete pair so far."""

    def __init__(self, message: str, transcript: Transcript | None = None) -> None:
        super().__init__(message)
        self.transcript = transcript


@dataclass(frozen=True)
class Utterance:
    role: str
    text: str
    turn_index: int

    def __post_init__(self) -> None:
        if self.role not in ("user", "agent"):
            raise ValueError(f"unknown utterance role {self.role!r}")
        if not self.text.strip():
            raise ValueError("utterance text must be non-empty")
        if self.turn_index < 0:
            raise ValueError("turn_index must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {"role": self.role, "text": self.text, "turn_index": self.turn_index}


@dataclass(frozen=True)
class QAPair:
    question: Utterance
    answer: Utterance

    def __post_init__(self) -> None:
        if self.question.role != "agent" or self.answer.role != "user":
            raise ValueError("a QA pair is an agent question followed by a user answer")
        if self.answer.turn_index != self.question.turn_index + 1:
            raise ValueError("answer must directly follow its question")


@dataclass(frozen=True)
class Transcript:
    session_id: str
    persona_id: str
    opening_query: Utterance
    qa_pairs: tuple[QAPair, ...] = ()
    task_label: str = "SessionA"

    def __post_init__(self) -> None:
        object.__setattr__(self, "qa_pairs", tuple(self.qa_pairs))
        if self.task_label not in TASK_LABELS:
            raise ValueError(f"unknown task label {self.task_label!r}")
        if self.opening_query.role != "user":
            raise ValueError("a transcript opens with a user utterance")
        expected = self.opening_query.turn_index + 1
        for pair in self.qa_pairs:
            if pair.question.turn_index != expected:
                raise ValueError("turn indices must increase by one")
            expected = pair.answer.turn_index + 1

    @property
    def utterances(self) -> list[Utterance]:
        out = [self.opening_query]
        for pair in self.qa_pairs:
            out.extend((pair.question, pair.answer))
        return out

    @property
    def user_texts(self) -> list[str]:
        return [u.text for u in self.utterances if u.role == "user"]

    @property
    def answers(self) -> list[str]:
        return [p.answer.text for p in self.qa_pairs]

    def render(self) -> str:
        """Plain-text dialogue, one ``User:``/``Assistant:`` line per utterance."""
        names = {"user": "User", "agent": "Assistant"}
        return "\n".join(f"{names[u.role]}: {' '.join(u.text.split())}" for u in self.utterances)

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "persona_id": self.persona_id,
            "task_label": self.task_label,
            "utterances": [u.to_dict() for u in self.utterances],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Transcript:
        utterances = [Utterance(u["role"], u["text"], u["turn_index"]) for u in data["utterances"]]
        if not utterances:
            raise ValueError("transcript has no utterances")
        rest = utterances[1:]
        if len(rest) % 2:
            raise ValueError("transcript ends with an unanswered question")
        pairs = tuple(QAPair(rest[i], rest[i + 1]) for i in range(0, len(rest), 2))
        return cls(
            session_id=data["session_id"],
            persona_id=data["persona_id"],
            opening_query=utterances[0],
            qa_pairs=pairs,
            task_label=data["task_label"],
        )

    @classmethod
    def from_json(cls, text: str) -> Transcript:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class InterviewConfig:
    n_pairs: int = DEFAULT_N_PAIRS
    simulation_temperature: float = SIMULATION_TEMPERATURE
    task_description: str = DEFAULT_TASK
    subtask_description: str = "Product Discovery"
    dataset_description: str = DEFAULT_DATASET
    subtasks: tuple[Subtask, ...] = field(default=CANONICAL_SUBTASKS)
    max_turns: int = DEFAULT_MAX_TURNS
    model_name: str = ""
    max_output_tokens: int = 1024
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_pairs < 0:
            raise ValueError("n_pairs must be >= 0")
        if not 0.0 <= self.simulation_temperature <= 2.0:
            raise ValueError("simulation_temperature must lie in [0, 2]")
        if self.max_turns < 0:
            raise ValueError("max_turns must be >= 0")


def render_agent_prompt(task_description: str, subtask_descriptions: Sequence[Subtask]) -> str:
    if not subtask_descriptions:
        raise ValueError("at least one subtask is required")
    count = len(subtask_descriptions)
    parts = [f"({n}) {s.name} — {s.description}" for n, s in enumerate(subtask_descriptions, start=1)]
    if count == 1:
        listed = parts[0]
    elif count == 2:
        listed = f"{parts[0]}; and {parts[1]}"
    else:
        listed = "; ".join(parts[:-1]) + f"; and {parts[-1]}"
    word = _NUMBER_WORDS[count] if count < len(_NUMBER_WORDS) else str(count)
    return AGENT_PROMPT_TEMPLATE.format(task=task_description, count=word, subtasks=listed)


def agent_system_prompt(config: InterviewConfig) -> str:
    base = render_agent_prompt(config.task_description, config.subtasks)
    return (
        f"{base}\n\nCurrent sub-task: {config.subtask_description}\n"
        f"Dataset: {config.dataset_description}\n"
        "Ask one concise clarifying question per turn."
    )


def _request(
    system: str, history: Sequence[ChatMessage], config: InterviewConfig, seed: int
) -> CompletionRequest:
    return CompletionRequest(
        messages=(ChatMessage("system", system), *history),
        temperature=config.simulation_temperature,
        max_output_tokens=config.max_output_tokens,
        seed=seed,
        model_name=config.model_name,
    )


def _view(utterances: Sequence[Utterance], speaker: str) -> list[ChatMessage]:
    """Chat history as seen by ``speaker``: its own turns are the assistant role."""
    return [
        ChatMessage("assistant" if u.role == speaker else "user", u.text) for u in utterances
    ]


def _call(backend: Backend, request: CompletionRequest, what: str) -> str:
    try:
        text = backend.complete(request).text
    except BackendError as exc:
        raise InterviewError(f"{what}: {exc}") from exc
    text = text.strip()
    if not text:
        raise InterviewError(f"{what}: backend returned empty text")
    return text


def opening_request_text(task_description: str) -> str:
    return (
        "Start a new shopping conversation. In one or two sentences, tell the shopping "
        f"assistant what you are looking for.\nShopping task: {task_description}"
    )


def generate_opening_query(
    user_backend: Backend,
    persona: Persona,
    task_description: str,
    *,
    preset: str | None = None,
    config: InterviewConfig | None = None,
    stage: str = "opening",
) -> Utterance:
    """Opening user query; a preset (or ``persona.opening_query``) skips the backend."""
    preset = preset if preset is not None else persona.opening_query
    if preset is not None and preset.strip():
        return Utterance("user", preset.strip(), 0)
    config = config or InterviewConfig()
    request = _request(
        persona.system_prompt,
        [ChatMessage("user", opening_request_text(task_description))],
        config,
        derive_seed(config.seed, persona.persona_id, stage),
    )
    return Utterance("user", _call(user_backend, request, "opening query"), 0)


def conduct_interview(
    agent_backend: Backend,
    user_backend: Backend,
    persona: Persona,
    config: InterviewConfig,
    *,
    opening: Utterance | None = None,
    task_label: str = "SessionA",
    session_id: str | None = None,
) -> Transcript:
    """Run ``config.n_pairs`` question/answer rounds after the opening query.

    Each agent question sees the assistant system prompt and the full
    dialogue so far; each user answer sees the persona prompt and the same
    dialogue from the other side. A failure mid-pair discards the pending
    question and raises :class:`InterviewError` with the completed prefix.
    """
    session_id = session_id or f"{persona.persona_id}.{task_label}"
    if opening is None:
        opening = generate_opening_query(
            user_backend, persona, config.task_description, config=config,
            stage=f"{task_label}.opening",
        )
    agent_system = agent_system_prompt(config)
    agent_seed = derive_seed(config.seed, persona.persona_id, f"{task_label}.agent")
    user_seed = derive_seed(config.seed, persona.persona_id, f"{task_label}.user")

    pairs: list[QAPair] = []
    utterances = [opening]

    def partial() -> Transcript:
        return Transcript(session_id, persona.persona_id, opening, tuple(pairs), task_label)

    for i in range(config.n_pairs):
        if 2 * (i + 1) > config.max_turns:
            raise InterviewError(
                f"turn budget of {config.max_turns} exhausted before pair {i + 1}", partial()
            )
        turn = utterances[-1].turn_index + 1
        try:
            question = _call(
                agent_backend,
                _request(agent_system, _view(utterances, "agent"), config, agent_seed),
                f"agent question {i + 1}",
            )
            asked = Utterance("agent", question, turn)
            answer = _call(
                user_backend,
                _request(persona.system_prompt, _view([*utterances, asked], "user"), config, user_seed),
                f"user answer {i + 1}",
            )
        except InterviewError as exc:
            raise InterviewError(str(exc), partial()) from exc
        replied = Utterance("user", answer, turn + 1)
        pairs.append(QAPair(asked, replied))
        utterances.extend((asked, replied))
    return partial()
