"""Chat-completion backends: live HTTP, scripted, and record/replay.

Every backend exposes ``complete(request) -> CompletionResult``. The live
backend speaks the OpenAI-compatible ``/chat/completions`` protocol; the
scripted and replay backends are pure functions of the request so that whole
pipeline runs can be reproduced byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import httpx

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
BACKEND_KINDS = ("live", "scripted", "replay")

SIMULATION_TEMPERATURE = 0.7
JUDGE_TEMPERATURE = 0.0
DEFAULT_MAX_OUTPUT_TOKENS = 1024
DEFAULT_TIMEOUT = 60.0

ENV_API_KEY = "PERSIM_API_KEY"
ENV_API_BASE = "PERSIM_API_BASE"
ENV_MODEL = "PERSIM_MODEL"


class BackendError(RuntimeError):
    """A completion could not be produced."""

    transient = False

    def __init__(self, message: str, *, status: int | None = None) -> None:
        super().__init__(message)
        self.status = status


class TransientBackendError(BackendError):
    """Timeouts, connection drops, HTTP 429 and 5xx."""

    transient = True


class RetryExhaustedError(BackendError):
    def __init__(self, cause: BaseException, attempts: int) -> None:
        status = getattr(cause, "status", None)
        super().__init__(f"gave up after {attempts} attempt(s): {cause}", status=status)
        self.cause = cause
        self.attempts = attempts


class ScriptExhaustedError(BackendError):
    pass


class ReplayMissError(BackendError):
    def __init__(self, fingerprint: str, request: CompletionRequest) -> None:
        last = request.messages[-1].content if request.messages else ""
        preview = last[:120].replace("\n", " ")
        super().__init__(
            f"no cassette entry for request {fingerprint[:16]}... "
            f"(model={request.model_name!r}, last message: {preview!r})"
        )
        self.fingerprint = fingerprint
        self.request = request


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown chat role {self.role!r}")
        if self.role != "system" and not self.content:
            raise ValueError(f"{self.role} message content must be non-empty")

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ChatMessage:
        return cls(role=data["role"], content=data["content"])


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = SIMULATION_TEMPERATURE
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    seed: int | None = None
    model_name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("a completion request needs at least one message")
        if any(m.role == "system" for m in self.messages[1:]):
            raise ValueError("a system message may only appear first")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    @property
    def system(self) -> str:
        first = self.messages[0]
        return first.content if first.role == "system" else ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "messages": [m.to_dict() for m in self.messages],
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "seed": self.seed,
            "model_name": self.model_name,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CompletionRequest:
        return cls(
            messages=tuple(ChatMessage.from_dict(m) for m in data["messages"]),
            temperature=data["temperature"],
            max_output_tokens=data["max_output_tokens"],
            seed=data.get("seed"),
            model_name=data.get("model_name", ""),
        )


@dataclass(frozen=True)
class CompletionResult:
    text: str
    prompt_tokens: int = 0
    output_tokens: int = 0
    backend_kind: str = "scripted"

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "prompt_tokens": self.prompt_tokens,
            "output_tokens": self.output_tokens,
            "backend_kind": self.backend_kind,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CompletionResult:
        return cls(
            text=data["text"],
            prompt_tokens=data.get("prompt_tokens", 0),
            output_tokens=data.get("output_tokens", 0),
            backend_kind=data.get("backend_kind", "scripted"),
        )


class Backend(Protocol):
    kind: str

    def complete(self, request: CompletionRequest) -> CompletionResult: ...


def _canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def fingerprint(request: CompletionRequest) -> str:
    """SHA-256 hex digest over model, temperature, seed and the ordered messages.

    ``max_output_tokens`` is deliberately excluded so that raising the output
    budget does not invalidate recorded cassettes.
    """
    payload = {
        "model": request.model_name,
        "temperature": float(request.temperature),
        "seed": request.seed,
        "messages": [[m.role, m.content] for m in request.messages],
    }
    return hashlib.sha256(_canonical_json(payload).encode("utf-8")).hexdigest()


# -- live -------------------------------------------------------------------


class RateLimiter:
    """Spaces request starts so that at most ``per_minute`` begin per minute."""

    def __init__(self, per_minute: float | None, clock=time.monotonic, sleep=time.sleep) -> None:
        self.interval = 60.0 / per_minute if per_minute else 0.0
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next = 0.0

    def acquire(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            self._sleep(start - now)


class LiveBackend:
    """OpenAI-compatible chat-completions client (POST, bearer credential)."""

    kind = "live"

    def __init__(
        self,
        api_base: str,
        api_key: str,
        model_name: str,
        *,
        timeout: float = DEFAULT_TIMEOUT,
        max_in_flight: int = 8,
        requests_per_minute: float | None = None,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        if not api_base:
            raise BackendError("live backend needs an API base URL")
        if not api_key:
            raise BackendError("live backend needs an API credential")
        self.api_base = api_base.rstrip("/")
        self.model_name = model_name
        self._client = httpx.Client(
            timeout=timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {api_key}"},
        )
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._limiter = RateLimiter(requests_per_minute)

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None, **kwargs: Any) -> LiveBackend:
        env = os.environ if env is None else env
        return cls(
            env.get(ENV_API_BASE, ""),
            env.get(ENV_API_KEY, ""),
            env.get(ENV_MODEL, ""),
            **kwargs,
        )

    def payload(self, request: CompletionRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": request.model_name or self.model_name,
            "messages": [m.to_dict() for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        return body

    def complete(self, request: CompletionRequest) -> CompletionResult:
        url = f"{self.api_base}/chat/completions"
        self._limiter.acquire()
        with self._slots:
            try:
                response = self._client.post(url, json=self.payload(request))
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                raise TransientBackendError(f"{type(exc).__name__}: {exc}") from exc
        status = response.status_code
        if status == 429 or status >= 500:
            raise TransientBackendError(f"HTTP {status}: {response.text[:200]}", status=status)
        if status >= 400:
            raise BackendError(f"HTTP {status}: {response.text[:200]}", status=status)
        try:
            data = response.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {response.text[:200]}") from exc
        usage = data.get("usage") or {}
        return CompletionResult(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens") or 0),
            output_tokens=int(usage.get("completion_tokens") or 0),
            backend_kind="live",
        )

    def close(self) -> None:
        self._client.close()


# -- scripted ---------------------------------------------------------------


@dataclass
class ScriptRule:
    """Regex-keyed canned responses.

    ``match`` is searched against the request transcript (``role: content``
    blocks joined by blank lines). The response is chosen by how many
    assistant turns the request already carries, so a rule answers turn 0,
    turn 1, ... of a conversation without any hidden counter; once the list
    runs out the last response repeats. Templates may use ``\\g<name>``
    references to the match groups.

    When ``each`` is given, the response is instead built by expanding
    ``item`` for each of the first ``limit`` matches of ``each`` (``{n}`` is
    the 1-based ordinal), joined by newlines.
    """

    match: str
    responses: list[str] = field(default_factory=list)
    each: str | None = None
    item: str = ""
    limit: int | None = None

    def __post_init__(self) -> None:
        self._pattern = re.compile(self.match, re.MULTILINE)
        self._each = re.compile(self.each, re.MULTILINE) if self.each else None
        if not self.responses and not self._each:
            raise ValueError(f"rule {self.match!r} has no responses")

    def render(self, request: CompletionRequest, text: str) -> str | None:
        found = self._pattern.search(text)
        if found is None:
            return None
        if self._each is not None:
            parts = []
            for n, sub in enumerate(self._each.finditer(text), start=1):
                if self.limit is not None and n > self.limit:
                    break
                parts.append(sub.expand(self.item.replace("{n}", str(n))))
            return "\n".join(parts)
        turn = sum(1 for m in request.messages if m.role == "assistant")
        return found.expand(self.responses[min(turn, len(self.responses) - 1)])

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"match": self.match}
        if self.responses:
            out["responses"] = list(self.responses)
        if self.each:
            out.update(each=self.each, item=self.item)
            if self.limit is not None:
                out["limit"] = self.limit
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ScriptRule:
        return cls(
            match=data["match"],
            responses=list(data.get("responses", [])),
            each=data.get("each"),
            item=data.get("item", ""),
            limit=data.get("limit"),
        )


def request_text(request: CompletionRequest) -> str:
    return "\n\n".join(f"{m.role}: {m.content}" for m in request.messages)


class ScriptedBackend:
    """Deterministic backend driven by a script.

    A script is one of:

    * a list of texts, served in order (error once exhausted);
    * a mapping ``fingerprint -> text``;
    * a list of :class:`ScriptRule` (first matching rule answers);
    * a callable ``request -> text``.

    Rule, mapping and callable scripts are pure in the request, so
    concurrent callers see the same answers regardless of interleaving.
    """

    kind = "scripted"

    def __init__(
        self,
        script: Sequence[str] | Mapping[str, str] | Sequence[ScriptRule] | Callable[[CompletionRequest], str],
    ) -> None:
        self._lock = threading.Lock()
        self._queue: list[str] | None = None
        self._by_fingerprint: Mapping[str, str] | None = None
        self._rules: list[ScriptRule] | None = None
        self._responder: Callable[[CompletionRequest], str] | None = None
        if callable(script):
            self._responder = script
        elif isinstance(script, Mapping):
            self._by_fingerprint = dict(script)
        elif script and all(isinstance(s, ScriptRule) for s in script):
            self._rules = list(script)  # type: ignore[arg-type]
        else:
            self._queue = [str(s) for s in script]
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedBackend:
        """Load a JSON or YAML script: a list of texts or ``{"rules": [...]}``."""
        import yaml

        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        if isinstance(data, Mapping) and "rules" in data:
            return cls([ScriptRule.from_dict(r) for r in data["rules"]])
        if isinstance(data, Mapping) and "fingerprints" in data:
            return cls(dict(data["fingerprints"]))
        if isinstance(data, list):
            return cls([str(x) for x in data])
        raise BackendError(f"{path}: unrecognised script layout")

    def _answer(self, request: CompletionRequest) -> str:
        if self._responder is not None:
            return self._responder(request)
        if self._by_fingerprint is not None:
            fp = fingerprint(request)
            if fp not in self._by_fingerprint:
                raise ScriptExhaustedError(f"script has no response for fingerprint {fp[:16]}...")
            return self._by_fingerprint[fp]
        if self._rules is not None:
            text = request_text(request)
            for rule in self._rules:
                answer = rule.render(request, text)
                if answer is not None:
                    return answer
            preview = request.messages[-1].content[:80].replace("\n", " ")
            raise ScriptExhaustedError(f"no script rule matches request ending {preview!r}")
        assert self._queue is not None
        if self.calls >= len(self._queue):
            raise ScriptExhaustedError(f"script exhausted after {len(self._queue)} response(s)")
        return self._queue[self.calls]

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._lock:
            text = self._answer(request)
            self.calls += 1
        return CompletionResult(text=text, backend_kind="scripted")


# -- record / replay --------------------------------------------------------


@dataclass(frozen=True)
class CassetteEntry:
    fingerprint: str
    request: CompletionRequest
    response: CompletionResult

    def to_line(self) -> str:
        return _canonical_json(
            {
                "fingerprint": self.fingerprint,
                "request": self.request.to_dict(),
                "response": self.response.to_dict(),
            }
        )


class Cassette:
    """Ordered fingerprint -> response store, serialised as JSON lines."""

    def __init__(self, entries: Iterable[CassetteEntry] = ()) -> None:
        self._entries: dict[str, CassetteEntry] = {}
        self._lock = threading.Lock()
        for entry in entries:
            self.add(entry)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, fp: str) -> bool:
        return fp in self._entries

    @property
    def entries(self) -> list[CassetteEntry]:
        return list(self._entries.values())

    def get(self, fp: str) -> CassetteEntry | None:
        return self._entries.get(fp)

    def add(self, entry: CassetteEntry) -> CassetteEntry:
        """Insert ``entry`` unless its fingerprint is present; return the stored one."""
        with self._lock:
            return self._entries.setdefault(entry.fingerprint, entry)

    def dumps(self) -> str:
        return "".join(e.to_line() + "\n" for e in self.entries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> Cassette:
        entries = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                entry = CassetteEntry(
                    fingerprint=raw["fingerprint"],
                    request=CompletionRequest.from_dict(raw["request"]),
                    response=CompletionResult.from_dict(raw["response"]),
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise BackendError(f"cassette line {lineno}: {exc}") from exc
            if entry.fingerprint in {e.fingerprint for e in entries}:
                raise BackendError(f"cassette line {lineno}: duplicate fingerprint {entry.fingerprint}")
            entries.append(entry)
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> Cassette:
        return cls.loads(Path(path).read_text(encoding="utf-8"))


class RecordingBackend:
    """Pass-through that stores every exchange in a cassette.

    A request seen before is answered from the cassette, so the recorded run
    and its replay observe the same response even if the inner backend is
    nondeterministic.
    """

    def __init__(self, inner: Backend, cassette: Cassette | None = None) -> None:
        self.inner = inner
        self.cassette = cassette if cassette is not None else Cassette()
        self.kind = inner.kind

    def complete(self, request: CompletionRequest) -> CompletionResult:
        fp = fingerprint(request)
        seen = self.cassette.get(fp)
        if seen is not None:
            return seen.response
        result = self.inner.complete(request)
        return self.cassette.add(CassetteEntry(fp, request, result)).response


class ReplayBackend:
    kind = "replay"

    def __init__(self, cassette: Cassette) -> None:
        self.cassette = cassette

    @classmethod
    def from_file(cls, path: str | Path) -> ReplayBackend:
        return cls(Cassette.load(path))

    def complete(self, request: CompletionRequest) -> CompletionResult:
        fp = fingerprint(request)
        entry = self.cassette.get(fp)
        if entry is None:
            raise ReplayMissError(fp, request)
        r = entry.response
        return CompletionResult(r.text, r.prompt_tokens, r.output_tokens, backend_kind="replay")


# -- retry ------------------------------------------------------------------


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    base_delay: float = 0.5
    max_delay: float = 8.0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def delay(self, attempt: int, rng: random.Random) -> float:
        """Full-jitter exponential backoff before retry number ``attempt`` (1-based)."""
        cap = min(self.max_delay, self.base_delay * (2 ** (attempt - 1)))
        return rng.uniform(0.0, cap)


class RetryingBackend:
    def __init__(
        self,
        inner: Backend,
        policy: RetryPolicy,
        *,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ) -> None:
        self.inner = inner
        self.policy = policy
        self.kind = inner.kind
        self._sleep = sleep
        self._rng = rng or random.Random(0)
        self._rng_lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> CompletionResult:
        attempt = 0
        while True:
            attempt += 1
            try:
                return self.inner.complete(request)
            except BackendError as exc:
                if not exc.transient:
                    raise
                if attempt >= self.policy.max_attempts:
                    raise RetryExhaustedError(exc, attempt) from exc
                with self._rng_lock:
                    pause = self.policy.delay(attempt, self._rng)
                logger.warning("transient backend failure (attempt %d): %s", attempt, exc)
                self._sleep(pause)


def with_retry(backend: Backend, policy: RetryPolicy | None = None, **kwargs: Any) -> RetryingBackend:
    return RetryingBackend(backend, policy or RetryPolicy(), **kwargs)
