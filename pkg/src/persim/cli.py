"""Command-line entry point: ``persim <command> ...``.

Settings resolve as flags, then ``PERSIM_*`` environment variables, then a
YAML/JSON ``--config`` file, then defaults. Exit codes: 0 success, 1 some
persona or trial failed, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import tempfile
from collections import Counter
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import yaml
from filelock import FileLock, Timeout

from .corpus import DOMAINS, CorpusError, IndexConfig, build_index, dump_items, ingest
from .dialogue import InterviewConfig
from .evaluate import (
    NORMALIZATIONS,
    AggregationError,
    aggregate,
    dump_trials,
    emit_report,
    load_trials,
    run_trials,
)
from .llm_backend import (
    ENV_API_BASE,
    ENV_API_KEY,
    ENV_MODEL,
    Backend,
    BackendError,
    Cassette,
    LiveBackend,
    RecordingBackend,
    ReplayBackend,
    RetryPolicy,
    ScriptedBackend,
    with_retry,
)
from .persona import (
    DEFAULT_STRATA,
    Persona,
    ProfileError,
    PromptError,
    SamplingError,
    dump_profiles,
    filter_complete,
    load_profiles,
    make_persona,
    stratified_sample,
    stratum_counts,
)
from .recommend import (
    SCENARIOS,
    Backends,
    PipelineConfig,
    PipelineError,
    SessionResult,
    run_persona,
)

logger = logging.getLogger("persim")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2

RESULTS_DIR = "results"
TRIALS_FILE = "trials.jsonl"
PERSONAS_FILE = "personas.jsonl"
LOCK_FILE = ".persim.lock"


class UsageError(Exception):
    """Bad flags, configuration or input files; maps to exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    corpus_path: str = ""
    profiles_path: str = ""
    personas_path: str = ""
    out_dir: str = "out"
    seed: int = 0
    per_gender: int = 60
    strata: tuple[str, ...] = DEFAULT_STRATA
    n_pairs: int = 4
    session_b_pairs: int | None = None
    max_turns: int = 8
    scenarios: tuple[str, ...] = SCENARIOS
    backend: str = "live"
    judge_backend: str = ""
    parallelism: int = 1
    model: str = ""
    api_base: str = ""
    api_key: str = ""
    timeout: float = 60.0
    requests_per_minute: float | None = None
    max_in_flight: int = 8
    retry_max_attempts: int = 4
    retry_base_delay: float = 0.5
    retry_max_delay: float = 8.0
    simulation_temperature: float = 0.7
    max_output_tokens: int = 1024
    k_per_query: int = 10
    pool_size: int = 20
    k1: float = 1.2
    b: float = 0.75
    field_weights: Mapping[str, float] | None = None
    normalization: str = "raw"
    timestamp: str = ""

    def __post_init__(self) -> None:
        if self.per_gender < 0 or self.n_pairs < 0 or self.max_turns < 0:
            raise UsageError("per_gender, n_pairs and max_turns must be non-negative")
        if self.parallelism < 1:
            raise UsageError("parallelism must be >= 1")
        unknown = set(self.scenarios) - set(SCENARIOS)
        if unknown or not self.scenarios:
            raise UsageError(f"scenarios must be a non-empty subset of {list(SCENARIOS)}")
        if self.normalization not in NORMALIZATIONS:
            raise UsageError(f"normalization must be one of {list(NORMALIZATIONS)}")
        for spec in (self.backend, self.judge_backend):
            if spec:
                _split_backend(spec)
        try:
            self.pipeline()
            self.index_config()
            self.retry_policy()
        except ValueError as exc:
            raise UsageError(f"invalid configuration: {exc}") from exc

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def personas_file(self) -> Path:
        return Path(self.personas_path) if self.personas_path else self.out / PERSONAS_FILE

    def interview(self) -> InterviewConfig:
        return InterviewConfig(
            n_pairs=self.n_pairs,
            simulation_temperature=self.simulation_temperature,
            max_turns=self.max_turns,
            model_name=self.model,
            max_output_tokens=self.max_output_tokens,
            seed=self.seed,
        )

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            interview=self.interview(),
            k_per_query=self.k_per_query,
            pool_size=self.pool_size,
            session_b_pairs=self.session_b_pairs,
        )

    def index_config(self) -> IndexConfig:
        kwargs: dict[str, Any] = {"k1": self.k1, "b": self.b}
        if self.field_weights is not None:
            kwargs["field_weights"] = dict(self.field_weights)
        return IndexConfig(**kwargs)

    def retry_policy(self) -> RetryPolicy:
        return RetryPolicy(self.retry_max_attempts, self.retry_base_delay, self.retry_max_delay)


CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}

# Environment variables consulted between flags and the config file.
ENV_VARS = {
    "api_key": ENV_API_KEY,
    "api_base": ENV_API_BASE,
    "model": ENV_MODEL,
    "seed": "PERSIM_SEED",
    "out_dir": "PERSIM_OUT_DIR",
    "backend": "PERSIM_BACKEND",
    "parallelism": "PERSIM_PARALLELISM",
}


def _coerce(name: str, value: Any) -> Any:
    """Convert a raw config, env or flag value to the field's type."""
    kind = str(CONFIG_FIELDS[name].type)
    try:
        if value is None:
            if "None" in kind:
                return None
            raise ValueError("value is required")
        if kind.startswith("tuple"):
            items = value.split(",") if isinstance(value, str) else list(value)
            return tuple(str(v).strip() for v in items if str(v).strip())
        if kind.startswith("Mapping"):
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, Mapping):
                raise ValueError("expected a mapping")
            return {str(k): float(v) for k, v in value.items()}
        if kind.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError("expected an integer")
            return int(value)
        if kind.startswith("float"):
            if isinstance(value, bool):
                raise ValueError("expected a number")
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config {name}: invalid value {value!r} ({exc})") from exc


def load_config_file(path: str | Path) -> dict[str, Any]:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise UsageError(f"config {path} must be a mapping")
    unknown = sorted(set(data) - set(CONFIG_FIELDS))
    if unknown:
        raise UsageError(f"config {path}: unknown keys {unknown}")
    return dict(data)


def resolve_config(
    flags: Mapping[str, Any],
    env: Mapping[str, str] | None = None,
    file_values: Mapping[str, Any] | None = None,
) -> RunConfig:
    """Merge settings: explicit flags beat the environment, which beats the file."""
    env = os.environ if env is None else env
    merged: dict[str, Any] = {}
    for name, value in (file_values or {}).items():
        merged[name] = _coerce(name, value)
    for name, var in ENV_VARS.items():
        if env.get(var):
            merged[name] = _coerce(name, env[var])
    for name, value in flags.items():
        if name in CONFIG_FIELDS and value is not None:
            merged[name] = _coerce(name, value)
    return RunConfig(**merged)


# -- backends ---------------------------------------------------------------


def _split_backend(spec: str) -> tuple[str, str]:
    kind, _, arg = spec.partition(":")
    if kind == "live" and not arg:
        return kind, ""
    if kind in ("scripted", "replay") and arg:
        return kind, arg
    raise UsageError(f"backend must be 'live', 'scripted:<path>' or 'replay:<path>', not {spec!r}")


def make_backend(spec: str, config: RunConfig) -> Backend:
    kind, arg = _split_backend(spec)
    try:
        if kind == "scripted":
            return ScriptedBackend.from_file(arg)
        if kind == "replay":
            return ReplayBackend.from_file(arg)
        live = LiveBackend(
            config.api_base,
            config.api_key,
            config.model,
            timeout=config.timeout,
            max_in_flight=config.max_in_flight,
            requests_per_minute=config.requests_per_minute,
        )
    except OSError as exc:
        raise UsageError(f"cannot read {arg}: {exc.strerror or exc}") from exc
    except BackendError as exc:
        raise UsageError(str(exc)) from exc
    return with_retry(live, config.retry_policy())


# -- file helpers -----------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    """Write via a temporary sibling and rename, so readers never see half a file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _read_lines(path: Path, what: str) -> list[str]:
    try:
        return path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror or exc}") from exc


def load_personas(path: Path) -> list[Persona]:
    try:
        records = load_profiles(_read_lines(path, "personas"))
        return [make_persona(r) for r in records]
    except (ProfileError, PromptError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def load_corpus(path: str) -> list:
    if not path:
        raise UsageError("no corpus given (--corpus or corpus_path)")
    try:
        return ingest(_read_lines(Path(path), "corpus"))
    except CorpusError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def result_path(out: Path, persona_id: str, scenario: str) -> Path:
    return out / RESULTS_DIR / f"{persona_id}.{scenario}.json"


def load_existing(out: Path, persona_id: str) -> dict[str, SessionResult]:
    found = {}
    for scenario in SCENARIOS:
        path = result_path(out, persona_id, scenario)
        if path.exists():
            try:
                found[scenario] = SessionResult.loads(path.read_text(encoding="utf-8"))
            except (ValueError, KeyError, TypeError) as exc:
                raise UsageError(f"corrupt result file {path}: {exc}") from exc
    return found


def resolve_timestamp(config: RunConfig, env: Mapping[str, str] | None = None) -> str:
    """Explicit timestamp, else ``SOURCE_DATE_EPOCH``, else the current UTC time."""
    env = os.environ if env is None else env
    if config.timestamp:
        return config.timestamp
    epoch = env.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


# -- stages -----------------------------------------------------------------


def stage_run(config: RunConfig, backend: Backend, *, force: bool = False) -> int:
    """Run every persona through the requested scenarios; return an exit code."""
    personas = load_personas(config.personas_file)
    index = build_index(load_corpus(config.corpus_path), config.index_config())
    backends = Backends.single(backend)
    pipeline = config.pipeline()

    def save(result: SessionResult) -> None:
        atomic_write(result_path(config.out, result.persona_id, result.scenario), result.dumps())

    failures = 0
    for persona in personas:
        existing = {} if force else load_existing(config.out, persona.persona_id)
        if all(s in existing for s in config.scenarios):
            logger.info("%s: results present, skipping", persona.persona_id)
            continue
        try:
            run_persona(persona, index, backends, pipeline, config.scenarios, existing, save)
        except PipelineError as exc:
            failures += 1
            print(f"error: {persona.persona_id}: {exc}", file=sys.stderr)
    total = len(personas)
    print(f"run: {total - failures}/{total} personas complete")
    return EXIT_PARTIAL if failures else EXIT_OK


def stage_eval(config: RunConfig, backend: Backend, *, force: bool = False) -> int:
    trials_path = config.out / TRIALS_FILE
    if trials_path.exists() and not force:
        print(f"eval: {trials_path} exists, skipping (use --force to re-judge)")
        return EXIT_OK
    personas = load_personas(config.personas_file)
    results: dict[str, dict[str, Any]] = {}
    for persona in personas:
        found = load_existing(config.out, persona.persona_id)
        results[persona.persona_id] = {s: r.recommendations for s, r in found.items()}
    if not any(results.values()):
        raise UsageError(f"no results under {config.out / RESULTS_DIR}; run 'persim run' first")
    trials = run_trials(
        personas,
        results,
        backend,
        config.parallelism,
        scenarios=config.scenarios,
        judged_at=resolve_timestamp(config),
        seed=config.seed,
        model_name=config.model,
    )
    atomic_write(trials_path, dump_trials(trials))
    failed = [t for t in trials if t.scores is None]
    for t in failed:
        print(f"error: {t.persona_id} {t.scenario}: {t.error}", file=sys.stderr)
    print(f"eval: {len(trials) - len(failed)}/{len(trials)} trials judged")
    return EXIT_PARTIAL if failed else EXIT_OK


def stage_report(config: RunConfig, backend_kind: str = "") -> int:
    trials_path = config.out / TRIALS_FILE
    try:
        trials = load_trials(_read_lines(trials_path, "trials"))
    except ValueError as exc:
        raise UsageError(f"{trials_path}: {exc}") from exc
    metadata = {
        "seed": config.seed,
        "model": config.model,
        "backend": backend_kind or _split_backend(config.backend)[0],
        "generated_at": resolve_timestamp(config),
        "trials": len(trials),
    }
    try:
        report = aggregate(trials, config.normalization, metadata)
    except AggregationError as exc:
        raise UsageError(str(exc)) from exc
    for path in emit_report(report, config.out):
        print(f"wrote {path}")
    return EXIT_OK


def stage_pipeline(config: RunConfig, backend: Backend, *, force: bool, kind: str) -> int:
    code = stage_run(config, backend, force=force)
    code = max(code, stage_eval(config, backend, force=force))
    return max(code, stage_report(config, kind))


# -- commands ---------------------------------------------------------------


def cmd_corpus_ingest(args: argparse.Namespace, config: RunConfig) -> int:
    items = load_corpus(args.path or config.corpus_path)
    counts = Counter(i.domain for i in items)
    print(f"{len(items)} items")
    for domain in DOMAINS:
        print(f"  {domain}: {counts.get(domain, 0)}")
    if args.out:
        atomic_write(Path(args.out), dump_items(items))
    return EXIT_OK


def cmd_personas_sample(args: argparse.Namespace, config: RunConfig) -> int:
    if not config.profiles_path:
        raise UsageError("no profiles given (--profiles or profiles_path)")
    path = Path(config.profiles_path)
    try:
        records = load_profiles(_read_lines(path, "profiles"))
    except ProfileError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    complete = filter_complete(records)
    try:
        chosen = stratified_sample(complete, config.per_gender, config.seed, config.strata)
    except SamplingError as exc:
        raise UsageError(str(exc)) from exc
    out = config.personas_file
    atomic_write(out, dump_profiles(chosen))
    print(f"{len(records)} profiles, {len(complete)} complete, {len(chosen)} sampled -> {out}")
    for stratum, n in sorted(stratum_counts(chosen, config.strata).items()):
        print(f"  {' / '.join(stratum)}: {n}")
    return EXIT_OK


def _locked(config: RunConfig, body: Callable[[], int]) -> int:
    config.out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(config.out / LOCK_FILE))
    try:
        with lock.acquire(timeout=0):
            return body()
    except Timeout:
        raise UsageError(f"{config.out} is in use by another persim process") from None


def cmd_run(args: argparse.Namespace, config: RunConfig) -> int:
    backend = make_backend(config.backend, config)
    return _locked(config, lambda: stage_run(config, backend, force=args.force))


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    backend = make_backend(config.judge_backend or config.backend, config)
    return _locked(config, lambda: stage_eval(config, backend, force=args.force))


def cmd_report(args: argparse.Namespace, config: RunConfig) -> int:
    return stage_report(config)


def cmd_record(args: argparse.Namespace, config: RunConfig) -> int:
    inner = make_backend(config.backend, config)
    cassette = Path(args.cassette)
    recorder = RecordingBackend(inner)

    def body() -> int:
        try:
            return stage_pipeline(config, recorder, force=args.force, kind=inner.kind)
        finally:
            atomic_write(cassette, recorder.cassette.dumps())
            print(f"recorded {len(recorder.cassette)} exchanges -> {cassette}")

    return _locked(config, body)


def cmd_replay(args: argparse.Namespace, config: RunConfig) -> int:
    try:
        backend = ReplayBackend(Cassette.load(args.cassette))
    except OSError as exc:
        raise UsageError(f"cannot read cassette {args.cassette}: {exc.strerror or exc}") from exc
    except BackendError as exc:
        raise UsageError(str(exc)) from exc
    # The report names the backend that produced the responses, so a replay
    # reproduces the recorded report byte for byte.
    kinds = {e.response.backend_kind for e in backend.cassette.entries}
    kind = kinds.pop() if len(kinds) == 1 else "replay"
    return _locked(config, lambda: stage_pipeline(config, backend, force=args.force, kind=kind))


def cmd_synth(args: argparse.Namespace, config: RunConfig) -> int:
    """Write the bundled synthetic corpus, profiles, demo personas and script."""
    from .synthetic import demo_profiles, pipeline_rules, synthetic_corpus, synthetic_population

    out = Path(args.dir)
    files = {
        "corpus.jsonl": dump_items(synthetic_corpus()),
        "profiles.jsonl": dump_profiles(synthetic_population()),
        "demo_personas.jsonl": dump_profiles(demo_profiles(args.personas)),
        "script.yaml": yaml.safe_dump(
            {"rules": [r.to_dict() for r in pipeline_rules()]},
            allow_unicode=True,
            sort_keys=False,
            width=1000,
        ),
    }
    for name, text in files.items():
        atomic_write(out / name, text)
        print(f"wrote {out / name}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON file of settings")
    p.add_argument("--out-dir", dest="out_dir", help="output directory (default: out)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _pipeline_flags(p: argparse.ArgumentParser, *, run: bool = True, judge: bool = True) -> None:
    p.add_argument("--personas", dest="personas_path", help="personas file (default: OUT/personas.jsonl)")
    p.add_argument("--backend", help="live | scripted:<path> | replay:<path>")
    p.add_argument("--model")
    p.add_argument("--api-base", dest="api_base")
    p.add_argument("--scenarios", help=f"comma-separated subset of {','.join(SCENARIOS)}")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--force", action="store_true", help="recompute existing outputs")
    if run:
        p.add_argument("--corpus", dest="corpus_path")
        p.add_argument("--n-pairs", dest="n_pairs", type=int)
        p.add_argument("--max-turns", dest="max_turns", type=int)
    if judge:
        p.add_argument("--judge-backend", dest="judge_backend")
        p.add_argument("--timestamp", help="judged-at time recorded in trials and the report")
        p.add_argument("--normalization", choices=NORMALIZATIONS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="persim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="product corpus tools")
    corpus_sub = corpus.add_subparsers(dest="action", required=True)
    ingest_p = corpus_sub.add_parser("ingest", help="validate a corpus and count items per domain")
    ingest_p.add_argument("path", nargs="?")
    ingest_p.add_argument("--out", help="write the normalised corpus here")
    _common(ingest_p)
    ingest_p.set_defaults(func=cmd_corpus_ingest)

    personas = sub.add_parser("personas", help="persona tools")
    personas_sub = personas.add_subparsers(dest="action", required=True)
    sample_p = personas_sub.add_parser("sample", help="stratified persona sample")
    sample_p.add_argument("--profiles", dest="profiles_path")
    sample_p.add_argument("--out", dest="personas_path", help="default: OUT/personas.jsonl")
    sample_p.add_argument("--per-gender", dest="per_gender", type=int)
    sample_p.add_argument("--strata", help="comma-separated profile attributes")
    _common(sample_p)
    sample_p.set_defaults(func=cmd_personas_sample)

    run_p = sub.add_parser("run", help="interview, retrieve and rank for every persona")
    _common(run_p)
    _pipeline_flags(run_p, judge=False)
    run_p.set_defaults(func=cmd_run)

    eval_p = sub.add_parser("eval", help="judge every recommendation list")
    _common(eval_p)
    _pipeline_flags(eval_p, run=False)
    eval_p.set_defaults(func=cmd_eval)

    report_p = sub.add_parser("report", help="aggregate trials into report files")
    _common(report_p)
    report_p.add_argument("--normalization", choices=NORMALIZATIONS)
    report_p.add_argument("--timestamp")
    report_p.add_argument("--backend", help="backend named in the report metadata")
    report_p.add_argument("--model")
    report_p.set_defaults(func=cmd_report)

    for name, func, text in (
        ("record", cmd_record, "run, eval and report while recording a cassette"),
        ("replay", cmd_replay, "run, eval and report from a recorded cassette"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--cassette", required=True)
        _common(p)
        _pipeline_flags(p)
        p.set_defaults(func=func)

    synth_p = sub.add_parser("synth", help="write bundled synthetic fixtures")
    synth_p.add_argument("dir")
    synth_p.add_argument("--personas", type=int, default=4, help="number of demo personas")
    _common(synth_p)
    synth_p.set_defaults(func=cmd_synth)
    return parser


_NOT_CONFIG = {"command", "action", "func", "config", "verbose", "force", "path", "out", "cassette", "dir"}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    flags = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    try:
        file_values = load_config_file(args.config) if args.config else {}
        config = resolve_config(flags, os.environ, file_values)
        return args.func(args, config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
