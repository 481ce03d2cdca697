"""Shopper profiles: ingest, completeness filter, stratified sampling, prompts."""

from __future__ import annotations

import hashlib
import json
import re
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from types import MappingProxyType
from typing import Any, TextIO

GENDERS = ("female", "male", "other")
AGE_RANGES = ("18-24", "25-34", "35-44", "45-55", "56+")

# Behavioural trait keys carried by PersonalWAB-style profiles. Others are kept verbatim.
TRAIT_KEYS = (
    "diversity_preference",
    "interaction_complexity",
    "tone_and_style",
    "item_reference",
    "focus_aspect",
    "review_awareness",
)

_PROFILE_KEYS = (
    "user_id",
    "gender",
    "age_range",
    "occupation",
    "price_sensitivity",
    "shopping_interests",
    "brand_preferences",
    "traits",
)

DEFAULT_STRATA = ("gender", "age_range")


class ProfileError(ValueError):
    def __init__(self, message: str, *, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SamplingError(ValueError):
    pass


class PromptError(ValueError):
    def __init__(self, placeholder: str) -> None:
        super().__init__(f"missing value for prompt placeholder {placeholder!r}")
        self.placeholder = placeholder


def _normalize_gender(value: Any) -> str:
    text = str(value or "").strip().lower()
    if text in ("female", "male"):
        return text
    if text in ("", "other", "unspecified", "other/unspecified"):
        return "other"
    raise ProfileError(f"unknown gender {value!r}")


@dataclass(frozen=True)
class UserProfileRecord:
    user_id: str
    gender: str
    age_range: str
    occupation: str | None = None
    price_sensitivity: str = ""
    shopping_interests: tuple[str, ...] = ()
    brand_preferences: tuple[str, ...] = ()
    behavioral_traits: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.user_id:
            raise ProfileError("user_id must be non-empty")
        object.__setattr__(self, "gender", _normalize_gender(self.gender))
        if self.age_range not in AGE_RANGES:
            raise ProfileError(f"age_range {self.age_range!r} not in {AGE_RANGES}")
        object.__setattr__(self, "shopping_interests", tuple(self.shopping_interests))
        object.__setattr__(self, "brand_preferences", tuple(self.brand_preferences))
        object.__setattr__(self, "behavioral_traits", MappingProxyType(dict(self.behavioral_traits)))

    def __hash__(self) -> int:
        return hash(self.user_id)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, UserProfileRecord):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def trait(self, key: str, default: str = "") -> str:
        return self.behavioral_traits.get(key, default)

    def attribute(self, name: str) -> str:
        """Value used for stratification; trait keys resolve through behavioral_traits."""
        if name in ("shopping_interests", "brand_preferences"):
            return ",".join(getattr(self, name))
        if name in _PROFILE_KEYS and name != "traits":
            return str(getattr(self, name) or "")
        if name.startswith("traits."):
            name = name[len("traits."):]
        return str(self.behavioral_traits.get(name, ""))

    def to_dict(self) -> dict[str, Any]:
        return {
            "user_id": self.user_id,
            "gender": self.gender,
            "age_range": self.age_range,
            "occupation": self.occupation,
            "price_sensitivity": self.price_sensitivity,
            "shopping_interests": list(self.shopping_interests),
            "brand_preferences": list(self.brand_preferences),
            "traits": dict(self.behavioral_traits),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> UserProfileRecord:
        if not isinstance(data, Mapping):
            raise ProfileError("record is not a JSON object")
        if not data.get("user_id"):
            raise ProfileError("missing user_id")
        traits = data.get("traits") or {}
        if not isinstance(traits, Mapping):
            raise ProfileError("traits must be an object")
        traits = {str(k): _as_text(v) for k, v in traits.items()}
        for key, value in data.items():
            if key not in _PROFILE_KEYS:
                traits.setdefault(key, _as_text(value))
        for key in ("shopping_interests", "brand_preferences"):
            value = data.get(key) or []
            if not isinstance(value, list):
                raise ProfileError(f"{key} must be an array")
        occupation = data.get("occupation")
        return cls(
            user_id=str(data["user_id"]),
            gender=data.get("gender", ""),
            age_range=str(data.get("age_range", "")),
            occupation=None if occupation is None else str(occupation),
            price_sensitivity=str(data.get("price_sensitivity") or ""),
            shopping_interests=tuple(str(x) for x in data.get("shopping_interests") or ()),
            brand_preferences=tuple(str(x) for x in data.get("brand_preferences") or ()),
            behavioral_traits=traits,
        )


def _as_text(value: Any) -> str:
    return value if isinstance(value, str) else json.dumps(value, ensure_ascii=False, sort_keys=True)


def load_profiles(source: TextIO | Iterable[str]) -> list[UserProfileRecord]:
    """Parse line-delimited JSON profiles; blank lines are skipped."""
    records: list[UserProfileRecord] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            record = UserProfileRecord.from_dict(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ProfileError(f"invalid JSON ({exc.msg})", line=lineno) from exc
        except ProfileError as exc:
            raise ProfileError(str(exc), line=lineno) from exc
        if record.user_id in seen:
            raise ProfileError(
                f"duplicate user_id {record.user_id!r} (first seen on line {seen[record.user_id]})",
                line=lineno,
            )
        seen[record.user_id] = lineno
        records.append(record)
    return records


def dump_profiles(records: Iterable[UserProfileRecord]) -> str:
    return "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in records)


def filter_complete(records: Sequence[UserProfileRecord]) -> list[UserProfileRecord]:
    return [r for r in records if r.occupation is not None and r.occupation.strip()]


def _selection_key(seed: int, gender: str, stratum: str, user_id: str) -> bytes:
    return hashlib.sha256(f"{seed}\x1f{gender}\x1f{stratum}\x1f{user_id}".encode()).digest()


def largest_remainder(counts: Mapping[str, int], total: int) -> dict[str, int]:
    """Apportion ``total`` over strata proportionally to ``counts``.

    Floors of the exact quotas are handed out first; the leftover units go
    to the largest fractional remainders, ties broken by stratum label.
    """
    population = sum(counts.values())
    if total == 0 or population == 0:
        return {label: 0 for label in counts}
    quotas = {label: Fraction(total * c, population) for label, c in counts.items()}
    alloc = {label: int(q) for label, q in quotas.items()}
    leftover = total - sum(alloc.values())
    order = sorted(quotas, key=lambda label: (-(quotas[label] - alloc[label]), label))
    for label in order[:leftover]:
        alloc[label] += 1
    return alloc


def stratified_sample(
    records: Sequence[UserProfileRecord],
    per_gender: int,
    seed: int,
    strata_keys: Sequence[str] = DEFAULT_STRATA,
    genders: Sequence[str] = ("female", "male"),
) -> list[UserProfileRecord]:
    """Draw ``per_gender`` profiles for each gender with proportional strata.

    Within a stratum, profiles are ranked by SHA-256 of
    ``(seed, gender, stratum, user_id)`` and the lowest-ranked are taken, a
    seeded permutation that is platform independent and insensitive to
    input order. The result keeps the input order of the chosen records.
    """
    if not strata_keys:
        raise SamplingError("strata_keys must be non-empty")
    if per_gender < 0:
        raise SamplingError("per_gender must be non-negative")
    if not -(2**63) <= seed < 2**64:
        raise SamplingError("seed must fit in 64 bits")
    keys = [k for k in strata_keys if k != "gender"]

    by_gender: dict[str, dict[str, list[UserProfileRecord]]] = {
        g: defaultdict(list) for g in genders
    }
    for record in records:
        if record.gender in by_gender:
            label = "|".join(record.attribute(k) for k in keys)
            by_gender[record.gender][label].append(record)

    chosen: set[str] = set()
    for gender in genders:
        strata = by_gender[gender]
        available = sum(len(v) for v in strata.values())
        if available < per_gender:
            raise SamplingError(
                f"gender {gender!r}: need {per_gender}, only {available} available "
                f"(short by {per_gender - available})"
            )
        alloc = largest_remainder({label: len(v) for label, v in strata.items()}, per_gender)
        for label, members in strata.items():
            ranked = sorted(members, key=lambda r: _selection_key(seed, gender, label, r.user_id))
            chosen.update(r.user_id for r in ranked[: alloc[label]])
    return [r for r in records if r.user_id in chosen]


def stratum_counts(
    records: Iterable[UserProfileRecord], strata_keys: Sequence[str] = DEFAULT_STRATA
) -> dict[tuple[str, ...], int]:
    counts: dict[tuple[str, ...], int] = defaultdict(int)
    for r in records:
        counts[tuple(r.attribute(k) for k in strata_keys)] += 1
    return dict(sorted(counts.items()))


USER_PROMPT_TEMPLATE = (
    "You are a shopper looking to purchase an item. Stay in character as a "
    "{age}-year-old {gender} {occupation}. Your goal is to find the best option "
    "based on your preferences, {price_sensitivity}, and {shopping_interests}.\n"
    "\n"
    "When responding:\n"
    "- Provide information about your preferences, interests, and constraints.\n"
    "- Ask questions about product details, discounts, or comparisons.\n"
    "- Express opinions and react naturally to recommendations.\n"
    "- Do not provide recommendations or act like an assistant.\n"
    "- Keep your tone {tone_and_style}.\n"
    "- If unsure, ask for clarification rather than making recommendations."
)

_BRACES = re.compile(r"[{}]")


def _clean(value: str) -> str:
    return _BRACES.sub("", " ".join(value.split()))


def render_user_prompt(profile: UserProfileRecord) -> str:
    values = {
        "age": profile.age_range,
        "gender": "" if profile.gender == "other" else profile.gender,
        "occupation": profile.occupation or "",
        "price_sensitivity": profile.price_sensitivity,
        "shopping_interests": ", ".join(i for i in profile.shopping_interests if i.strip()),
        "tone_and_style": profile.trait("tone_and_style"),
    }
    for name, value in values.items():
        if name != "gender" and not value.strip():
            raise PromptError(name)
    text = USER_PROMPT_TEMPLATE.format(**{k: _clean(v) for k, v in values.items()})
    # An unspecified gender leaves a double space behind.
    return text.replace("-year-old  ", "-year-old ")


def profile_digest(profile: UserProfileRecord) -> str:
    """Compact multi-line profile summary used inside agent-side prompts."""
    lines = [
        f"Age range: {profile.age_range}",
        f"Gender: {profile.gender}",
        f"Occupation: {profile.occupation or 'unknown'}",
        f"Price sensitivity: {profile.price_sensitivity or 'unknown'}",
        f"Shopping interests: {', '.join(profile.shopping_interests) or 'none stated'}",
        f"Preferred brands: {', '.join(profile.brand_preferences) or 'none stated'}",
    ]
    for key in TRAIT_KEYS:
        if profile.trait(key):
            lines.append(f"{key.replace('_', ' ').capitalize()}: {profile.trait(key)}")
    return "\n".join(lines)


@dataclass(frozen=True)
class Persona:
    profile: UserProfileRecord
    system_prompt: str
    opening_query: str | None = None
    followup_query: str | None = None
    cross_task_query: str | None = None

    @property
    def persona_id(self) -> str:
        return self.profile.user_id


def make_persona(
    profile: UserProfileRecord,
    opening_query: str | None = None,
    followup_query: str | None = None,
    cross_task_query: str | None = None,
) -> Persona:
    """Build a persona; preset queries default to the profile's same-named traits."""
    return Persona(
        profile=profile,
        system_prompt=render_user_prompt(profile),
        opening_query=opening_query or profile.trait("opening_query") or None,
        followup_query=followup_query or profile.trait("followup_query") or None,
        cross_task_query=cross_task_query or profile.trait("cross_task_query") or None,
    )
