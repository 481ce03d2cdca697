"""Product corpus ingest and multi-field BM25 retrieval."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, TextIO

DOMAINS = (
    "Electronics",
    "Home and Kitchen",
    "Grocery and Gourmet Food",
    "Clothing, Shoes and Jewelry",
    "Health and Household",
)

# Scored fields, in the order their contributions are summed.
FIELDS = ("title", "brand", "features", "category", "description")

DEFAULT_FIELD_WEIGHTS = MappingProxyType(
    {"title": 2.0, "brand": 1.5, "features": 1.5, "category": 1.0, "description": 1.0}
)

_TOKEN = re.compile(r"[^\W_]+")


class CorpusError(ValueError):
    def __init__(self, message: str, *, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class ProductItem:
    item_id: str
    title: str
    domain: str
    brand: str | None = None
    price: float | None = None
    features: tuple[str, ...] = ()
    description: str = ""
    average_rating: float | None = None

    def __post_init__(self) -> None:
        if not self.item_id:
            raise CorpusError("item_id must be non-empty")
        if self.domain not in DOMAINS:
            raise CorpusError(f"unknown domain {self.domain!r}")
        if self.price is not None and (not math.isfinite(self.price) or self.price < 0):
            raise CorpusError(f"{self.item_id}: price must be a non-negative number")
        if self.average_rating is not None and not 0.0 <= self.average_rating <= 5.0:
            raise CorpusError(f"{self.item_id}: average_rating outside [0, 5]")
        object.__setattr__(self, "features", tuple(self.features))

    def field_text(self, name: str) -> str:
        if name == "title":
            return self.title
        if name == "brand":
            return self.brand or ""
        if name == "features":
            return " ".join(self.features)
        if name == "category":
            return self.domain
        if name == "description":
            return self.description
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "item_id": self.item_id,
            "title": self.title,
            "brand": self.brand,
            "domain": self.domain,
            "price": self.price,
            "features": list(self.features),
            "description": self.description,
            "average_rating": self.average_rating,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ProductItem:
        if not isinstance(data, Mapping):
            raise CorpusError("record is not a JSON object")
        for key in ("item_id", "title", "domain"):
            if not data.get(key):
                raise CorpusError(f"missing {key}")
        features = data.get("features") or []
        if not isinstance(features, list):
            raise CorpusError("features must be an array")
        price = data.get("price")
        rating = data.get("average_rating")
        try:
            return cls(
                item_id=str(data["item_id"]),
                title=str(data["title"]),
                domain=str(data["domain"]),
                brand=None if data.get("brand") is None else str(data["brand"]),
                price=None if price is None else float(price),
                features=tuple(str(f) for f in features),
                description=str(data.get("description") or ""),
                average_rating=None if rating is None else float(rating),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, CorpusError):
                raise
            raise CorpusError(str(exc)) from exc


def ingest(source: TextIO | Iterable[str]) -> list[ProductItem]:
    items: list[ProductItem] = []
    seen: set[str] = set()
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            item = ProductItem.from_dict(json.loads(line))
        except json.JSONDecodeError as exc:
            raise CorpusError(f"invalid JSON ({exc.msg})", line=lineno) from exc
        except CorpusError as exc:
            raise CorpusError(str(exc), line=lineno) from exc
        if item.item_id in seen:
            raise CorpusError(f"duplicate item_id {item.item_id!r}", line=lineno)
        seen.add(item.item_id)
        items.append(item)
    return items


def dump_items(items: Iterable[ProductItem]) -> str:
    return "".join(json.dumps(i.to_dict(), ensure_ascii=False) + "\n" for i in items)


@dataclass(frozen=True)
class IndexConfig:
    field_weights: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_FIELD_WEIGHTS))
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        unknown = set(self.field_weights) - set(FIELDS)
        if unknown:
            raise ValueError(f"unknown index fields: {sorted(unknown)}")
        if any(w <= 0 for w in self.field_weights.values()):
            raise ValueError("field weights must be positive")
        if self.k1 <= 0:
            raise ValueError("k1 must be positive")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must lie in [0, 1]")
        object.__setattr__(self, "field_weights", MappingProxyType(dict(self.field_weights)))


@dataclass(frozen=True)
class ScoredItem:
    item: ProductItem
    score: float


def bm25_idf(n_docs: int, df: int) -> float:
    """Non-negative BM25 idf: ln(1 + (N - df + 0.5) / (df + 0.5))."""
    return math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))


def bm25_term(tf: int, idf: float, length: int, avg_length: float, k1: float, b: float) -> float:
    norm = 1.0 - b + b * (length / avg_length) if avg_length > 0 else 1.0
    return idf * tf * (k1 + 1.0) / (tf + k1 * norm)


class CorpusIndex:
    """Immutable inverted index, one posting table per scored field.

    Scores are summed per document in a fixed order (fields in ``FIELDS``
    order, query terms sorted) so identical inputs give bit-identical floats.
    """

    def __init__(self, items: Sequence[ProductItem], config: IndexConfig | None = None) -> None:
        self.config = config or IndexConfig()
        self.items: tuple[ProductItem, ...] = tuple(items)
        ids = [i.item_id for i in self.items]
        if len(set(ids)) != len(ids):
            raise CorpusError("duplicate item_id in corpus")
        self._by_id = MappingProxyType({i.item_id: n for n, i in enumerate(self.items)})
        self.fields = tuple(f for f in FIELDS if f in self.config.field_weights)

        postings: dict[str, dict[str, dict[int, int]]] = {f: {} for f in self.fields}
        lengths: dict[str, list[int]] = {f: [] for f in self.fields}
        for doc, item in enumerate(self.items):
            for name in self.fields:
                tokens = tokenize(item.field_text(name))
                lengths[name].append(len(tokens))
                for term, tf in Counter(tokens).items():
                    postings[name].setdefault(term, {})[doc] = tf
        self._postings = MappingProxyType(
            {
                f: MappingProxyType({t: tuple(sorted(p.items())) for t, p in table.items()})
                for f, table in postings.items()
            }
        )
        self._lengths = MappingProxyType({f: tuple(v) for f, v in lengths.items()})
        n = len(self.items)
        self._avg = MappingProxyType({f: (sum(v) / n if n else 0.0) for f, v in lengths.items()})

    def __len__(self) -> int:
        return len(self.items)

    @property
    def is_empty(self) -> bool:
        return not self.items

    def get(self, item_id: str) -> ProductItem | None:
        n = self._by_id.get(item_id)
        return None if n is None else self.items[n]

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._by_id

    def document_frequency(self, field_name: str, term: str) -> int:
        return len(self._postings[field_name].get(term, ()))

    def term_frequency(self, field_name: str, term: str, item_id: str) -> int:
        doc = self._by_id[item_id]
        return dict(self._postings[field_name].get(term, ())).get(doc, 0)

    def field_length(self, field_name: str, item_id: str) -> int:
        return self._lengths[field_name][self._by_id[item_id]]

    def average_field_length(self, field_name: str) -> float:
        return self._avg[field_name]

    def vocabulary(self, field_name: str) -> frozenset[str]:
        return frozenset(self._postings[field_name])

    def score_all(self, query_text: str) -> dict[int, float]:
        terms = sorted(set(tokenize(query_text)))
        n = len(self.items)
        k1, b = self.config.k1, self.config.b
        scores: dict[int, float] = {}
        for name in self.fields:
            weight = self.config.field_weights[name]
            lengths = self._lengths[name]
            avg = self._avg[name]
            for term in terms:
                posting = self._postings[name].get(term)
                if not posting:
                    continue
                idf = bm25_idf(n, len(posting))
                for doc, tf in posting:
                    contribution = weight * bm25_term(tf, idf, lengths[doc], avg, k1, b)
                    scores[doc] = scores.get(doc, 0.0) + contribution
        return scores

    def search(self, query_text: str, k: int) -> list[ScoredItem]:
        if k < 1:
            raise ValueError("k must be >= 1")
        scores = self.score_all(query_text)
        ranked = sorted(scores, key=lambda d: (-scores[d], self.items[d].item_id))
        return [ScoredItem(self.items[d], scores[d]) for d in ranked[:k]]


def build_index(items: Sequence[ProductItem], config: IndexConfig | None = None) -> CorpusIndex:
    return CorpusIndex(items, config)


def search(index: CorpusIndex, query_text: str, k: int) -> list[ScoredItem]:
    return index.search(query_text, k)
