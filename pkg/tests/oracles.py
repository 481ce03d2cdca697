"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import json
import math
import random
import re

from persim.corpus import DEFAULT_FIELD_WEIGHTS, FIELDS


def words(text):
    return re.findall(r"[^\W_]+", text.lower())


def field_value(item, name):
    return {
        "title": item.title,
        "brand": item.brand or "",
        "features": " ".join(item.features),
        "category": item.domain,
        "description": item.description,
    }[name]


def brute_force(items, query, k, weights=DEFAULT_FIELD_WEIGHTS, k1=1.2, b=0.75):
    """Score every document from scratch; no postings, no shared state."""
    terms = sorted(set(words(query)))
    n = len(items)
    docs = [{f: words(field_value(it, f)) for f in FIELDS} for it in items]
    scored = []
    for item, doc in zip(items, docs):
        total, hit = 0.0, False
        for f in FIELDS:
            avg = sum(len(d[f]) for d in docs) / n
            for t in terms:
                tf = doc[f].count(t)
                if not tf:
                    continue
                hit = True
                df = sum(1 for d in docs if t in d[f])
                idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
                norm = 1 - b + b * len(doc[f]) / avg
                total += weights[f] * idf * tf * (k1 + 1) / (tf + k1 * norm)
        if hit:
            scored.append((item.item_id, total))
    scored.sort(key=lambda p: (-p[1], p[0]))
    return scored[:k]


def random_queries(items, count, seed):
    rng = random.Random(seed)
    vocab = sorted({w for it in items for f in FIELDS for w in words(field_value(it, f))})
    noise = ["zzz", "qwerty", "404", "the", "for", "and"]
    out = []
    for _ in range(count):
        picks = rng.sample(vocab, rng.randint(1, 5)) + rng.sample(noise, rng.randint(0, 2))
        rng.shuffle(picks)
        out.append(" ".join(picks))
    return out


_METRICS = ("relevance", "diversity", "novelty")
_GOOD_VALUES = ("{v}", "**{v}**", "{v}/5", "{v} / 5", "{v}/5**")
_BAD_VALUES = ("0", "6", "7", "10", "-1", "4.5", "3.0", "four", "N/A", "3/4", "4/10", "½", "")
_REASONS = ("", " - matches the profile", " — varied picks", " (nothing new)", ": solid", " good fit")


def _label(rng, metric):
    name = rng.choice((metric, metric.capitalize(), metric.upper()))
    name = rng.choice(("{}", "**{}**", "- {}", "* {}", "{} score")).format(name)
    return name + rng.choice((":", " :", "=", ": "))


def _lines_case(rng, scores, bad=None):
    lines = []
    for metric, value in zip(_METRICS, scores):
        shown = bad[1] if bad and bad[0] == metric else rng.choice(_GOOD_VALUES).format(v=value)
        lines.append(f"{_label(rng, metric)} {shown}{rng.choice(_REASONS)}".replace(":  ", ": "))
    rng.shuffle(lines)
    if rng.random() < 0.4:
        lines.insert(0, rng.choice(("Here are my ratings:", "Ratings", "")))
    if rng.random() < 0.3:
        lines.append(rng.choice(("Overall a good list.", "", "Thanks!")))
    return "\n".join(lines)


def _json_case(rng, scores, bad=None):
    data = dict(zip(_METRICS, scores))
    if bad:
        data[bad[0]] = bad[1]
    if rng.random() < 0.5:
        data["relevance_justification"] = "close to what I asked for"
    keys = list(data)
    rng.shuffle(keys)
    text = json.dumps({k: data[k] for k in keys}, indent=rng.choice((None, 2)))
    if rng.random() < 0.3:
        text = f"```json\n{text}\n```"
    if rng.random() < 0.3:
        text = "Scores:\n" + text
    return text


def judge_fuzz_corpus(seed: int = 0, size: int = 240):
    """``(text, expected, case_id)`` triples; ``expected`` is None when the text must be rejected.

    Expectations follow from how each text was built, never from the parser.
    """
    rng = random.Random(seed)
    cases = []
    for n in range(size):
        scores = tuple(rng.randint(1, 5) for _ in _METRICS)
        kind = n % 8
        if kind in (0, 1, 2):
            cases.append((_lines_case(rng, scores), scores, f"lines-ok-{n}"))
        elif kind == 3:
            cases.append((_json_case(rng, scores), scores, f"json-ok-{n}"))
        elif kind == 4:
            bad = (rng.choice(_METRICS), rng.choice(_BAD_VALUES))
            cases.append((_lines_case(rng, scores, bad), None, f"lines-bad-value-{n}"))
        elif kind == 5:
            bad = (rng.choice(_METRICS), rng.choice((0, 6, -2, 4.5, 3.0, "4", True, None, [4])))
            cases.append((_json_case(rng, scores, bad), None, f"json-bad-value-{n}"))
        elif kind == 6:
            text = _lines_case(rng, scores)
            lines = [ln for ln in text.splitlines() if any(m in ln.lower() for m in _METRICS)]
            drop = rng.choice(lines)
            if rng.random() < 0.5:
                text = "\n".join(ln for ln in text.splitlines() if ln != drop)
                cases.append((text, None, f"lines-missing-{n}"))
            else:
                cases.append((text + "\n" + drop, None, f"lines-duplicate-{n}"))
        else:
            data = dict(zip(_METRICS, scores))
            del data[rng.choice(_METRICS)]
            junk = rng.choice((json.dumps(data), "I really liked these!", "", "5 3 2", "relevance high"))
            cases.append((junk, None, f"junk-{n}"))
    return cases


def hamilton(counts: dict[str, int], total: int) -> dict[str, int]:
    """Integer-only largest-remainder apportionment used as the oracle."""
    population = sum(counts.values())
    if not population:
        return {k: 0 for k in counts}
    floors = {k: total * c // population for k, c in counts.items()}
    rems = {k: total * c % population for k, c in counts.items()}
    left = total - sum(floors.values())
    for k in sorted(counts, key=lambda k: (-rems[k], k))[:left]:
        floors[k] += 1
    return floors
