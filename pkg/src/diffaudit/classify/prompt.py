"""Chat prompt for ensemble classification and parsing of its line-oriented replies."""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from ..ontology import Ontology

__all__ = [
    "SYSTEM_PROMPT",
    "DEFAULT_MAX_BATCH",
    "SingleRunResult",
    "build_prompt",
    "build_messages",
    "prompt_hash",
    "parse_llm_response",
]

SYSTEM_PROMPT = (
    "You are a text classifier for network traffic payload data. I am going to give you "
    "some categories and examples for each category. Then I will give you text sequences "
    "that I want you to categorize using the provided categories. The input texts were "
    "collected from network traffic payloads. Try to determine the meaning of the input "
    "texts and use the similarity of the categories and input texts to do the "
    "classification. For text with acronyms and abbreviations, use the meaning of the "
    "acronyms and abbreviations to do the classification. Provide an explanation for each "
    "classification in 15 words or less. Report a score of confidence on a scale of 0 to 1 "
    "for each categorization. Format your response exactly like this for each input text: "
    "<input text> // <category> // <score> // <explanation>."
)

DEFAULT_MAX_BATCH = 40


@dataclass(frozen=True)
class SingleRunResult:
    key: str
    label: Optional[str]
    confidence: float
    explanation: str
    temperature: float
    parse_ok: bool
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "temperature": self.temperature,
            "label": self.label,
            "confidence": self.confidence,
            "parse_ok": self.parse_ok,
            "explanation": self.explanation,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SingleRunResult":
        return cls(d["key"], d.get("label"), float(d.get("confidence", 0.0)),
                   d.get("explanation", ""), float(d["temperature"]), bool(d["parse_ok"]),
                   d.get("error", ""))

    @classmethod
    def failed(cls, key: str, temperature: float, error: str) -> "SingleRunResult":
        return cls(key, None, 0.0, "", temperature, False, error)


def _display(key: str) -> str:
    # one input per prompt line
    return " ".join(key.split())


def _categories_section(ontology: Ontology) -> str:
    lines = ["Categories:"]
    for label in ontology:
        lines.append(f"{label.name}: {', '.join(label.examples)}")
    return "\n".join(lines)


def prompt_hash(ontology: Ontology) -> str:
    """Digest of the batch-independent prompt part (instructions and categories)."""
    text = SYSTEM_PROMPT + "\n\n" + _categories_section(ontology)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _check_batch(batch: Sequence[str], max_batch: int) -> None:
    if not batch:
        raise ValueError("batch must contain at least one key")
    if len(batch) > max_batch:
        raise ValueError(f"batch of {len(batch)} keys exceeds the maximum of {max_batch}")


def build_messages(
    ontology: Ontology, batch: Sequence[str], max_batch: int = DEFAULT_MAX_BATCH
) -> list[dict]:
    _check_batch(batch, max_batch)
    user = (
        _categories_section(ontology)
        + "\n\nInput texts:\n"
        + "\n".join(_display(k) for k in batch)
    )
    return [{"role": "system", "content": SYSTEM_PROMPT}, {"role": "user", "content": user}]


def build_prompt(ontology: Ontology, batch: Sequence[str], max_batch: int = DEFAULT_MAX_BATCH) -> str:
    """Full prompt text: instructions, every label with its examples, then one key per line."""
    return "\n\n".join(m["content"] for m in build_messages(ontology, batch, max_batch))


_LIST_PREFIX = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+")
_QUOTES = "\"'`<>"


def _match_key(text: str, lookup: dict[str, str], folded: dict[str, Optional[str]]) -> Optional[str]:
    candidates = [text.strip()]
    stripped = _LIST_PREFIX.sub("", candidates[0])
    candidates.append(stripped)
    candidates.extend(c.strip(_QUOTES).strip() for c in list(candidates))
    for c in candidates:
        if c in lookup:
            return lookup[c]
    for c in candidates:
        hit = folded.get(c.casefold())
        if hit:
            return hit
    return None


def parse_llm_response(
    text: str, ontology: Ontology, batch: Sequence[str], temperature: float = 0.0
) -> list[SingleRunResult]:
    """One result per batch key, in batch order; never raises.

    Lines have the form ``<input> // <category> // <score> // <explanation>``.
    The first well-formed line echoing a key wins. A key whose lines are all
    malformed (unknown label, unreadable or out-of-range score, missing
    fields) gets a parse_ok=False record, as does a key with no line at all.
    """
    lookup = {_display(k): k for k in batch}
    folded: dict[str, Optional[str]] = {}
    for shown, key in lookup.items():
        f = shown.casefold()
        folded[f] = None if f in folded else key  # ambiguous case-folds never match

    best: dict[str, SingleRunResult] = {}
    for line in (text or "").splitlines():
        if not line.strip():
            continue
        parts = line.split("//")
        key = None
        fields: list[str] = []
        # the echoed input may itself contain "//"
        # the explanation may be missing
        for j in range(1, len(parts) - 1):
            key = _match_key("//".join(parts[:j]), lookup, folded)
            if key is not None:
                fields = [parts[j], parts[j + 1], "//".join(parts[j + 2:])]
                break
        if key is None:
            key = _match_key(parts[0], lookup, folded)
            if key is None:
                continue
            fields = []
        result = _parse_fields(key, fields, ontology, temperature)
        prev = best.get(key)
        if prev is None or (not prev.parse_ok and result.parse_ok):
            best[key] = result

    out = []
    for key in batch:
        r = best.get(key)
        if r is None:
            r = SingleRunResult.failed(key, temperature, "missing")
        elif r.key != key:
            r = replace(r, key=key)
        out.append(r)
    return out


def _parse_fields(key: str, fields: list[str], ontology: Ontology, temperature: float) -> SingleRunResult:
    if len(fields) != 3:
        return SingleRunResult.failed(key, temperature, "malformed")
    raw_label, raw_score, explanation = (f.strip() for f in fields)
    label = ontology.resolve(raw_label)
    if label is None:
        return SingleRunResult(key, None, 0.0, explanation, temperature, False, "unknown_label")
    try:
        score = float(raw_score)
    except ValueError:
        return SingleRunResult(key, None, 0.0, explanation, temperature, False, "bad_score")
    if math.isnan(score) or not 0.0 <= score <= 1.0:
        return SingleRunResult(key, None, 0.0, explanation, temperature, False, "bad_score")
    return SingleRunResult(key, label, score, explanation, temperature, True)
