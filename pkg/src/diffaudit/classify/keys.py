"""Key canonicalization and the deterministic example-matching baseline."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

from ..ontology import Ontology

__all__ = ["normalize_key", "BaselineMatch", "BaselineMatcher", "baseline_classify",
           "EXACT_CONFIDENCE", "CONTAINS_CONFIDENCE"]

EXACT_CONFIDENCE = 1.0
CONTAINS_CONFIDENCE = 0.7

_CAMEL = re.compile(r"(?<=[a-z0-9])(?=[A-Z])")
_ACRONYM = re.compile(r"(?<=[A-Z])(?=[A-Z][a-z])")
_SEPARATORS = re.compile(r"[\W_]+")
_PAREN = re.compile(r"\(([^)]*)\)")

# dropped from example phrases when comparing token sets
_STOPWORDS = frozenset({"a", "an", "and", "or", "of", "the", "with", "to", "those"})


def normalize_key(raw: str) -> str:
    """Lowercase, space-separated tokens; camelCase, snake_case and kebab-case are split.

    >>> normalize_key("IsOptOutEmailShown")
    'is opt out email shown'
    """
    if raw is None or not str(raw).strip():
        raise ValueError("cannot normalize an empty key")
    s = _CAMEL.sub(" ", str(raw))
    s = _ACRONYM.sub(" ", s)
    s = _SEPARATORS.sub(" ", s)
    return " ".join(s.lower().split())


def _example_forms(example: str) -> list[str]:
    """``"os (operating system)"`` -> ``["os", "operating system"]``."""
    forms = []
    main = _PAREN.sub(" ", example)
    for text in [main] + _PAREN.findall(example):
        if text.strip().startswith("e.g"):
            continue
        try:
            norm = normalize_key(text)
        except ValueError:
            continue
        if norm and norm not in forms:
            forms.append(norm)
    return forms


@dataclass(frozen=True)
class BaselineMatch:
    label: str
    confidence: float
    example: str


class BaselineMatcher:
    """Token-level matcher over the ontology's level-4 examples.

    A key whose tokens all occur in one example form matches with confidence
    1.0 (an identical token set is preferred); otherwise an example form found
    as a contiguous token run inside the key matches with 0.7. Ties go to the
    longest example, then the lexicographically smaller label.
    """

    def __init__(self, ontology: Ontology):
        self.ontology = ontology
        self._forms: list[tuple[str, tuple[str, ...], frozenset, str]] = []
        for label in ontology:
            for example in label.examples:
                for form in _example_forms(example):
                    tokens = tuple(form.split())
                    content = frozenset(t for t in tokens if t not in _STOPWORDS) or frozenset(tokens)
                    self._forms.append((form, tokens, content, label.name))

    def match(self, key: str) -> Optional[BaselineMatch]:
        try:
            norm = normalize_key(key)
        except ValueError:
            return None
        tokens = tuple(norm.split())
        if not tokens:
            return None
        key_set = frozenset(t for t in tokens if t not in _STOPWORDS) or frozenset(tokens)

        exact = [
            (key_set != content, -len(form), label, form)
            for form, _, content, label in self._forms
            if key_set <= content
        ]
        if exact:
            _, _, label, form = min(exact)
            return BaselineMatch(label, EXACT_CONFIDENCE, form)

        contained = [
            (-len(form), label, form)
            for form, ftoks, _, label in self._forms
            if _contains_run(tokens, ftoks)
        ]
        if contained:
            _, label, form = min(contained)
            return BaselineMatch(label, CONTAINS_CONFIDENCE, form)
        return None


def _contains_run(haystack: tuple[str, ...], needle: tuple[str, ...]) -> bool:
    n = len(needle)
    return any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


@lru_cache(maxsize=8)
def _matcher(ontology: Ontology) -> BaselineMatcher:
    return BaselineMatcher(ontology)


def baseline_classify(key: str, ontology: Ontology) -> Optional[tuple[str, float]]:
    """``(label, confidence)`` or None when no example relates to the key."""
    m = _matcher(ontology).match(key)
    return (m.label, m.confidence) if m else None
