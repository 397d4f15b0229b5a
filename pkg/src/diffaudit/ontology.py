"""Four-level data-type ontology: level-1 kinds, level-2 groups, level-3 labels, level-4 examples.

The default ontology ships as ``data/ontology.json``. Its schema::

    {
      "name": "...",
      "level1": [
        {"name": "Identifiers",
         "level2": [
           {"name": "Personal Identifiers",
            "level3": [{"name": "Name", "examples": ["first and last name", ...]}]}
         ]},
        {"name": "Personal Information", "level2": [...]}
      ]
    }

Level-1 names are fixed to ``Identifiers`` and ``Personal Information``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Mapping, Union

__all__ = [
    "LabelKind",
    "DataTypeLabel",
    "Ontology",
    "OntologyError",
    "UnknownLabelError",
    "load_ontology",
    "default_ontology_path",
    "canonical",
]


class OntologyError(ValueError):
    """Raised when an ontology document violates the schema or its invariants."""


class UnknownLabelError(KeyError):
    """Raised when a label is not part of the loaded ontology."""


class LabelKind(str, enum.Enum):
    IDENTIFIERS = "Identifiers"
    PERSONAL_INFORMATION = "Personal Information"


def canonical(name: str) -> str:
    """Matching form of a label: trimmed, inner whitespace collapsed, casefolded."""
    return " ".join(name.split()).casefold()


@dataclass(frozen=True)
class DataTypeLabel:
    name: str
    level2: str
    kind: LabelKind
    examples: tuple[str, ...]


@dataclass(frozen=True)
class Ontology:
    """Immutable, validated ontology. Build with :func:`load_ontology` or :meth:`from_dict`."""

    name: str
    level1: tuple[str, ...]
    level2: tuple[str, ...]
    labels: tuple[DataTypeLabel, ...]
    level2_kind: Mapping[str, LabelKind] = field(repr=False, compare=False)
    _index: Mapping[str, DataTypeLabel] = field(repr=False, compare=False)

    # construction

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Ontology":
        if not isinstance(doc, Mapping) or not isinstance(doc.get("level1"), list):
            raise OntologyError("ontology document must be an object with a 'level1' array")

        level1_names: list[str] = []
        level2_names: list[str] = []
        level2_kind: dict[str, LabelKind] = {}
        labels: list[DataTypeLabel] = []
        index: dict[str, DataTypeLabel] = {}
        example_owner: dict[str, str] = {}

        for l1 in doc["level1"]:
            l1_name = _name_of(l1, "level-1")
            try:
                kind = LabelKind(l1_name)
            except ValueError:
                raise OntologyError(
                    f"level-1 category {l1_name!r} is not one of "
                    f"{[k.value for k in LabelKind]}"
                ) from None
            if l1_name in level1_names:
                raise OntologyError(f"duplicate level-1 category {l1_name!r}")
            level1_names.append(l1_name)

            for l2 in _children(l1, "level2", l1_name):
                l2_name = _name_of(l2, "level-2")
                if "examples" in l2:
                    raise OntologyError(
                        f"examples under level-2 {l2_name!r} have no level-3 parent"
                    )
                if canonical(l2_name) in {canonical(n) for n in level2_names}:
                    raise OntologyError(f"duplicate level-2 category {l2_name!r}")
                level2_names.append(l2_name)
                level2_kind[l2_name] = kind

                for l3 in _children(l2, "level3", l2_name):
                    l3_name = _name_of(l3, "level-3")
                    key = canonical(l3_name)
                    if key in index:
                        raise OntologyError(f"duplicate level-3 label {l3_name!r}")
                    examples = l3.get("examples", [])
                    if not isinstance(examples, list) or not all(
                        isinstance(e, str) and e.strip() for e in examples
                    ):
                        raise OntologyError(f"examples of {l3_name!r} must be non-empty strings")
                    normalized = []
                    for example in examples:
                        ex = " ".join(example.split()).lower()
                        if ex in example_owner:
                            raise OntologyError(
                                f"example {ex!r} listed under both "
                                f"{example_owner[ex]!r} and {l3_name!r}"
                            )
                        example_owner[ex] = l3_name
                        normalized.append(ex)
                    label = DataTypeLabel(l3_name.strip(), l2_name, kind, tuple(normalized))
                    labels.append(label)
                    index[key] = label

        if sorted(level1_names) != sorted(k.value for k in LabelKind):
            raise OntologyError(
                f"ontology must define exactly the level-1 categories "
                f"{[k.value for k in LabelKind]}, got {level1_names}"
            )
        return cls(
            name=str(doc.get("name", "")),
            level1=tuple(level1_names),
            level2=tuple(level2_names),
            labels=tuple(labels),
            level2_kind=level2_kind,
            _index=index,
        )

    # queries

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[DataTypeLabel]:
        return iter(self.labels)

    def __contains__(self, name: object) -> bool:
        return isinstance(name, str) and canonical(name) in self._index

    @property
    def label_names(self) -> tuple[str, ...]:
        return tuple(label.name for label in self.labels)

    def get(self, name: str) -> DataTypeLabel:
        try:
            return self._index[canonical(name)]
        except KeyError:
            raise UnknownLabelError(name) from None

    def resolve(self, name: str) -> str | None:
        """Canonical spelling of ``name`` if it is a level-3 label, else None."""
        label = self._index.get(canonical(name))
        return label.name if label else None

    def abstract_to_level2(self, name: str) -> str:
        return self.get(name).level2

    def label_kind(self, name: str) -> LabelKind:
        return self.get(name).kind

    def labels_in(self, level2: str) -> tuple[str, ...]:
        return tuple(label.name for label in self.labels if label.level2 == level2)

    def is_level2(self, name: str) -> bool:
        return name in self.level2_kind


def _name_of(node: object, level: str) -> str:
    if not isinstance(node, Mapping) or not isinstance(node.get("name"), str) or not node["name"].strip():
        raise OntologyError(f"every {level} entry needs a non-empty 'name'")
    return node["name"].strip()


def _children(node: Mapping, key: str, parent: str) -> list:
    children = node.get(key)
    if not isinstance(children, list) or not children:
        raise OntologyError(f"{parent!r} needs a non-empty {key!r} array")
    return children


def default_ontology_path() -> Path:
    return Path(str(resources.files("diffaudit") / "data" / "ontology.json"))


def load_ontology(path: Union[str, Path, None] = None) -> Ontology:
    """Load and validate an ontology file; ``None`` loads the shipped default.

    Raises FileNotFoundError for a missing file and OntologyError for any
    schema or invariant violation.
    """
    path = Path(path) if path is not None else default_ontology_path()
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise OntologyError(f"{path}: not valid JSON ({exc})") from None
    return Ontology.from_dict(doc)
