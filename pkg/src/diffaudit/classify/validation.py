"""Accuracy and coverage of classifier output against a hand-labeled sample."""

from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from ..ontology import Ontology
from .prompt import SingleRunResult
from .vote import VotedLabel, majority_vote

__all__ = [
    "LabeledSample",
    "load_labeled_sample",
    "sample_keys",
    "ThresholdResult",
    "AccuracyReport",
    "AccuracyTable",
    "validate_against_sample",
    "validation_table",
    "DEFAULT_THRESHOLDS",
]

DEFAULT_THRESHOLDS = (0.7, 0.8, 0.9)


@dataclass(frozen=True)
class LabeledSample:
    items: tuple[tuple[str, str], ...]

    def __len__(self) -> int:
        return len(self.items)

    @property
    def keys(self) -> list[str]:
        return [k for k, _ in self.items]


def load_labeled_sample(path: str | Path, ontology: Ontology) -> LabeledSample:
    """CSV with a ``key,label`` header; every label must be a level-3 ontology label."""
    items = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.DictReader(fh), start=2):
            label = ontology.resolve(row.get("label") or "")
            if label is None:
                raise ValueError(f"{path}:{i}: label {row.get('label')!r} is not in the ontology")
            items.append((row["key"], label))
    return LabeledSample(tuple(items))


def sample_keys(keys: Iterable[str], fraction: float = 0.1, seed: int = 0) -> list[str]:
    """Uniform random sample of distinct keys, reproducible from ``seed``."""
    pool = sorted(set(keys))
    if not pool:
        return []
    k = min(len(pool), max(1, round(fraction * len(pool))))
    return sorted(random.Random(seed).sample(pool, k))


@dataclass(frozen=True)
class ThresholdResult:
    threshold: float
    accuracy: Optional[float]  # None when nothing is kept
    labeled: int


@dataclass(frozen=True)
class AccuracyReport:
    method: str
    n: int
    accuracy: float
    thresholds: tuple[ThresholdResult, ...]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n": self.n,
            "accuracy": self.accuracy,
            "thresholds": [
                {"threshold": t.threshold, "accuracy": t.accuracy, "labeled": t.labeled}
                for t in self.thresholds
            ],
        }


def validate_against_sample(
    sample: LabeledSample,
    voted: Mapping[str, Optional[VotedLabel]],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    method: str = "",
) -> AccuracyReport:
    """Overall accuracy (abstentions count as wrong) plus accuracy and kept count per threshold."""
    missing = [k for k, _ in sample.items if k not in voted]
    if missing:
        raise KeyError(f"sample keys without a classification result: {missing[:5]}")
    n = len(sample)
    outcomes = []
    for key, truth in sample.items:
        v = voted[key]
        outcomes.append((v, v is not None and v.label == truth))
    overall = sum(ok for _, ok in outcomes) / n if n else 0.0
    rows = []
    for theta in thresholds:
        kept = [ok for v, ok in outcomes if v is not None and v.confidence >= theta]
        rows.append(ThresholdResult(theta, sum(kept) / len(kept) if kept else None, len(kept)))
    return AccuracyReport(method, n, overall, tuple(rows))


def _fmt(x: Optional[float]) -> str:
    return "n/a" if x is None else f"{x:.2f}"


@dataclass(frozen=True)
class AccuracyTable:
    """Rows of reports sharing thresholds; renders as Accuracy plus (Accuracy, Labeled) pairs."""

    reports: tuple[AccuracyReport, ...]

    @property
    def thresholds(self) -> tuple[float, ...]:
        return tuple(t.threshold for t in self.reports[0].thresholds) if self.reports else ()

    def header(self) -> list[str]:
        cols = ["Method", "Accuracy"]
        for t in self.thresholds:
            cols += [f"Confidence {t:g} Accuracy", f"Confidence {t:g} Labeled"]
        return cols

    def rows(self) -> list[list[str]]:
        out = []
        for r in self.reports:
            row = [r.method, _fmt(r.accuracy)]
            for t in r.thresholds:
                row += [_fmt(t.accuracy), str(t.labeled)]
            out.append(row)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        w.writerows(self.rows())
        return buf.getvalue()

    def to_text(self) -> str:
        groups = ["Temperature or Method", "Accuracy"] + [f"Confidence {t:g}" for t in self.thresholds]
        sub = ["", ""] + ["Accuracy  Labeled"] * len(self.thresholds)
        widths = [max(22, max((len(r[0]) for r in self.rows()), default=0)), 8] + [17] * len(self.thresholds)
        lines = [
            " | ".join(g.ljust(w) for g, w in zip(groups, widths)).rstrip(),
            " | ".join(s.ljust(w) for s, w in zip(sub, widths)).rstrip(),
            "-+-".join("-" * w for w in widths),
        ]
        for row in self.rows():
            cells = [row[0].ljust(widths[0]), row[1].ljust(widths[1])]
            for i in range(len(self.thresholds)):
                acc, lab = row[2 + 2 * i], row[3 + 2 * i]
                cells.append(f"{acc:<8}  {lab:>7}".ljust(17))
            lines.append(" | ".join(cells).rstrip())
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"thresholds": list(self.thresholds), "rows": [r.to_dict() for r in self.reports]}


def validation_table(
    sample: LabeledSample,
    runs: Mapping[str, Sequence[SingleRunResult]],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> AccuracyTable:
    """One row per temperature, then Majority-Max and Majority-Avg."""
    temps = sorted({r.temperature for rs in runs.values() for r in rs})
    reports = []
    for t in temps:
        voted = {}
        for key, _ in sample.items:
            hit = [r for r in runs.get(key, ()) if r.temperature == t and r.parse_ok]
            voted[key] = (
                VotedLabel(key, hit[0].label, hit[0].confidence, f"t={t:g}", 1, 1) if hit else None
            )
        reports.append(validate_against_sample(sample, voted, thresholds, method=f"{t:g}"))
    for mode, name in (("majority_max", "Majority-Max"), ("majority_avg", "Majority-Avg")):
        voted = {k: majority_vote(runs[k], mode) if runs.get(k) else None for k, _ in sample.items}
        reports.append(validate_against_sample(sample, voted, thresholds, method=name))
    return AccuracyTable(tuple(reports))
