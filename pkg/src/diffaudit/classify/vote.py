"""Plurality voting over single-run results and confidence thresholding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .prompt import SingleRunResult

__all__ = ["VotedLabel", "VOTE_MODES", "majority_vote", "apply_threshold", "canonical_mode"]

VOTE_MODES = ("majority_max", "majority_avg")


def canonical_mode(mode: str) -> str:
    m = {"max": "majority_max", "avg": "majority_avg"}.get(mode, mode)
    if m not in VOTE_MODES:
        raise ValueError(f"unknown vote mode {mode!r}; expected max or avg")
    return m


@dataclass(frozen=True)
class VotedLabel:
    key: str
    label: str
    confidence: float
    mode: str
    support: int
    n_runs: int = 0
    tied: bool = False

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "label": self.label,
            "confidence": self.confidence,
            "mode": self.mode,
            "support": self.support,
            "n_runs": self.n_runs,
            "tied": self.tied,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VotedLabel":
        return cls(d["key"], d["label"], float(d["confidence"]), d["mode"], int(d["support"]),
                   int(d.get("n_runs", 0)), bool(d.get("tied", False)))


def majority_vote(results: Sequence[SingleRunResult], mode: str = "avg") -> Optional[VotedLabel]:
    """Plurality label among parse_ok runs; None (abstain) if there are none.

    The winner's confidence is the max (``majority_max``) or arithmetic mean
    (``majority_avg``) of the confidences of the runs voting for it. A plurality
    tie goes to the higher aggregated confidence, then the smaller label, and
    is flagged ``tied``.
    """
    mode = canonical_mode(mode)
    if len({r.key for r in results}) > 1:
        raise ValueError("majority_vote expects the runs of a single key")
    votes: dict[str, list[float]] = {}
    for r in results:
        if r.parse_ok and r.label is not None:
            votes.setdefault(r.label, []).append(r.confidence)
    if not votes:
        return None

    def aggregate(confs: list[float]) -> float:
        return max(confs) if mode == "majority_max" else sum(confs) / len(confs)

    top = max(len(c) for c in votes.values())
    leaders = [(-aggregate(c), label) for label, c in votes.items() if len(c) == top]
    neg_conf, label = min(leaders)
    return VotedLabel(
        key=results[0].key,
        label=label,
        confidence=-neg_conf,
        mode=mode,
        support=top,
        n_runs=len(results),
        tied=len(leaders) > 1,
    )


def apply_threshold(voted: Optional[VotedLabel], threshold: float = 0.8) -> bool:
    """True when the vote is kept as a label (confidence at or above the threshold)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return voted is not None and voted.confidence >= threshold
