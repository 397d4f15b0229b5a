"""Which third parties receive linkable data: an identifier plus personal information.

Linkability is structural. A destination eSLD is linkable within a (service,
trace category) cell when the level-3 categories it received include at least
one Identifiers-kind label and one Personal Information-kind label.
"""

from __future__ import annotations

import csv
import io
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

from .flows import DataFlow
from .ingest import TRACE_CATEGORIES
from .ontology import LabelKind, Ontology

__all__ = [
    "LinkabilitySet",
    "is_linkable",
    "linkable_sets",
    "count_linkable_third_parties",
    "largest_and_common_sets",
    "LargestSets",
    "OrgRank",
    "top_ats_orgs",
    "alluvial_edges",
    "cross_context_annex",
    "counts_to_csv",
    "edges_to_csv",
    "linkability_report",
]


@dataclass(frozen=True)
class LinkabilitySet:
    service: str
    trace_category: str
    dest_esld: str
    is_ats: bool
    owner: Optional[str]
    categories: frozenset[str]
    linkable: bool
    occurrence_count: int = 0
    fqdns: tuple[str, ...] = ()

    def sort_key(self) -> tuple:
        return (self.service, self.trace_category, self.dest_esld)

    def to_dict(self) -> dict:
        return {
            "service": self.service,
            "trace_category": self.trace_category,
            "dest_esld": self.dest_esld,
            "is_ats": self.is_ats,
            "owner": self.owner,
            "categories": sorted(self.categories),
            "linkable": self.linkable,
            "occurrence_count": self.occurrence_count,
            "fqdns": list(self.fqdns),
        }


def is_linkable(categories: Iterable[str], ontology: Ontology) -> bool:
    kinds = {ontology.label_kind(c) for c in categories}
    return LabelKind.IDENTIFIERS in kinds and LabelKind.PERSONAL_INFORMATION in kinds


def linkable_sets(flows: Iterable[DataFlow], ontology: Ontology) -> list[LinkabilitySet]:
    """Group third-party flows (ATS or not) by (service, trace category, eSLD)."""
    groups: dict[tuple[str, str, str], list[DataFlow]] = defaultdict(list)
    for f in flows:
        if f.dest.party == "third":
            groups[(f.service, f.trace_category, f.dest.esld)].append(f)
    out = []
    for (service, trace, esld), fs in sorted(groups.items()):
        cats = frozenset(f.category3 for f in fs)
        owners = sorted({f.dest.owner for f in fs if f.dest.owner})
        out.append(LinkabilitySet(
            service=service,
            trace_category=trace,
            dest_esld=esld,
            is_ats=any(f.dest.ats for f in fs),
            owner=owners[0] if owners else None,
            categories=cats,
            linkable=is_linkable(cats, ontology),
            occurrence_count=sum(f.occurrence_count for f in fs),
            fqdns=tuple(sorted({q for f in fs for q in f.fqdns})),
        ))
    return out


def count_linkable_third_parties(
    sets: Iterable[LinkabilitySet], services: Iterable[str] | None = None
) -> dict[tuple[str, str], int]:
    """Distinct linkable eSLDs per (service, trace category); listed services get zero-filled cells."""
    sets = list(sets)
    names = sorted(set(services or ()) | {s.service for s in sets})
    counts = {(svc, t): set() for svc in names for t in TRACE_CATEGORIES}
    for s in sets:
        if s.linkable:
            counts.setdefault((s.service, s.trace_category), set()).add(s.dest_esld)
    return {cell: len(v) for cell, v in sorted(counts.items())}


@dataclass(frozen=True)
class LargestSets:
    service: str
    trace_category: str
    size: int
    sets: tuple[tuple[str, tuple[str, ...]], ...]  # (eSLD, sorted categories)

    def to_dict(self) -> dict:
        return {
            "service": self.service,
            "trace_category": self.trace_category,
            "size": self.size,
            "sets": [{"dest_esld": e, "categories": list(c)} for e, c in self.sets],
        }


def largest_and_common_sets(
    sets: Iterable[LinkabilitySet],
) -> tuple[list[LargestSets], list[tuple[tuple[str, ...], int]]]:
    """Largest linkable set per cell (ties all listed) and the corpus-wide modal set(s).

    The modal result lists every categories set reaching the top count, with
    that count, sorted.
    """
    cells: dict[tuple[str, str], list[LinkabilitySet]] = defaultdict(list)
    modal: Counter = Counter()
    for s in sets:
        if not s.linkable:
            continue
        cells[(s.service, s.trace_category)].append(s)
        modal[tuple(sorted(s.categories))] += 1
    largest = []
    for (service, trace), ss in sorted(cells.items()):
        size = max(len(s.categories) for s in ss)
        members = tuple(sorted(
            (s.dest_esld, tuple(sorted(s.categories))) for s in ss if len(s.categories) == size
        ))
        largest.append(LargestSets(service, trace, size, members))
    if not modal:
        return largest, []
    top = max(modal.values())
    return largest, sorted((c, n) for c, n in modal.items() if n == top)


@dataclass(frozen=True)
class OrgRank:
    service: str
    trace_category: str
    organization: str
    weight: int
    rank: int

    def to_dict(self) -> dict:
        return {"service": self.service, "trace_category": self.trace_category,
                "organization": self.organization, "weight": self.weight, "rank": self.rank}


def top_ats_orgs(sets: Iterable[LinkabilitySet], n: int = 10) -> list[OrgRank]:
    """Organizations behind linkable ATS sets, ranked by summed flow occurrences, top ``n`` per cell.

    Unknown owners are grouped under their eSLD. Ties rank by organization name.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    weights: dict[tuple[str, str], Counter] = defaultdict(Counter)
    for s in sets:
        if s.linkable and s.is_ats:
            weights[(s.service, s.trace_category)][s.owner or s.dest_esld] += s.occurrence_count
    out = []
    for (service, trace), counter in sorted(weights.items()):
        ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:n]
        out.extend(OrgRank(service, trace, org, w, i + 1) for i, (org, w) in enumerate(ranked))
    return out


def alluvial_edges(ranks: Iterable[OrgRank]) -> list[tuple[str, str, int]]:
    """(source, organization, weight) edges with source ``service/trace_category``."""
    return [(f"{r.service}/{r.trace_category}", r.organization, r.weight) for r in ranks]


def cross_context_annex(sets: Iterable[LinkabilitySet]) -> list[dict]:
    """Destinations receiving linkable data in more than one trace category of a service."""
    seen: dict[tuple[str, str], set] = defaultdict(set)
    for s in sets:
        if s.linkable:
            seen[(s.service, s.dest_esld)].add(s.trace_category)
    order = {t: i for i, t in enumerate(TRACE_CATEGORIES)}
    return [
        {"service": svc, "dest_esld": esld, "trace_categories": sorted(ts, key=order.__getitem__)}
        for (svc, esld), ts in sorted(seen.items())
        if len(ts) > 1
    ]


def counts_to_csv(counts: Mapping[tuple[str, str], int]) -> str:
    """One row per service, one column per trace category."""
    services = sorted({s for s, _ in counts})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["service", *TRACE_CATEGORIES])
    for svc in services:
        w.writerow([svc, *(counts.get((svc, t), 0) for t in TRACE_CATEGORIES)])
    return buf.getvalue()


def edges_to_csv(edges: Sequence[tuple[str, str, int]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "organization", "weight"])
    w.writerows(edges)
    return buf.getvalue()


def linkability_report(
    flows: Iterable[DataFlow],
    ontology: Ontology,
    *,
    top_n: int = 10,
    services: Iterable[str] | None = None,
) -> dict:
    """Everything the linkability stage writes, as plain data."""
    sets = linkable_sets(flows, ontology)
    counts = count_linkable_third_parties(sets, services)
    largest, common = largest_and_common_sets(sets)
    ranks = top_ats_orgs(sets, top_n)
    return {
        "sets": sets,
        "counts": counts,
        "largest": largest,
        "most_common": common,
        "top_orgs": ranks,
        "edges": alluvial_edges(ranks),
        "cross_context": cross_context_annex(sets),
    }
