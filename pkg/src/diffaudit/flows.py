"""Data flows, age-group merging, differential comparison, audit rules and the flow matrix.

A data flow is a (data-type category, destination) pair seen in one trace
category of one service. Flow identity uses the destination eSLD and label,
so subdomain churn does not split flows; FQDNs are kept as evidence.
"""

from __future__ import annotations

import csv
import io
import json
import unicodedata
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .destinations import DEST_LABELS, DestinationRecord
from .ingest import AGE_GROUPS, TRACE_CATEGORIES, RawKey, RawRequest, extract_raw_keys
from .ontology import LabelKind, Ontology

__all__ = [
    "DataFlow",
    "ContactRecord",
    "build_flows",
    "contact_records",
    "merge_age_traces",
    "platform_presence",
    "presence_mark",
    "jaccard",
    "PairDiff",
    "diff_age_groups",
    "DisclosureSet",
    "load_disclosures",
    "AuditFinding",
    "AuditError",
    "audit",
    "findings_to_csv",
    "FlowMatrix",
    "render_matrix",
    "MARK_SYMBOLS",
    "RULES",
]

WEB_PLATFORMS = frozenset({"web", "desktop"})
MARK_SYMBOLS = {"both": "•", "web_only": "🖱", "mobile_only": "📱", "absent": "—"}
RULES = ("R1_preconsent", "R2_minor_ats_sharing", "R3_undisclosed", "R4_no_age_differentiation")
DIFF_PAIRS = (
    ("child", "adult"),
    ("adolescent", "adult"),
    ("child", "logged_out"),
    ("adolescent", "logged_out"),
    ("adult", "logged_out"),
)


@dataclass(frozen=True)
class DataFlow:
    service: str
    trace_category: str
    category3: str
    category2: str
    dest: DestinationRecord
    occurrence_count: int = 1
    platforms: tuple[str, ...] = ()
    trace_kinds: tuple[str, ...] = ()
    fqdns: tuple[str, ...] = ()

    def __post_init__(self):
        if self.occurrence_count < 1:
            raise ValueError("occurrence_count must be at least 1")
        if self.trace_category not in TRACE_CATEGORIES:
            raise ValueError(f"unknown trace category {self.trace_category!r}")

    def category(self, granularity: str = "level3") -> str:
        return self.category2 if granularity == "level2" else self.category3

    def identity(self, granularity: str = "level3") -> tuple[str, str, str, str, str]:
        return (self.service, self.trace_category, self.category(granularity), self.dest.label,
                self.dest.esld)

    def sort_key(self) -> tuple:
        return self.identity() + (self.platforms, self.trace_kinds)

    def to_dict(self) -> dict:
        return {
            "service": self.service,
            "trace_category": self.trace_category,
            "category3": self.category3,
            "category2": self.category2,
            "dest_label": self.dest.label,
            "esld": self.dest.esld,
            "owner": self.dest.owner,
            "party": self.dest.party,
            "ats": self.dest.ats,
            "occurrence_count": self.occurrence_count,
            "platforms": list(self.platforms),
            "trace_kinds": list(self.trace_kinds),
            "fqdns": list(self.fqdns),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DataFlow":
        fqdns = tuple(d.get("fqdns", ())) or (d["esld"],)
        dest = DestinationRecord(fqdns[0], d["esld"], d.get("owner"), d["party"], bool(d["ats"]))
        return cls(d["service"], d["trace_category"], d["category3"], d["category2"], dest,
                   int(d["occurrence_count"]), tuple(d.get("platforms", ())),
                   tuple(d.get("trace_kinds", ())), fqdns)


@dataclass(frozen=True)
class ContactRecord:
    """Destination contacted by an encrypted request; no payload, so no data flow."""

    service: str
    trace_category: str
    platform: str
    dest: DestinationRecord
    count: int = 1

    def to_dict(self) -> dict:
        return {"service": self.service, "trace_category": self.trace_category,
                "platform": self.platform, "fqdn": self.dest.fqdn, "esld": self.dest.esld,
                "dest_label": self.dest.label, "count": self.count}


def _merge_group(flows: Sequence[DataFlow]) -> DataFlow:
    first = min(flows, key=lambda f: f.dest.fqdn)
    return DataFlow(
        service=first.service,
        trace_category=first.trace_category,
        category3=first.category3,
        category2=first.category2,
        dest=first.dest,
        occurrence_count=sum(f.occurrence_count for f in flows),
        platforms=tuple(sorted({p for f in flows for p in f.platforms})),
        trace_kinds=tuple(sorted({k for f in flows for k in f.trace_kinds})),
        fqdns=tuple(sorted({q for f in flows for q in f.fqdns})),
    )


def build_flows(
    requests: Iterable[RawRequest],
    labels: Mapping[str, str],
    dests: Mapping[str, DestinationRecord],
    ontology: Ontology,
    raw_keys: Optional[Mapping[str, Sequence[RawKey]]] = None,
) -> list[DataFlow]:
    """Cross each request's labeled keys with its destination.

    ``labels`` maps raw key strings to level-3 labels (unlabeled keys are
    absent); ``dests`` maps request ids to destination records. A request
    contributes each of its level-3 categories once. Flows are kept apart per
    trace kind and platform; duplicates sum their occurrence counts.
    Encrypted requests contribute nothing here (see :func:`contact_records`).
    """
    groups: dict[tuple, list[DataFlow]] = defaultdict(list)
    for req in requests:
        if req.encrypted:
            continue
        keys = raw_keys.get(req.request_id, ()) if raw_keys is not None else extract_raw_keys(req)
        categories = sorted({labels[k.key] for k in keys if k.key in labels})
        if not categories:
            continue
        dest = dests[req.request_id]
        meta = req.meta
        for cat3 in categories:
            flow = DataFlow(
                service=meta.service,
                trace_category=meta.trace_category,
                category3=cat3,
                category2=ontology.abstract_to_level2(cat3),
                dest=dest,
                occurrence_count=1,
                platforms=(meta.platform.value,),
                trace_kinds=(meta.trace_kind.value,),
                fqdns=(dest.fqdn,),
            )
            groups[flow.identity() + (flow.platforms, flow.trace_kinds)].append(flow)
    return sorted((_merge_group(g) for g in groups.values()), key=DataFlow.sort_key)


def contact_records(
    requests: Iterable[RawRequest], dests: Mapping[str, DestinationRecord]
) -> list[ContactRecord]:
    counts: dict[tuple, int] = defaultdict(int)
    records: dict[tuple, ContactRecord] = {}
    for req in requests:
        if not req.encrypted:
            continue
        dest = dests[req.request_id]
        k = (req.meta.service, req.meta.trace_category, req.meta.platform.value, dest.fqdn, dest.label)
        counts[k] += 1
        records[k] = ContactRecord(req.meta.service, req.meta.trace_category,
                                   req.meta.platform.value, dest)
    return [
        ContactRecord(r.service, r.trace_category, r.platform, r.dest, counts[k])
        for k, r in sorted(records.items())
    ]


def merge_age_traces(flows: Iterable[DataFlow]) -> list[DataFlow]:
    """Union account-creation and logged-in flows per age group (and across platforms).

    Logged-out flows form their own trace category and stay separate.
    """
    groups: dict[tuple, list[DataFlow]] = defaultdict(list)
    for f in flows:
        groups[f.identity()].append(f)
    return sorted((_merge_group(g) for g in groups.values()), key=DataFlow.sort_key)


def presence_mark(platforms: Iterable[str]) -> str:
    platforms = set(platforms)
    web = bool(platforms & WEB_PLATFORMS)
    mobile = "mobile" in platforms
    if web and mobile:
        return "both"
    if web:
        return "web_only"
    if mobile:
        return "mobile_only"
    return "absent"


def platform_presence(
    flows: Iterable[DataFlow], granularity: str = "level2"
) -> dict[tuple[str, str, str, str], str]:
    """Mark per (service, trace_category, category, dest label); desktop counts as web.

    Cells without flows are absent from the mapping (mark ``absent``).
    """
    platforms: dict[tuple, set] = defaultdict(set)
    for f in flows:
        platforms[(f.service, f.trace_category, f.category(granularity), f.dest.label)].update(f.platforms)
    return {cell: presence_mark(p) for cell, p in sorted(platforms.items())}


# differential comparison


def jaccard(a: Iterable, b: Iterable) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


@dataclass(frozen=True)
class PairDiff:
    service: str
    left: str
    right: str
    jaccard: float
    only_left: tuple[tuple[str, str, str], ...]
    only_right: tuple[tuple[str, str, str], ...]
    shared: int

    def to_dict(self) -> dict:
        return {
            "service": self.service,
            "left": self.left,
            "right": self.right,
            "jaccard": self.jaccard,
            "shared": self.shared,
            "only_left": [list(x) for x in self.only_left],
            "only_right": [list(x) for x in self.only_right],
        }


def _flow_sets(flows: Iterable[DataFlow], granularity: str) -> dict[tuple[str, str], set]:
    sets: dict[tuple[str, str], set] = defaultdict(set)
    for f in flows:
        sets[(f.service, f.trace_category)].add((f.category(granularity), f.dest.label, f.dest.esld))
    return sets


def diff_age_groups(
    flows: Iterable[DataFlow], granularity: str = "level2", services: Iterable[str] | None = None
) -> list[PairDiff]:
    """Set differences and Jaccard similarity for each compared pair of trace categories."""
    flows = list(flows)
    sets = _flow_sets(flows, granularity)
    names = sorted(set(services or ()) | {f.service for f in flows})
    out = []
    for service in names:
        for left, right in DIFF_PAIRS:
            a, b = sets.get((service, left), set()), sets.get((service, right), set())
            out.append(PairDiff(service, left, right, jaccard(a, b), tuple(sorted(a - b)),
                                tuple(sorted(b - a)), len(a & b)))
    return out


# disclosures and audit


class AuditError(ValueError):
    pass


@dataclass(frozen=True)
class DisclosureSet:
    """Allowed (level-2 category, destination label) pairs per service and age group."""

    allowed: Mapping[str, Mapping[str, Mapping[tuple[str, str], str]]] = field(default_factory=dict)

    def services(self) -> list[str]:
        return sorted(self.allowed)

    def permits(self, service: str, age_group: str, category2: str, dest_label: str) -> bool:
        return (category2, dest_label) in self.allowed.get(service, {}).get(age_group, {})

    def citation(self, service: str, age_group: str, category2: str, dest_label: str) -> Optional[str]:
        return self.allowed.get(service, {}).get(age_group, {}).get((category2, dest_label))


def load_disclosures(path: str | Path, ontology: Ontology) -> DisclosureSet:
    """Read ``{"services": {svc: {age_group: [{"category", "destination", "citation"}]}}}``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    services = doc.get("services") if isinstance(doc, dict) else None
    if not isinstance(services, dict):
        raise AuditError(f"{path}: disclosures need a 'services' object")
    allowed: dict = {}
    for service, groups in services.items():
        allowed[service] = {}
        for age_group, pairs in (groups or {}).items():
            if age_group not in AGE_GROUPS:
                raise AuditError(f"{path}: {service}: unknown age group {age_group!r}")
            entries = {}
            for p in pairs:
                cat = p.get("category")
                dest = p.get("destination")
                if not ontology.is_level2(cat):
                    raise AuditError(f"{path}: {service}/{age_group}: {cat!r} is not a level-2 category")
                if dest not in DEST_LABELS:
                    raise AuditError(f"{path}: {service}/{age_group}: unknown destination {dest!r}")
                entries[(cat, dest)] = str(p.get("citation", ""))
            allowed[service][age_group] = entries
    return DisclosureSet(allowed)


_R1_SEVERITY = {"third_ats": "high", "third": "medium", "first_ats": "low", "first": "info"}
_SEVERITY_ORDER = {"high": 0, "medium": 1, "low": 2, "info": 3}


@dataclass(frozen=True)
class AuditFinding:
    rule: str
    severity: str
    service: str
    trace_category: str
    flows: tuple[DataFlow, ...]
    explanation: str
    scores: tuple[tuple[str, float], ...] = ()

    def sort_key(self) -> tuple:
        return (self.service, self.rule, self.trace_category,
                tuple(f.identity() for f in self.flows), self.scores)

    def to_dict(self) -> dict:
        return {
            "rule": self.rule,
            "severity": self.severity,
            "service": self.service,
            "trace_category": self.trace_category,
            "explanation": self.explanation,
            "scores": dict(self.scores),
            "flows": [
                {"category3": f.category3, "category2": f.category2, "dest_label": f.dest.label,
                 "esld": f.dest.esld, "fqdns": list(f.fqdns), "platforms": list(f.platforms),
                 "occurrence_count": f.occurrence_count}
                for f in self.flows
            ],
        }


def audit(
    flows: Iterable[DataFlow],
    disclosures: DisclosureSet | None,
    ontology: Ontology,
    *,
    similarity_threshold: float = 0.9,
    granularity: str = "level2",
    services: Iterable[str] | None = None,
) -> list[AuditFinding]:
    """Evaluate the four audit rules over merged flows.

    R1  every logged-out flow (identifiers and personal information before age
        disclosure and consent); severity by destination label.
    R2  child and adolescent flows to third-party ATS.
    R3  age-specific (category2, destination label) pairs missing from the
        service's disclosures for that age group; one finding per pair.
    R4  per service, Jaccard(child, adult) and Jaccard(adolescent, adult) both
        at or above ``similarity_threshold``; needs all three age groups.
    """
    flows = sorted(flows, key=DataFlow.sort_key)
    disclosures = disclosures or DisclosureSet()
    known = set(services or ()) | {f.service for f in flows}
    unknown = [s for s in disclosures.services() if s not in known]
    if unknown:
        raise AuditError(f"disclosures name unknown services: {unknown}")

    findings: list[AuditFinding] = []
    for f in flows:
        kind = ontology.label_kind(f.category3)
        what = "an identifier" if kind is LabelKind.IDENTIFIERS else "personal information"
        if f.trace_category == "logged_out":
            findings.append(AuditFinding(
                "R1_preconsent", _R1_SEVERITY[f.dest.label], f.service, f.trace_category, (f,),
                f"{f.category3} ({what}) sent to {f.dest.label} {f.dest.esld} while logged out, "
                f"before age disclosure and consent",
            ))
        elif f.trace_category in ("child", "adolescent") and f.dest.label == "third_ats":
            findings.append(AuditFinding(
                "R2_minor_ats_sharing", "high", f.service, f.trace_category, (f,),
                f"{f.category3} ({what}) of a {f.trace_category} user shared with third-party "
                f"ATS {f.dest.esld}",
            ))

    undisclosed: dict[tuple[str, str, str, str], list[DataFlow]] = defaultdict(list)
    for f in flows:
        if f.trace_category in AGE_GROUPS and not disclosures.permits(
            f.service, f.trace_category, f.category2, f.dest.label
        ):
            undisclosed[(f.service, f.trace_category, f.category2, f.dest.label)].append(f)
    for (service, group, cat2, label), offending in sorted(undisclosed.items()):
        findings.append(AuditFinding(
            "R3_undisclosed", "low" if group == "adult" else "medium", service, group,
            tuple(offending),
            f"{cat2} to {label} destinations observed for {group} users but not disclosed "
            f"in the privacy policy",
        ))

    sets = _flow_sets(flows, granularity)
    for service in sorted(known):
        if not all(sets.get((service, g)) for g in AGE_GROUPS):
            continue
        child = jaccard(sets[(service, "child")], sets[(service, "adult")])
        teen = jaccard(sets[(service, "adolescent")], sets[(service, "adult")])
        if child >= similarity_threshold and teen >= similarity_threshold:
            findings.append(AuditFinding(
                "R4_no_age_differentiation", "medium", service, "all", (),
                f"flows barely differ by age: Jaccard child/adult {child:.3f}, "
                f"adolescent/adult {teen:.3f} (threshold {similarity_threshold:g})",
                (("adolescent_vs_adult", teen), ("child_vs_adult", child)),
            ))
    return sorted(findings, key=AuditFinding.sort_key)


def findings_to_csv(findings: Sequence[AuditFinding]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rule", "severity", "service", "trace_category", "category3", "category2",
                "dest_label", "esld", "occurrence_count", "scores", "explanation"])
    for fd in findings:
        scores = ";".join(f"{k}={v:.6f}" for k, v in fd.scores)
        if not fd.flows:
            w.writerow([fd.rule, fd.severity, fd.service, fd.trace_category, "", "", "", "", "",
                        scores, fd.explanation])
        for f in fd.flows:
            w.writerow([fd.rule, fd.severity, fd.service, fd.trace_category, f.category3,
                        f.category2, f.dest.label, f.dest.esld, f.occurrence_count, scores,
                        fd.explanation])
    return buf.getvalue()


# matrix

COLUMN_TITLES = {"first": "Collect 1st", "first_ats": "Collect 1st ATS", "third": "Share 3rd",
                 "third_ats": "Share 3rd ATS"}
GROUP_TITLES = {"child": "Child", "adolescent": "Adolescent", "adult": "Adult",
                "logged_out": "Logged Out"}


def _width(s: str) -> int:
    return sum(2 if unicodedata.east_asian_width(ch) in ("W", "F") else 1 for ch in s)


def _pad(s: str, width: int, align: str = "<") -> str:
    gap = max(0, width - _width(s))
    if align == "^":
        return " " * (gap // 2) + s + " " * (gap - gap // 2)
    return s + " " * gap


@dataclass(frozen=True)
class FlowMatrix:
    """Per service: level-2 rows by (trace category, destination label) columns of presence marks."""

    services: tuple[str, ...]
    rows: tuple[str, ...]
    cells: Mapping[tuple[str, str, str, str], str]

    def mark(self, service: str, trace_category: str, category2: str, dest_label: str) -> str:
        return self.cells.get((service, trace_category, category2, dest_label), "absent")

    def to_dict(self) -> dict:
        return {
            "legend": {m: MARK_SYMBOLS[m] for m in ("both", "web_only", "mobile_only", "absent")},
            "columns": [{"trace_category": g, "dest_label": d, "title": COLUMN_TITLES[d]}
                        for g in TRACE_CATEGORIES for d in DEST_LABELS],
            "services": [
                {
                    "service": s,
                    "rows": [
                        {"category2": r,
                         "cells": [self.mark(s, g, r, d) for g in TRACE_CATEGORIES for d in DEST_LABELS]}
                        for r in self.rows
                    ],
                }
                for s in self.services
            ],
        }

    def to_text(self) -> str:
        label_w = max([len("Data Type")] + [len(r) for r in self.rows])
        cell_w = 3
        group_w = len(DEST_LABELS) * cell_w + (len(DEST_LABELS) - 1)
        abbrev = {"first": "1st", "first_ats": "1A", "third": "3rd", "third_ats": "3A"}
        lines = []
        for s in self.services:
            lines.append(f"Service: {s}")
            lines.append(" " * label_w + " | " + " | ".join(
                _pad(GROUP_TITLES[g], group_w, "^") for g in TRACE_CATEGORIES))
            lines.append(_pad("Data Type", label_w) + " | " + " | ".join(
                " ".join(_pad(abbrev[d], cell_w, "^") for d in DEST_LABELS) for _ in TRACE_CATEGORIES))
            lines.append("-" * label_w + "-+-" + "-+-".join("-" * group_w for _ in TRACE_CATEGORIES))
            for r in self.rows:
                groups = [
                    " ".join(_pad(MARK_SYMBOLS[self.mark(s, g, r, d)], cell_w, "^") for d in DEST_LABELS)
                    for g in TRACE_CATEGORIES
                ]
                lines.append((_pad(r, label_w) + " | " + " | ".join(groups)).rstrip())
            lines.append("")
        lines.append("Columns: 1st = Collect 1st, 1A = Collect 1st ATS, 3rd = Share 3rd, 3A = Share 3rd ATS.")
        lines.append(f"Legend: {MARK_SYMBOLS['both']} both website and mobile, "
                     f"{MARK_SYMBOLS['web_only']} website only, "
                     f"{MARK_SYMBOLS['mobile_only']} mobile only, "
                     f"{MARK_SYMBOLS['absent']} not observed. Desktop traces count as website.")
        lines.append("Age-group columns merge account-creation and logged-in traces. A first-party "
                     "destination on a blocklist is counted only under Collect 1st ATS.")
        return "\n".join(line.rstrip() for line in lines) + "\n"


def render_matrix(
    flows: Iterable[DataFlow], ontology: Ontology, services: Iterable[str] | None = None
) -> FlowMatrix:
    flows = list(flows)
    names = tuple(sorted(set(services or ()) | {f.service for f in flows}))
    return FlowMatrix(names, tuple(ontology.level2), platform_presence(flows, "level2"))
