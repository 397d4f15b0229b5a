"""Run configuration, line-delimited stores and the stage functions behind the CLI.

Output tree under ``output_dir``::

    ingest/requests.jsonl      one request per line with its destination and raw keys
    ingest/stats.csv|.txt      per-service domains, eSLDs, requests, raw keys
    classify/labels.jsonl      voted label per distinct raw key, with single runs
    classify/residual.csv      keys left unlabeled at the threshold
    audit/flows.jsonl, contacts.jsonl, matrix.txt|.json, diff.json, findings.json|.csv
    linkability/counts.csv, sets.json, edges.csv
    validation/report.txt|.csv|.json

Every file embeds the run provenance: a ``provenance`` key in JSON documents, a
first line in JSONL stores, and a leading ``#`` comment line in CSV and text
reports. Text reports carry a compact form with the
input hashes folded into one digest. Provenance holds only input-derived values, so reruns over unchanged
inputs are byte-identical; timestamps and cache counts go to the run log.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Optional, Sequence

from . import __version__
from .classify import (
    ChatCompletionClient,
    DataTypeClassifier,
    RecordingClient,
    ReplayClient,
    RunCache,
    SingleRunResult,
    VotedLabel,
    apply_threshold,
    load_labeled_sample,
    sample_keys,
    validate_against_sample,
    validation_table,
)
from .classify.validation import DEFAULT_THRESHOLDS, AccuracyTable
from .destinations import (
    DestinationCategorizer,
    DestinationRecord,
    EntityMap,
    ServiceProfile,
    load_blocklist,
    load_entity_map,
    load_psl,
)
from .flows import (
    DataFlow,
    audit,
    build_flows,
    contact_records,
    diff_age_groups,
    findings_to_csv,
    load_disclosures,
    merge_age_traces,
    render_matrix,
)
from .ingest import RawKey, RawRequest, extract_raw_keys, load_manifest, parse_capture_bundle
from .linkability import counts_to_csv, edges_to_csv, linkability_report
from .ontology import Ontology, load_ontology

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "StoreError",
    "RunConfig",
    "load_config",
    "Pipeline",
]


class ConfigError(ValueError):
    pass


class StoreError(RuntimeError):
    pass


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class RunConfig:
    """Pipeline settings; relative paths resolve against the config file's directory."""

    base: Path
    corpus: Path
    output_dir: Path
    ontology: Optional[Path] = None
    psl: Optional[Path] = None
    blocklists: list[Path] = field(default_factory=list)
    entity_map: Optional[Path] = None
    entity_overrides: Optional[Path] = None
    profiles: dict[str, ServiceProfile] = field(default_factory=dict)
    profiles_path: Optional[Path] = None
    disclosures: Optional[Path] = None
    include_headers: bool = False
    include_cookies: bool = False
    mode: str = "baseline"
    model: str = "gpt-4"
    endpoint: Optional[str] = None
    temperatures: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    batch_size: int = 40
    threshold: float = 0.8
    vote: str = "avg"
    retries: int = 3
    backoff: float = 1.0
    parallelism: int = 1
    replay_dir: Optional[Path] = None
    record_dir: Optional[Path] = None
    cache: Optional[Path] = None
    similarity_threshold: float = 0.9
    granularity: str = "level2"
    top_n: int = 10
    seed: int = 0
    validation_sample: Optional[Path] = None
    validation_fraction: float = 0.1
    raw: dict = field(default_factory=dict)

    def input_files(self) -> list[Path]:
        files = [self.corpus, self.ontology, self.psl, *self.blocklists, self.entity_map,
                 self.entity_overrides, self.profiles_path, self.disclosures]
        return [f for f in files if f is not None]

    def validate(self) -> None:
        for f in self.input_files():
            if not f.exists():
                raise ConfigError(f"referenced file does not exist: {f}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("classifier.threshold must lie in [0, 1]")
        if not self.temperatures or any(not 0.0 <= t <= 1.0 for t in self.temperatures):
            raise ConfigError("classifier.temperatures must be a non-empty subset of [0, 1]")
        if self.vote not in ("avg", "max"):
            raise ConfigError("classifier.vote must be 'avg' or 'max'")
        if self.granularity not in ("level2", "level3"):
            raise ConfigError("audit.granularity must be 'level2' or 'level3'")
        if self.replay_dir is not None and not self.replay_dir.is_dir():
            raise ConfigError(f"replay directory does not exist: {self.replay_dir}")

    def identity(self) -> dict:
        """Settings that affect report content (output location excluded)."""
        doc = dict(self.raw)
        doc.pop("output_dir", None)
        doc["classifier"] = {
            **doc.get("classifier", {}),
            "threshold": self.threshold,
            "vote": self.vote,
            "mode": self.mode,
            "replay": self.replay_dir is not None,
        }
        doc["classifier"].pop("replay_dir", None)
        doc["classifier"].pop("cache", None)
        return doc


def load_config(
    path: str | Path,
    *,
    out: str | Path | None = None,
    replay: str | Path | None = None,
    record: str | Path | None = None,
    threshold: float | None = None,
    vote: str | None = None,
) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    base = path.resolve().parent

    def rel(value) -> Optional[Path]:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else base / p

    if "corpus" not in raw:
        raise ConfigError(f"{path}: 'corpus' is required")
    clf = raw.get("classifier", {}) or {}
    aud = raw.get("audit", {}) or {}
    val = raw.get("validation", {}) or {}
    ext = raw.get("extract", {}) or {}

    profiles_path = None
    profiles_doc = raw.get("profiles", {}) or {}
    if isinstance(profiles_doc, str):
        profiles_path = rel(profiles_doc)
        try:
            profiles_doc = json.loads(profiles_path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"profiles file not found: {profiles_path}") from None
    profiles = {name: ServiceProfile.from_dict(name, d) for name, d in sorted(profiles_doc.items())}

    cfg = RunConfig(
        base=base,
        corpus=rel(raw["corpus"]),
        output_dir=Path(out) if out is not None else rel(raw.get("output_dir", "out")),
        ontology=rel(raw.get("ontology")),
        psl=rel(raw.get("psl")),
        blocklists=[rel(b) for b in raw.get("blocklists", [])],
        entity_map=rel(raw.get("entity_map")),
        entity_overrides=rel(raw.get("entity_overrides")),
        profiles=profiles,
        profiles_path=profiles_path,
        disclosures=rel(raw.get("disclosures")),
        include_headers=bool(ext.get("include_headers", False)),
        include_cookies=bool(ext.get("include_cookies", False)),
        mode=clf.get("mode", "baseline"),
        model=clf.get("model", "gpt-4"),
        endpoint=clf.get("endpoint"),
        temperatures=tuple(float(t) for t in clf.get("temperatures", (0.0, 0.25, 0.5, 0.75, 1.0))),
        batch_size=int(clf.get("batch_size", 40)),
        threshold=float(threshold if threshold is not None else clf.get("threshold", 0.8)),
        vote=vote or clf.get("vote", "avg"),
        retries=int(clf.get("retries", 3)),
        backoff=float(clf.get("backoff", 1.0)),
        parallelism=int(clf.get("parallelism", 1)),
        replay_dir=Path(replay) if replay is not None else rel(clf.get("replay_dir")),
        record_dir=Path(record) if record is not None else None,
        cache=rel(clf.get("cache")),
        similarity_threshold=float(aud.get("similarity_threshold", 0.9)),
        granularity=aud.get("granularity", "level2"),
        top_n=int((raw.get("linkability", {}) or {}).get("top_n", 10)),
        seed=int(raw.get("seed", 0)),
        validation_sample=rel(val.get("sample")),
        validation_fraction=float(val.get("fraction", 0.1)),
        raw=raw,
    )
    cfg.validate()
    return cfg


# store helpers


def _json_dump(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _compact(provenance: Mapping) -> dict:
    """Single-line form: the input and blocklist hash maps folded into one digest."""
    folded = {k: v for k, v in provenance.items() if not isinstance(v, dict)}
    maps = {k: v for k, v in provenance.items() if isinstance(v, dict)}
    folded["inputs_sha256"] = hashlib.sha256(_canonical_json(maps).encode()).hexdigest()
    return folded


def _commented(provenance: Mapping, text: str) -> str:
    return "# provenance: " + _canonical_json(_compact(provenance)) + "\n" + text


def _write_jsonl(path: Path, provenance: Mapping, rows: Iterable[Mapping]) -> None:
    lines = [_canonical_json({"provenance": provenance})]
    lines.extend(_canonical_json(r) for r in rows)
    _write(path, "\n".join(lines) + "\n")


def _read_jsonl(path: Path) -> Iterator[dict]:
    if not path.exists():
        raise StoreError(f"missing store {path}; run the earlier stage first")
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            doc = json.loads(line)
            if i == 0 and "provenance" in doc:
                continue
            yield doc


@dataclass
class IngestedRequest:
    request: RawRequest
    dest: DestinationRecord
    keys: tuple[RawKey, ...]


class Pipeline:
    """Stage runner over one :class:`RunConfig`.

    ``client`` overrides the chat client the config would build (replay or live).
    """

    def __init__(self, config: RunConfig, *, run_log: Optional[Path] = None, client=None):
        self.config = config
        self.client = client
        self.out = config.output_dir
        self.run_log = run_log
        self._ontology: Optional[Ontology] = None
        self._provenance: Optional[dict] = None

    # shared inputs

    @property
    def ontology(self) -> Ontology:
        if self._ontology is None:
            self._ontology = load_ontology(self.config.ontology)
        return self._ontology

    def provenance(self) -> dict:
        if self._provenance is None:
            cfg = self.config
            inputs = {}
            for f in cfg.input_files():
                if f.is_dir():
                    continue
                inputs[self._relname(f)] = _sha256_file(f)
            _, traces = load_manifest(cfg.corpus)
            for file, _ in traces:
                if file.exists():
                    inputs[self._relname(file)] = _sha256_file(file)
            self._provenance = {
                "tool": "diffaudit",
                "version": __version__,
                "config_sha256": hashlib.sha256(_canonical_json(cfg.identity()).encode()).hexdigest(),
                "inputs": dict(sorted(inputs.items())),
            }
        return self._provenance

    def _relname(self, path: Path) -> str:
        try:
            return path.resolve().relative_to(self.config.base).as_posix()
        except ValueError:
            return path.name

    def log(self, stage: str, **fields) -> None:
        """Volatile run facts (time, cache counts) that stay out of the reports."""
        entry = {"stage": stage, "time": time.strftime("%Y-%m-%dT%H:%M:%S%z"), **fields}
        line = _canonical_json(entry)
        logger.info(line)
        if self.run_log is not None:
            self.run_log.parent.mkdir(parents=True, exist_ok=True)
            with open(self.run_log, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def _categorizer(self) -> DestinationCategorizer:
        cfg = self.config
        entity_map = load_entity_map(cfg.entity_map) if cfg.entity_map else EntityMap()
        if cfg.entity_overrides:
            entity_map = entity_map.with_overrides(load_entity_map(cfg.entity_overrides))
        blocklists = [load_blocklist(b) for b in cfg.blocklists]
        return DestinationCategorizer(
            profiles=cfg.profiles, entity_map=entity_map, blocklists=blocklists, psl=load_psl(cfg.psl)
        ).fit()

    # ingest

    def ingest(self) -> dict:
        cfg = self.config
        stats: Counter = Counter()
        requests = parse_capture_bundle(cfg.corpus, stats=stats)
        categorizer = self._categorizer()
        prov = {**self.provenance(),
                "blocklists": {b.name: b.sha256 for b in categorizer.blocklists_}}
        rows = []
        per_service: dict[str, dict[str, set]] = {}
        n_requests: Counter = Counter()
        for req in requests:
            dest = categorizer.categorize(req.meta.service, req.url)
            keys = extract_raw_keys(req, include_headers=cfg.include_headers,
                                    include_cookies=cfg.include_cookies, stats=stats)
            rows.append({"request": req.to_dict(), "dest": dest.to_dict(),
                         "keys": [k.to_dict() for k in keys]})
            s = per_service.setdefault(req.meta.service, {"fqdn": set(), "esld": set(), "keys": set()})
            s["fqdn"].add(dest.fqdn)
            s["esld"].add(dest.esld)
            s["keys"].update(k.key for k in keys)
            n_requests[req.meta.service] += 1
        _write_jsonl(self.out / "ingest" / "requests.jsonl", prov, rows)

        table = [["Service", "Domains", "eSLDs", "Requests", "Raw Keys"]]
        for svc in sorted(per_service):
            s = per_service[svc]
            table.append([svc, len(s["fqdn"]), len(s["esld"]), n_requests[svc], len(s["keys"])])
        union = {k: set().union(*(s[k] for s in per_service.values())) for k in ("fqdn", "esld", "keys")}
        table.append(["Total", len(union["fqdn"]), len(union["esld"]), sum(n_requests.values()),
                      len(union["keys"])])
        _write(self.out / "ingest" / "stats.csv",
               _commented(prov, "\n".join(",".join(map(str, r)) for r in table) + "\n"))
        _write(self.out / "ingest" / "stats.txt", _commented(prov, _text_table(table)))
        summary = {"requests": len(requests), "services": len(per_service),
                   "counters": dict(sorted(stats.items()))}
        self.log("ingest", **summary)
        return summary

    def load_ingested(self) -> list[IngestedRequest]:
        out = []
        for doc in _read_jsonl(self.out / "ingest" / "requests.jsonl"):
            req = RawRequest.from_dict(doc["request"])
            keys = tuple(RawKey(k["key"], k["path"], k["source"], k.get("request", req.request_id))
                         for k in doc["keys"])
            out.append(IngestedRequest(req, DestinationRecord.from_dict(doc["dest"]), keys))
        return out

    # classify

    def _client(self):
        cfg = self.config
        if cfg.mode == "baseline":
            return None
        if self.client is not None:
            client = self.client
        elif cfg.replay_dir is not None:
            client = ReplayClient(cfg.replay_dir)
        else:
            try:
                client = ChatCompletionClient(cfg.endpoint) if cfg.endpoint else ChatCompletionClient()
            except ValueError as exc:
                raise ConfigError(f"live classification needs credentials: {exc}") from None
        if cfg.record_dir is not None:
            client = RecordingClient(client, cfg.record_dir)
        return client

    def _classifier(self) -> DataTypeClassifier:
        cfg = self.config
        return DataTypeClassifier(
            ontology=self.ontology, mode=cfg.mode, client=self._client(), model=cfg.model,
            temperatures=cfg.temperatures, vote=cfg.vote, threshold=cfg.threshold,
            batch_size=cfg.batch_size, retries=cfg.retries, backoff=cfg.backoff,
            parallelism=cfg.parallelism, cache=RunCache(cfg.cache),
        ).fit()

    def classify(self) -> dict:
        cfg = self.config
        keys = sorted({k.key for item in self.load_ingested() for k in item.keys})
        clf = self._classifier()
        voted = clf.vote_keys(keys)
        if clf.runner_ is not None:
            clf.runner_.cache.save()
        prov = self.provenance()
        rows, residual = [], []
        for key in keys:
            v = voted[key]
            kept = apply_threshold(v, cfg.threshold)
            rows.append({
                "key": key,
                "voted": v.to_dict() if v is not None else None,
                "label": v.label if kept else None,
                "runs": [r.to_dict() for r in clf.runs_.get(key, ())],
            })
            if not kept:
                residual.append((key, v))
        _write_jsonl(self.out / "classify" / "labels.jsonl", prov, rows)
        lines = ["key,best_label,confidence"]
        for key, v in residual:
            lines.append(",".join([_csv_cell(key), _csv_cell(v.label if v else ""),
                                   f"{v.confidence:.6f}" if v else ""]))
        _write(self.out / "classify" / "residual.csv", _commented(prov, "\n".join(lines) + "\n"))
        summary = {"keys": len(keys), "labeled": len(keys) - len(residual), "residual": len(residual)}
        self.log("classify", **summary, **clf.stats_.to_dict())
        return summary

    def load_labels(self) -> dict[str, str]:
        return {d["key"]: d["label"] for d in _read_jsonl(self.out / "classify" / "labels.jsonl")
                if d["label"] is not None}

    # flows, audit, linkability

    def flows(self) -> tuple[list[DataFlow], list, list[str]]:
        items = self.load_ingested()
        labels = self.load_labels()
        requests = [i.request for i in items]
        dests = {i.request.request_id: i.dest for i in items}
        raw_keys = {i.request.request_id: i.keys for i in items}
        flows = build_flows(requests, labels, dests, self.ontology, raw_keys)
        services = sorted({r.meta.service for r in requests} | set(self.config.profiles))
        return merge_age_traces(flows), contact_records(requests, dests), services

    def audit(self) -> dict:
        cfg = self.config
        flows, contacts, services = self.flows()
        disclosures = load_disclosures(cfg.disclosures, self.ontology) if cfg.disclosures else None
        findings = audit(flows, disclosures, self.ontology, similarity_threshold=cfg.similarity_threshold,
                         granularity=cfg.granularity, services=services)
        diffs = diff_age_groups(flows, cfg.granularity, services)
        matrix = render_matrix(flows, self.ontology, services)
        prov = self.provenance()
        d = self.out / "audit"
        _write_jsonl(d / "flows.jsonl", prov, (f.to_dict() for f in flows))
        _write_jsonl(d / "contacts.jsonl", prov, (c.to_dict() for c in contacts))
        _write(d / "matrix.txt", _commented(prov, matrix.to_text()))
        _write(d / "matrix.json", _json_dump({"provenance": prov, **matrix.to_dict()}))
        _write(d / "diff.json", _json_dump({"provenance": prov, "granularity": cfg.granularity,
                                            "pairs": [x.to_dict() for x in diffs]}))
        _write(d / "findings.json", _json_dump({"provenance": prov,
                                                "findings": [f.to_dict() for f in findings]}))
        _write(d / "findings.csv", _commented(prov, findings_to_csv(findings)))
        by_rule = Counter(f.rule for f in findings)
        summary = {"flows": len(flows), "findings": len(findings), "by_rule": dict(sorted(by_rule.items()))}
        self.log("audit", **summary)
        return summary

    def linkability(self) -> dict:
        flows, _, services = self.flows()
        rep = linkability_report(flows, self.ontology, top_n=self.config.top_n, services=services)
        prov = self.provenance()
        d = self.out / "linkability"
        _write(d / "counts.csv", _commented(prov, counts_to_csv(rep["counts"])))
        _write(d / "edges.csv", _commented(prov, edges_to_csv(rep["edges"])))
        _write(d / "sets.json", _json_dump({
            "provenance": prov,
            "sets": [s.to_dict() for s in rep["sets"]],
            "largest": [x.to_dict() for x in rep["largest"]],
            "most_common": [{"categories": list(c), "count": n} for c, n in rep["most_common"]],
            "top_orgs": [r.to_dict() for r in rep["top_orgs"]],
            "cross_context": rep["cross_context"],
        }))
        summary = {"third_party_sets": len(rep["sets"]),
                   "linkable": sum(s.linkable for s in rep["sets"])}
        self.log("linkability", **summary)
        return summary

    # validation

    def validate_classifier(self, sample_path: Optional[Path] = None) -> AccuracyTable:
        """Score the classifier on a hand-labeled sample.

        Without a sample file, draws a seeded sample of corpus keys into
        ``validation/to_label.csv`` for an auditor to label, and raises.
        """
        cfg = self.config
        sample_path = sample_path or cfg.validation_sample
        prov = self.provenance()
        d = self.out / "validation"
        if sample_path is None or not Path(sample_path).exists():
            keys = sorted({k.key for item in self.load_ingested() for k in item.keys})
            drawn = sample_keys(keys, cfg.validation_fraction, cfg.seed)
            _write(d / "to_label.csv", "key,label\n" + "".join(f"{_csv_cell(k)},\n" for k in drawn))
            raise ConfigError(f"no labeled sample; wrote {len(drawn)} keys to {d / 'to_label.csv'}")
        sample = load_labeled_sample(sample_path, self.ontology)
        # score the stored classification; classify only sample keys it lacks
        labels_path = self.out / "classify" / "labels.jsonl"
        stored = {doc["key"]: doc for doc in _read_jsonl(labels_path)} if labels_path.exists() else {}
        voted: dict[str, Optional[VotedLabel]] = {}
        runs: dict[str, list[SingleRunResult]] = {}
        for key in sample.keys:
            if key in stored:
                doc = stored[key]
                voted[key] = VotedLabel.from_dict(doc["voted"]) if doc["voted"] else None
                runs[key] = [SingleRunResult.from_dict(r) for r in doc["runs"]]
        missing = [k for k in sample.keys if k not in stored]
        stats = {}
        if missing:
            clf = self._classifier()
            voted.update(clf.vote_keys(missing))
            runs.update({k: clf.runs_.get(k, []) for k in missing})
            stats = clf.stats_.to_dict()
        if all(runs.get(k) for k in sample.keys):
            table = validation_table(sample, runs, DEFAULT_THRESHOLDS)
        else:
            method = {"baseline": "Baseline", "hybrid": "Hybrid"}.get(cfg.mode, "Ensemble")
            table = AccuracyTable((validate_against_sample(sample, voted, DEFAULT_THRESHOLDS, method=method),))
        _write(d / "report.txt", _commented(prov, table.to_text()))
        _write(d / "report.csv", _commented(prov, table.to_csv()))
        _write(d / "report.json", _json_dump({"provenance": prov, **table.to_dict()}))
        self.log("validate-classifier", n=len(sample), from_store=len(sample) - len(missing), **stats)
        return table

    def run_all(self) -> dict:
        return {
            "ingest": self.ingest(),
            "classify": self.classify(),
            "audit": self.audit(),
            "linkability": self.linkability(),
        }


def _csv_cell(value: str) -> str:
    if any(c in value for c in ',"\n'):
        return '"' + value.replace('"', '""') + '"'
    return value


def _text_table(rows: Sequence[Sequence[Any]]) -> str:
    cells = [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
    lines = []
    for j, r in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if j == 0 or j == len(cells) - 2:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
