"""Trace parsing: HAR files and capture bundles into outgoing requests, plus raw key mining.

Capture-bundle layout (all JSON, UTF-8)::

    manifest.json
      {"version": 1,
       "traces": [{"file": "roblox_web_child_logged_in.json",
                   "service": "Roblox", "platform": "web",
                   "trace_kind": "logged_in", "age_group": "child"}, ...]}

    <trace file>                      array of records
      {"direction": "out" | "in",
       "ts_ms": 1700000000000,
       "url": "https://...",
       "method": "POST",
       "headers": [["Content-Type", "application/json"], ...],
       "query": [["lang", "en"], ...],          optional; parsed from url when absent
       "body_text": "...",                     optional
       "content_type": "application/json",     optional
       "encrypted": false}

A manifest entry whose ``file`` ends in ``.har`` is parsed as HAR 1.2 instead.
For logged-out traces ``age_group`` is ``"none"`` (or null).
"""

from __future__ import annotations

import base64
import enum
import json
import logging
from collections import Counter
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional, Sequence
from urllib.parse import parse_qsl, urlencode, urlsplit

from sklearn.base import BaseEstimator, TransformerMixin

logger = logging.getLogger(__name__)

__all__ = [
    "Platform",
    "TraceKind",
    "AgeGroup",
    "TraceMeta",
    "RawRequest",
    "RawKey",
    "IngestError",
    "parse_har",
    "parse_capture_bundle",
    "extract_raw_keys",
    "requests_to_har",
    "RawKeyExtractor",
    "AGE_GROUPS",
    "TRACE_CATEGORIES",
]


class IngestError(ValueError):
    """Malformed trace input; the message names the file and the offending offset."""


class Platform(str, enum.Enum):
    MOBILE = "mobile"
    WEB = "web"
    DESKTOP = "desktop"


class TraceKind(str, enum.Enum):
    ACCOUNT_CREATION = "account_creation"
    LOGGED_IN = "logged_in"
    LOGGED_OUT = "logged_out"


class AgeGroup(str, enum.Enum):
    CHILD = "child"
    ADOLESCENT = "adolescent"
    ADULT = "adult"
    NONE = "none"

    @classmethod
    def for_age(cls, years: int) -> "AgeGroup":
        if years < 0:
            raise ValueError("age must be non-negative")
        if years < 13:
            return cls.CHILD
        if years < 16:
            return cls.ADOLESCENT
        return cls.ADULT


AGE_GROUPS = ("child", "adolescent", "adult")
TRACE_CATEGORIES = AGE_GROUPS + ("logged_out",)


@dataclass(frozen=True, order=True)
class TraceMeta:
    service: str
    platform: Platform
    trace_kind: TraceKind
    age_group: AgeGroup = AgeGroup.NONE

    def __post_init__(self):
        object.__setattr__(self, "platform", Platform(self.platform))
        object.__setattr__(self, "trace_kind", TraceKind(self.trace_kind))
        age = AgeGroup.NONE if self.age_group is None else AgeGroup(self.age_group)
        object.__setattr__(self, "age_group", age)
        if not self.service or not self.service.strip():
            raise ValueError("service name must be non-empty")
        if self.trace_kind is TraceKind.LOGGED_OUT and age is not AgeGroup.NONE:
            raise ValueError("logged_out traces carry no age group")
        if self.trace_kind is not TraceKind.LOGGED_OUT and age is AgeGroup.NONE:
            raise ValueError(f"{self.trace_kind.value} traces need an age group")

    @property
    def trace_category(self) -> str:
        """child / adolescent / adult, or logged_out."""
        if self.trace_kind is TraceKind.LOGGED_OUT:
            return "logged_out"
        return self.age_group.value

    def to_dict(self) -> dict:
        return {
            "service": self.service,
            "platform": self.platform.value,
            "trace_kind": self.trace_kind.value,
            "age_group": self.age_group.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceMeta":
        return cls(d["service"], d["platform"], d["trace_kind"], d.get("age_group"))

    def sort_key(self) -> tuple:
        return (self.service, self.platform.value, self.trace_kind.value, self.age_group.value)


@dataclass(frozen=True)
class RawRequest:
    meta: TraceMeta
    url: str
    method: str = "GET"
    headers: tuple[tuple[str, str], ...] = ()
    query_params: tuple[tuple[str, str], ...] = ()
    body: Optional[bytes] = None
    content_type: Optional[str] = None
    encrypted: bool = False
    timestamp: int = 0
    request_id: str = ""

    def __post_init__(self):
        if not self.url:
            raise ValueError("request url must be non-empty")
        parts = urlsplit(self.url)
        if not parts.scheme or not parts.netloc:
            raise ValueError(f"request url {self.url!r} has no scheme or host")
        if self.encrypted and self.body is not None:
            raise ValueError("encrypted requests carry no body")
        object.__setattr__(self, "headers", tuple((str(k), str(v)) for k, v in self.headers))
        if not self.query_params and parts.query:
            params = parse_qsl(parts.query, keep_blank_values=True)
            object.__setattr__(self, "query_params", tuple(params))
        else:
            object.__setattr__(
                self, "query_params", tuple((str(k), str(v)) for k, v in self.query_params)
            )

    def sort_key(self) -> tuple:
        return (self.meta.sort_key(), self.timestamp, self.url, self.request_id)

    @property
    def body_text(self) -> Optional[str]:
        if self.body is None:
            return None
        return self.body.decode("utf-8", errors="replace")

    def header(self, name: str) -> Optional[str]:
        lname = name.lower()
        for k, v in self.headers:
            if k.lower() == lname:
                return v
        return None

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "id": self.request_id,
            "meta": self.meta.to_dict(),
            "ts_ms": self.timestamp,
            "method": self.method,
            "url": self.url,
            "headers": [list(h) for h in self.headers],
            "query": [list(q) for q in self.query_params],
            "encrypted": self.encrypted,
        }
        if self.body is not None:
            try:
                d["body_text"] = self.body.decode("utf-8")
            except UnicodeDecodeError:
                d["body_b64"] = base64.b64encode(self.body).decode("ascii")
        if self.content_type is not None:
            d["content_type"] = self.content_type
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RawRequest":
        body = None
        if "body_text" in d:
            body = d["body_text"].encode("utf-8")
        elif "body_b64" in d:
            body = base64.b64decode(d["body_b64"])
        return cls(
            meta=TraceMeta.from_dict(d["meta"]),
            url=d["url"],
            method=d.get("method", "GET"),
            headers=tuple(tuple(h) for h in d.get("headers", [])),
            query_params=tuple(tuple(q) for q in d.get("query", [])),
            body=body,
            content_type=d.get("content_type"),
            encrypted=bool(d.get("encrypted", False)),
            timestamp=int(d.get("ts_ms", 0)),
            request_id=d.get("id", ""),
        )


@dataclass(frozen=True)
class RawKey:
    key: str
    path: str
    source: str  # body | query | header
    request_ref: str = ""

    def __post_init__(self):
        if not self.key:
            raise ValueError("raw key must be non-empty")
        if self.path != self.key and not self.path.endswith("." + self.key):
            raise ValueError(f"key {self.key!r} is not the last segment of {self.path!r}")

    def to_dict(self) -> dict:
        return {"key": self.key, "path": self.path, "source": self.source, "request": self.request_ref}


# HAR


def _har_timestamp(value: Any) -> int:
    if not isinstance(value, str) or not value:
        return 0
    try:
        dt = datetime.fromisoformat(value.replace("Z", "+00:00"))
    except ValueError:
        return 0
    return int(round(dt.timestamp() * 1000))


def _pairs(items: Any) -> tuple[tuple[str, str], ...]:
    out = []
    for item in items or []:
        if isinstance(item, dict) and "name" in item:
            out.append((str(item["name"]), str(item.get("value", ""))))
    return tuple(out)


def parse_har(
    data: bytes | str,
    meta: TraceMeta,
    *,
    source: str = "har",
    stats: Counter | None = None,
) -> list[RawRequest]:
    """One RawRequest per HAR entry; responses are ignored.

    Entries with no request URL are skipped and counted under
    ``stats["har_entry_without_url"]``.
    """
    try:
        doc = json.loads(data)
        entries = doc["log"]["entries"]
        if not isinstance(entries, list):
            raise TypeError("log.entries is not an array")
    except (ValueError, KeyError, TypeError) as exc:
        raise IngestError(f"{source}: malformed HAR document ({exc})") from None

    requests: list[RawRequest] = []
    for i, entry in enumerate(entries):
        req = entry.get("request") if isinstance(entry, dict) else None
        url = req.get("url") if isinstance(req, dict) else None
        if not url:
            logger.warning("%s: entry %d has no request url, skipped", source, i)
            if stats is not None:
                stats["har_entry_without_url"] += 1
            continue
        body = content_type = None
        post = req.get("postData")
        if isinstance(post, dict):
            content_type = post.get("mimeType") or None
            if post.get("text") is not None:
                body = str(post["text"]).encode("utf-8")
            elif post.get("params"):
                body = urlencode(_pairs(post["params"])).encode("utf-8")
        try:
            requests.append(
                RawRequest(
                    meta=meta,
                    url=url,
                    method=str(req.get("method", "GET")).upper(),
                    headers=_pairs(req.get("headers")),
                    query_params=_pairs(req.get("queryString")),
                    body=body,
                    content_type=content_type,
                    encrypted=False,
                    timestamp=_har_timestamp(entry.get("startedDateTime")),
                    request_id=f"{source}#{i}",
                )
            )
        except ValueError as exc:
            raise IngestError(f"{source}: entry {i}: {exc}") from None
    return requests


def requests_to_har(requests: Sequence[RawRequest]) -> dict:
    """Serialize requests back into a minimal HAR 1.2 document."""
    entries = []
    for r in requests:
        request: dict[str, Any] = {
            "method": r.method,
            "url": r.url,
            "httpVersion": "HTTP/1.1",
            "headers": [{"name": k, "value": v} for k, v in r.headers],
            "queryString": [{"name": k, "value": v} for k, v in r.query_params],
            "cookies": [],
            "headersSize": -1,
            "bodySize": len(r.body) if r.body is not None else 0,
        }
        if r.body is not None:
            request["postData"] = {"mimeType": r.content_type or "", "text": r.body_text}
        started = datetime.utcfromtimestamp(r.timestamp / 1000).isoformat(timespec="milliseconds") + "Z"
        entries.append(
            {
                "startedDateTime": started,
                "time": 0,
                "request": request,
                "response": {"status": 0, "statusText": "", "httpVersion": "", "headers": [],
                             "cookies": [], "content": {"size": 0, "mimeType": ""},
                             "redirectURL": "", "headersSize": -1, "bodySize": -1},
                "cache": {},
                "timings": {"send": 0, "wait": 0, "receive": 0},
            }
        )
    return {"log": {"version": "1.2", "creator": {"name": "diffaudit", "version": "0.1.0"},
                    "entries": entries}}


# capture bundles

_MANIFEST_FIELDS = ("file", "service", "platform", "trace_kind", "age_group")


def _meta_from_entry(entry: Any, where: str) -> TraceMeta:
    if not isinstance(entry, dict):
        raise IngestError(f"{where}: manifest entry must be an object")
    missing = [f for f in _MANIFEST_FIELDS if f not in entry]
    if missing:
        raise IngestError(f"{where}: manifest entry missing {missing}")
    try:
        return TraceMeta(entry["service"], entry["platform"], entry["trace_kind"], entry["age_group"])
    except ValueError as exc:
        raise IngestError(f"{where}: {exc}") from None


def _record_to_request(rec: Any, meta: TraceMeta, where: str, request_id: str) -> RawRequest:
    if not isinstance(rec, dict):
        raise IngestError(f"{where}: record must be an object")
    for name in ("direction", "ts_ms", "url", "method", "encrypted"):
        if name not in rec:
            raise IngestError(f"{where}: record missing {name!r}")
    encrypted = rec["encrypted"]
    if not isinstance(encrypted, bool):
        raise IngestError(f"{where}: 'encrypted' must be a boolean")
    body_text = rec.get("body_text")
    if encrypted and body_text is not None:
        raise IngestError(f"{where}: encrypted record carries body_text")
    try:
        return RawRequest(
            meta=meta,
            url=rec["url"],
            method=str(rec["method"]).upper(),
            headers=tuple(tuple(h) for h in rec.get("headers") or []),
            query_params=tuple(tuple(q) for q in rec.get("query") or []),
            body=body_text.encode("utf-8") if body_text is not None else None,
            content_type=rec.get("content_type"),
            encrypted=encrypted,
            timestamp=int(rec["ts_ms"]),
            request_id=request_id,
        )
    except (ValueError, TypeError) as exc:
        raise IngestError(f"{where}: {exc}") from None


def parse_trace_file(
    path: Path, meta: TraceMeta, *, source: str | None = None, stats: Counter | None = None
) -> list[RawRequest]:
    """Parse one trace file (HAR by extension, else capture-bundle records); outgoing only."""
    source = source or path.name
    data = path.read_bytes()
    if path.suffix.lower() == ".har":
        return parse_har(data, meta, source=source, stats=stats)
    try:
        records = json.loads(data)
    except ValueError as exc:
        raise IngestError(f"{source}: not valid JSON ({exc})") from None
    if not isinstance(records, list):
        raise IngestError(f"{source}: trace file must be a JSON array of records")
    out = []
    for i, rec in enumerate(records):
        where = f"{source}: record {i}"
        direction = rec.get("direction") if isinstance(rec, dict) else None
        if direction not in ("out", "in"):
            raise IngestError(f"{where}: direction must be 'out' or 'in'")
        if direction == "in":
            if stats is not None:
                stats["incoming_dropped"] += 1
            continue
        out.append(_record_to_request(rec, meta, where, f"{source}#{i}"))
    return out


def load_manifest(path: str | Path) -> tuple[Path, list[tuple[Path, TraceMeta]]]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise IngestError(f"{path}: not valid JSON ({exc})") from None
    traces = doc.get("traces") if isinstance(doc, dict) else None
    if not isinstance(traces, list):
        raise IngestError(f"{path}: manifest needs a 'traces' array")
    root = path.parent
    out = []
    for i, entry in enumerate(traces):
        meta = _meta_from_entry(entry, f"{path.name}: traces[{i}]")
        out.append((root / entry["file"], meta))
    return root, out


def parse_capture_bundle(path: str | Path, *, stats: Counter | None = None) -> list[RawRequest]:
    """All outgoing requests of every trace listed in a bundle manifest.

    Output is sorted by (meta, timestamp, url) so it does not depend on file order.
    """
    _, traces = load_manifest(path)
    requests: list[RawRequest] = []
    for file, meta in traces:
        if not file.exists():
            raise IngestError(f"{file}: trace file listed in manifest does not exist")
        requests.extend(parse_trace_file(file, meta, stats=stats))
    requests.sort(key=RawRequest.sort_key)
    return requests


# raw key mining

_BINARY_TYPES = ("protobuf", "octet-stream", "grpc", "x-thrift", "msgpack", "image/", "audio/", "video/")


def _body_kind(req: RawRequest) -> str:
    ctype = (req.content_type or req.header("content-type") or "").lower()
    if any(t in ctype for t in _BINARY_TYPES):
        return "binary"
    if "json" in ctype:
        return "json"
    if "x-www-form-urlencoded" in ctype:
        return "form"
    text = req.body.lstrip() if req.body else b""
    if text[:1] in (b"{", b"["):
        return "json"
    if b"=" in text and b"\n" not in text.strip() and b" " not in text.strip():
        return "form"
    return "unknown"


def _walk_json(node: Any, prefix: str) -> Iterator[tuple[str, str]]:
    if isinstance(node, dict):
        for k, v in node.items():
            key = str(k)
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(v, dict) and v:
                yield from _walk_json(v, path)
            elif isinstance(v, list) and any(isinstance(x, (dict, list)) for x in v):
                for item in v:
                    # scalars beside containers would break prefix-freeness
                    if isinstance(item, (dict, list)):
                        yield from _walk_json(item, path)
            elif key:
                yield key, path
    elif isinstance(node, list):
        for item in node:
            yield from _walk_json(item, prefix)


def extract_raw_keys(
    req: RawRequest,
    *,
    include_headers: bool = False,
    include_cookies: bool = False,
    stats: Counter | None = None,
) -> list[RawKey]:
    """Leaf keys of the query string and payload, in document order, deduplicated.

    Query parameters come first, then the body (JSON leaves or form fields),
    then optionally header and cookie names. Unparseable or binary bodies
    yield nothing from the body and are counted in ``stats``; this never raises.
    """
    if req.encrypted:
        return []
    found: list[tuple[str, str, str]] = []

    for name, _ in req.query_params:
        if name:
            found.append((name, name, "query"))

    if req.body:
        kind = _body_kind(req)
        if kind == "json":
            try:
                doc = json.loads(req.body.decode("utf-8"))
            except (ValueError, UnicodeDecodeError):
                if stats is not None:
                    stats["unparseable_body"] += 1
            else:
                found.extend((k, p, "body") for k, p in _walk_json(doc, ""))
        elif kind == "form":
            try:
                fields = parse_qsl(req.body.decode("utf-8"), keep_blank_values=True)
            except (ValueError, UnicodeDecodeError):
                fields = []
            if not fields and stats is not None:
                stats["unparseable_body"] += 1
            found.extend((k, k, "body") for k, _ in fields if k)
        elif kind == "binary":
            if stats is not None:
                stats["binary_body_skipped"] += 1
        elif stats is not None:
            stats["unparseable_body"] += 1

    if include_headers:
        found.extend((k.lower(), k.lower(), "header") for k, _ in req.headers if k)
    if include_cookies:
        for k, v in req.headers:
            if k.lower() == "cookie":
                for part in v.split(";"):
                    name = part.split("=", 1)[0].strip()
                    if name:
                        found.append((name, f"cookie.{name}", "header"))

    seen = set()
    keys = []
    for key, path, source in found:
        if (key, path, source) in seen:
            continue
        seen.add((key, path, source))
        keys.append(RawKey(key, path, source, req.request_id))
    return keys


class RawKeyExtractor(TransformerMixin, BaseEstimator):
    """Transformer mapping a sequence of RawRequests to their RawKey lists.

    ``stats_`` after transform counts skipped bodies (binary, unparseable).
    """

    def __init__(self, include_headers: bool = False, include_cookies: bool = False):
        self.include_headers = include_headers
        self.include_cookies = include_cookies

    def fit(self, X=None, y=None):
        self.stats_ = Counter()
        return self

    def transform(self, X: Iterable[RawRequest]) -> list[list[RawKey]]:
        if not hasattr(self, "stats_"):
            self.stats_ = Counter()
        return [
            extract_raw_keys(
                r,
                include_headers=self.include_headers,
                include_cookies=self.include_cookies,
                stats=self.stats_,
            )
            for r in X
        ]
