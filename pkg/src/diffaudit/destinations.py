"""Destination analysis: FQDN, eSLD, owning organization, party and ATS status.

ATS status is decided per FQDN against blocklists; party status per eSLD and
owner against the audited service's profile. All reference data is offline.
"""

from __future__ import annotations

import hashlib
import ipaddress
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence
from urllib.parse import urlsplit

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

__all__ = [
    "DestinationError",
    "PublicSuffixList",
    "load_psl",
    "default_psl_path",
    "extract_fqdn",
    "is_ip_literal",
    "extract_esld",
    "EntityMap",
    "load_entity_map",
    "resolve_owner",
    "ServiceProfile",
    "classify_party",
    "Blocklist",
    "load_blocklist",
    "match_ats",
    "DestinationRecord",
    "DEST_LABELS",
    "categorize_destination",
    "DestinationCategorizer",
]

DEST_LABELS = ("first", "first_ats", "third", "third_ats")


class DestinationError(ValueError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# public suffix list


def _to_ascii(label_seq: str) -> str:
    try:
        return label_seq.encode("idna").decode("ascii")
    except UnicodeError:
        return label_seq


class PublicSuffixList:
    """Rules of the public suffix list, with wildcard and exception support.

    Only the ICANN section is used unless ``include_private`` is set, so that
    hosting suffixes such as ``cloudfront.net`` remain registrable domains.
    """

    def __init__(self, text: str, *, include_private: bool = False, source: str = "<text>"):
        self.source = source
        self.include_private = include_private
        self.rules: set[str] = set()
        self.wildcards: set[str] = set()
        self.exceptions: set[str] = set()
        for raw in text.splitlines():
            line = raw.strip()
            if line.startswith("// ===END ICANN DOMAINS===") and not include_private:
                break
            if not line or line.startswith("//"):
                continue
            rule = line.split()[0].lower()
            if rule.startswith("!"):
                target = self.exceptions
                rule = rule[1:]
            elif rule.startswith("*."):
                target = self.wildcards
                rule = rule[2:]
            else:
                target = self.rules
            target.add(rule)
            ascii_rule = _to_ascii(rule)
            if ascii_rule != rule:
                target.add(ascii_rule)

    def __len__(self) -> int:
        return len(self.rules) + len(self.wildcards) + len(self.exceptions)

    def public_suffix(self, domain: str) -> str:
        """Longest matching public suffix of ``domain`` (the last label if no rule matches)."""
        labels = domain.lower().rstrip(".").split(".")
        n = len(labels)
        best = 1  # implicit "*" rule
        for i in range(n):
            candidate = ".".join(labels[i:])
            size = n - i
            if candidate in self.exceptions:
                # exception rules win and name a suffix one label shorter
                return ".".join(labels[i + 1:])
            if candidate in self.rules and size > best:
                best = size
            if i > 0 and candidate in self.wildcards and size + 1 > best:
                best = size + 1
        return ".".join(labels[n - best:]) if best <= n else domain

    def registrable_domain(self, domain: str) -> Optional[str]:
        labels = domain.lower().rstrip(".").split(".")
        suffix = self.public_suffix(domain)
        k = len(suffix.split("."))
        if len(labels) <= k:
            return None
        return ".".join(labels[-(k + 1):])


def default_psl_path() -> Path:
    return Path(str(resources.files("diffaudit") / "data" / "public_suffix_list.dat"))


def load_psl(path: str | Path | None = None, *, include_private: bool = False) -> PublicSuffixList:
    path = Path(path) if path is not None else default_psl_path()
    return PublicSuffixList(
        path.read_text(encoding="utf-8"), include_private=include_private, source=str(path)
    )


# hosts


def is_ip_literal(host: str) -> bool:
    try:
        ipaddress.ip_address(host)
    except ValueError:
        return False
    return True


def extract_fqdn(url: str) -> str:
    """Lowercase host of ``url`` without port; IP literals are returned unchanged."""
    try:
        parts = urlsplit(url.strip())
        host = parts.hostname
        parts.port  # raises on a malformed port
    except ValueError as exc:
        raise DestinationError(f"unparseable URL {url!r}: {exc}") from None
    if not parts.scheme or not host:
        raise DestinationError(f"unparseable URL {url!r}: no scheme or host")
    return host.rstrip(".").lower()


def extract_esld(fqdn: str, psl: PublicSuffixList) -> str:
    if is_ip_literal(fqdn):
        raise DestinationError(f"{fqdn!r} is an IP literal, not a domain name")
    esld = psl.registrable_domain(fqdn)
    if esld is None:
        raise DestinationError(f"{fqdn!r} is a bare public suffix")
    return esld


# ownership


@dataclass(frozen=True)
class EntityMap:
    """Offline eSLD to organization mapping (Tracker Radar style, flattened)."""

    owners: Mapping[str, str] = field(default_factory=dict)
    source: str = ""
    sha256: str = ""

    def __post_init__(self):
        object.__setattr__(
            self, "owners", {k.strip().lower(): v for k, v in dict(self.owners).items()}
        )

    def get(self, esld: str) -> Optional[str]:
        return self.owners.get(esld.lower())

    def with_overrides(self, overrides: "EntityMap") -> "EntityMap":
        merged = dict(self.owners)
        merged.update(overrides.owners)
        return EntityMap(merged, source=self.source, sha256=self.sha256)


def load_entity_map(path: str | Path) -> EntityMap:
    """Load ``{"esld": "Organization", ...}``.

    A Tracker Radar entity list ``{"entities": {"Org": {"properties": [domains]}}}``
    is accepted too and flattened.
    """
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise DestinationError(f"{path}: entity map must be a JSON object")
    if isinstance(doc.get("entities"), dict):
        owners = {}
        for org, info in doc["entities"].items():
            for domain in (info or {}).get("properties", []):
                owners[domain] = org
    else:
        owners = doc
    for k, v in owners.items():
        if not isinstance(v, str):
            raise DestinationError(f"{path}: owner of {k!r} must be a string")
    return EntityMap(owners, source=str(path), sha256=_sha256(path))


def resolve_owner(esld: str, entity_map: EntityMap) -> Optional[str]:
    """Owning organization, or None when unknown."""
    return entity_map.get(esld)


# party


@dataclass(frozen=True)
class ServiceProfile:
    name: str
    first_party_eslds: tuple[str, ...] = ()
    owner_orgs: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name or not self.name.strip():
            raise ValueError("service profile needs a name")
        object.__setattr__(
            self, "first_party_eslds", tuple(sorted({e.strip().lower() for e in self.first_party_eslds}))
        )
        object.__setattr__(
            self, "owner_orgs", tuple(sorted({o.strip().lower() for o in self.owner_orgs}))
        )

    @classmethod
    def from_dict(cls, name: str, d: Mapping) -> "ServiceProfile":
        unknown = sorted(set(d) - {"first_party_eslds", "owner_orgs"})
        if unknown:
            raise ValueError(f"service profile {name!r}: unknown fields {unknown}")
        return cls(name, tuple(d.get("first_party_eslds", ())), tuple(d.get("owner_orgs", ())))


def classify_party(esld: str, owner: Optional[str], profile: ServiceProfile) -> str:
    if esld.lower() in profile.first_party_eslds:
        return "first"
    if owner is not None and owner.strip().lower() in profile.owner_orgs:
        return "first"
    return "third"


# blocklists


@dataclass(frozen=True)
class Blocklist:
    """One loaded list. Hosts entries match exact FQDNs; suffix rules match at label boundaries."""

    name: str
    hosts: frozenset = frozenset()
    suffixes: frozenset = frozenset()
    sha256: str = ""

    def blocks(self, fqdn: str) -> bool:
        fqdn = fqdn.lower().rstrip(".")
        if fqdn in self.hosts:
            return True
        labels = fqdn.split(".")
        return any(".".join(labels[i:]) in self.suffixes for i in range(len(labels)))

    def __len__(self) -> int:
        return len(self.hosts) + len(self.suffixes)


_HOSTS_IGNORED = {"localhost", "localhost.localdomain", "local", "broadcasthost", "ip6-localhost",
                  "ip6-loopback", "0.0.0.0"}


def parse_blocklist(text: str, name: str = "<text>") -> Blocklist:
    """Parse hosts-file lines (``0.0.0.0 domain``) and plain domain-suffix lines.

    ``#`` and ``!`` start comments; adblock-style ``||domain^`` lines are read
    as suffix rules.
    """
    hosts, suffixes = set(), set()
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("!") or line.startswith("["):
            continue
        tokens = line.split()
        if len(tokens) >= 2 and is_ip_literal(tokens[0]):
            for host in tokens[1:]:
                host = host.lower().rstrip(".")
                if host not in _HOSTS_IGNORED:
                    hosts.add(host)
            continue
        rule = tokens[0]
        if rule.startswith("||"):
            rule = rule[2:].split("^", 1)[0]
        rule = rule.lstrip("*.").lower().rstrip(".")
        if rule and "/" not in rule and not is_ip_literal(rule):
            suffixes.add(rule)
    return Blocklist(name, frozenset(hosts), frozenset(suffixes))


def load_blocklist(path: str | Path) -> Blocklist:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DestinationError(f"cannot read blocklist {path}: {exc}") from None
    bl = parse_blocklist(data.decode("utf-8", errors="replace"), name=path.name)
    return Blocklist(bl.name, bl.hosts, bl.suffixes, hashlib.sha256(data).hexdigest())


def match_ats(fqdn: str, blocklists: Iterable[Blocklist]) -> bool:
    """True iff any list blocks the FQDN."""
    return any(bl.blocks(fqdn) for bl in blocklists)


# composition


@dataclass(frozen=True)
class DestinationRecord:
    fqdn: str
    esld: str
    owner: Optional[str]
    party: str
    ats: bool
    is_domain: bool = True

    @property
    def label(self) -> str:
        return f"{self.party}_ats" if self.ats else self.party

    def to_dict(self) -> dict:
        return {
            "fqdn": self.fqdn,
            "esld": self.esld,
            "owner": self.owner,
            "party": self.party,
            "ats": self.ats,
            "label": self.label,
            "is_domain": self.is_domain,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DestinationRecord":
        return cls(d["fqdn"], d["esld"], d.get("owner"), d["party"], bool(d["ats"]),
                   bool(d.get("is_domain", True)))


def categorize_destination(
    url: str,
    profile: ServiceProfile,
    psl: PublicSuffixList,
    entity_map: EntityMap,
    blocklists: Sequence[Blocklist],
) -> DestinationRecord:
    fqdn = extract_fqdn(url)
    if is_ip_literal(fqdn):
        return DestinationRecord(fqdn, fqdn, None, "third", False, is_domain=False)
    esld = extract_esld(fqdn, psl)
    owner = resolve_owner(esld, entity_map)
    party = classify_party(esld, owner, profile)
    return DestinationRecord(fqdn, esld, owner, party, match_ats(fqdn, blocklists))


class DestinationCategorizer(TransformerMixin, BaseEstimator):
    """Map ``(service, url)`` pairs to DestinationRecords.

    Parameters are the reference data; ``psl=None`` uses the vendored snapshot.
    Results are memoized per (service, FQDN); the cache is pure.
    """

    def __init__(
        self,
        profiles: Mapping[str, ServiceProfile] | None = None,
        entity_map: EntityMap | None = None,
        blocklists: Sequence[Blocklist] = (),
        psl: PublicSuffixList | None = None,
    ):
        self.profiles = profiles
        self.entity_map = entity_map
        self.blocklists = blocklists
        self.psl = psl

    def fit(self, X=None, y=None):
        self.psl_ = self.psl if self.psl is not None else load_psl()
        self.entity_map_ = self.entity_map if self.entity_map is not None else EntityMap()
        self.blocklists_ = tuple(self.blocklists)
        self.profiles_ = dict(self.profiles or {})
        self._memo: dict[tuple[str, str], DestinationRecord] = {}
        return self

    def profile_for(self, service: str) -> ServiceProfile:
        check_is_fitted(self, "psl_")
        profile = self.profiles_.get(service)
        if profile is None:
            # unknown service: nothing counts as first party
            profile = ServiceProfile(service)
        return profile

    def categorize(self, service: str, url: str) -> DestinationRecord:
        check_is_fitted(self, "psl_")
        fqdn = extract_fqdn(url)
        memo_key = (service, fqdn)
        rec = self._memo.get(memo_key)
        if rec is None:
            rec = categorize_destination(
                url, self.profile_for(service), self.psl_, self.entity_map_, self.blocklists_
            )
            self._memo[memo_key] = rec
        return rec

    def transform(self, X: Iterable[tuple[str, str]]) -> list[DestinationRecord]:
        return [self.categorize(service, url) for service, url in X]
