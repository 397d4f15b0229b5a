import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES, load_json
from diffaudit.destinations import (
    DEST_LABELS,
    Blocklist,
    DestinationCategorizer,
    DestinationError,
    DestinationRecord,
    EntityMap,
    PublicSuffixList,
    ServiceProfile,
    categorize_destination,
    classify_party,
    extract_esld,
    extract_fqdn,
    is_ip_literal,
    load_blocklist,
    load_entity_map,
    load_psl,
    match_ats,
    parse_blocklist,
    resolve_owner,
)

DEST = FIXTURES / "destinations"


@pytest.fixture(scope="module")
def psl():
    return load_psl()


@pytest.fixture(scope="module")
def categorizer():
    profiles = {k: ServiceProfile.from_dict(k, v) for k, v in load_json("destinations/profiles.json").items()}
    return DestinationCategorizer(
        profiles=profiles,
        entity_map=load_entity_map(DEST / "entities.json"),
        blocklists=[load_blocklist(DEST / "hosts.txt"), load_blocklist(DEST / "adblock.txt")],
    ).fit()


@pytest.mark.parametrize("url,fqdn", [
    ("https://metrics.roblox.com/v1/x?y=1", "metrics.roblox.com"),
    ("https://EXAMPLE.com:8443/", "example.com"),
    ("https://10.0.0.5/x", "10.0.0.5"),
    ("http://[2001:db8::1]:8080/p", "2001:db8::1"),
    ("https://example.com./trailing-dot", "example.com"),
])
def test_extract_fqdn(url, fqdn):
    assert extract_fqdn(url) == fqdn


def test_ip_literal_flag():
    assert is_ip_literal("10.0.0.5") and is_ip_literal("2001:db8::1")
    assert not is_ip_literal("example.com")


@pytest.mark.parametrize("bad", ["not a url", "https:///nohost", ""])
def test_extract_fqdn_errors(bad):
    with pytest.raises(DestinationError):
        extract_fqdn(bad)


@pytest.mark.parametrize("fqdn,esld", [
    ("metrics.roblox.com", "roblox.com"),
    ("google-analytics.com", "google-analytics.com"),
    ("browser.events.data.microsoft.com", "microsoft.com"),
    ("d2abc.cloudfront.net", "cloudfront.net"),
    ("fonts.googleapis.com", "googleapis.com"),
])
def test_extract_esld(psl, fqdn, esld):
    assert extract_esld(fqdn, psl) == esld


@pytest.mark.parametrize("bad", ["co.uk", "com", "10.0.0.5", "foo.kawasaki.jp"])
def test_extract_esld_errors(psl, bad):
    with pytest.raises(DestinationError):
        extract_esld(bad, psl)


def test_psl_rules_wildcard_and_exception():
    psl = PublicSuffixList("// test\nuk\nco.uk\n*.ck\n!www.ck\n")
    assert psl.public_suffix("a.b.co.uk") == "co.uk"
    assert psl.registrable_domain("a.b.co.uk") == "b.co.uk"
    assert psl.registrable_domain("x.y.ck") == "x.y.ck"
    assert psl.registrable_domain("www.ck") == "www.ck"
    assert psl.registrable_domain("co.uk") is None
    # implicit "*" rule for unknown TLDs
    assert psl.registrable_domain("a.b.unknowntld") == "b.unknowntld"


def test_private_section_excluded_by_default():
    text = ("// ===BEGIN ICANN DOMAINS===\ncom\nnet\n// ===END ICANN DOMAINS===\n"
            "// ===BEGIN PRIVATE DOMAINS===\ncloudfront.net\n// ===END PRIVATE DOMAINS===\n")
    assert PublicSuffixList(text).registrable_domain("d1.cloudfront.net") == "cloudfront.net"
    assert PublicSuffixList(text, include_private=True).registrable_domain("d1.cloudfront.net") == \
        "d1.cloudfront.net"


def test_esld_pairs_against_oracle(psl):
    doc = load_json("esld_pairs.json")
    assert len(doc["pairs"]) == 100
    assert [extract_esld(f, psl) for f, _ in doc["pairs"]] == [e for _, e in doc["pairs"]]


def test_resolve_owner():
    m = EntityMap({"doubleclick.net": "Google", "clarity.ms": "Microsoft"})
    assert resolve_owner("doubleclick.net", m) == "Google"
    assert resolve_owner("clarity.ms", m) == "Microsoft"
    assert resolve_owner("example.org", m) is None


def test_entity_map_formats(tmp_path):
    radar = load_entity_map(DEST / "entities.json")
    assert radar.get("clarity.ms") == "Microsoft Corporation"
    flat = tmp_path / "flat.json"
    flat.write_text(json.dumps({"Example.ORG": "Example Inc"}))
    assert load_entity_map(flat).get("example.org") == "Example Inc"
    overrides = EntityMap({"clarity.ms": "Override Co"})
    assert radar.with_overrides(overrides).get("clarity.ms") == "Override Co"
    assert len(radar.sha256) == 64


def test_classify_party():
    roblox = ServiceProfile("Roblox", ("roblox.com",))
    minecraft = ServiceProfile("Minecraft", ("minecraft.net",), ("Microsoft",))
    quizlet = ServiceProfile("Quizlet", ("quizlet.com",))
    assert classify_party("roblox.com", None, roblox) == "first"
    assert classify_party("clarity.ms", "Microsoft", minecraft) == "first"
    assert classify_party("doubleclick.net", "Google", quizlet) == "third"
    assert classify_party("unknown.example", None, minecraft) == "third"


def test_profile_lowercases_and_rejects_unknown_fields():
    p = ServiceProfile.from_dict("S", {"first_party_eslds": ["A.com"], "owner_orgs": ["Org"]})
    assert p.first_party_eslds == ("a.com",) and p.owner_orgs == ("org",)
    with pytest.raises(ValueError):
        ServiceProfile.from_dict("S", {"eslds": ["a.com"]})
    with pytest.raises(ValueError):
        ServiceProfile(" ")


def test_match_ats_examples():
    lists = [parse_blocklist("doubleclick.net\ntracker.example\n")]
    assert match_ats("doubleclick.net", lists)
    assert not match_ats("example.org", lists)
    assert match_ats("a.tracker.example", lists)
    assert not match_ats("nottracker.example", lists)


def test_hosts_entries_match_exactly():
    bl = parse_blocklist("0.0.0.0 metrics.roblox.com\n127.0.0.1 localhost\n")
    assert bl.blocks("metrics.roblox.com")
    assert not bl.blocks("roblox.com")
    assert not bl.blocks("a.metrics.roblox.com")
    assert not bl.blocks("localhost")


def test_blocklist_formats_and_comments():
    bl = parse_blocklist("# comment\n! adblock comment\n||ads.example^\nplain.example # trailing\n\n")
    assert bl.blocks("x.ads.example") and bl.blocks("plain.example")
    assert len(bl) == 2


def test_unreadable_blocklist(tmp_path):
    with pytest.raises(DestinationError, match="missing.txt"):
        load_blocklist(tmp_path / "missing.txt")


def test_blocklist_hash_recorded():
    bl = load_blocklist(DEST / "hosts.txt")
    assert bl.name == "hosts.txt" and len(bl.sha256) == 64


def test_categorize_examples(psl):
    lists = [parse_blocklist("0.0.0.0 metrics.roblox.com\ngoogle-analytics.com\n")]
    m = EntityMap({"google-analytics.com": "Google LLC"})
    roblox = ServiceProfile("Roblox", ("roblox.com",))
    duo = ServiceProfile("Duolingo", ("duolingo.com",))
    assert categorize_destination("https://metrics.roblox.com/x", roblox, psl, m, lists).label == "first_ats"
    assert categorize_destination("https://google-analytics.com/collect", duo, psl, m, lists).label == "third_ats"
    assert categorize_destination("https://duolingo.com/api", duo, psl, m, lists).label == "first"
    ip = categorize_destination("https://10.0.0.5/x", duo, psl, m, lists)
    assert (ip.party, ip.ats, ip.owner, ip.is_domain) == ("third", False, None, False)


def test_fifty_domain_fixture(categorizer):
    rows = load_json("destinations/domains.json")
    assert len(rows) == 50
    got = [(r["service"], r["url"], *_triple(categorizer.categorize(r["service"], r["url"]))) for r in rows]
    want = [(r["service"], r["url"], r["esld"], r["owner"], r["label"]) for r in rows]
    assert got == want


def _triple(rec):
    return rec.esld, rec.owner, rec.label


def test_categorizer_memo_is_pure(categorizer):
    a = categorizer.categorize("Roblox", "https://metrics.roblox.com/a")
    b = categorizer.categorize("Roblox", "https://METRICS.roblox.com:443/b")
    assert a == b
    fresh = DestinationCategorizer(**categorizer.get_params()).fit()
    assert fresh.categorize("Roblox", "https://metrics.roblox.com/a") == a
    assert categorizer.transform([("Roblox", "https://www.roblox.com/")])[0].label == "first"


def test_record_round_trip():
    rec = DestinationRecord("a.b.com", "b.com", "Org", "third", True)
    assert rec.label == "third_ats"
    assert DestinationRecord.from_dict(rec.to_dict()) == rec


@given(st.sampled_from(["first", "third"]), st.booleans())
def test_label_is_function_of_party_and_ats(party, ats):
    label = DestinationRecord("x.com", "x.com", None, party, ats).label
    assert label in DEST_LABELS
    assert label.startswith(party) and label.endswith("_ats") == ats


domains = st.lists(st.text(alphabet="abcxyz", min_size=1, max_size=4), min_size=1, max_size=4).map(".".join)


@given(st.lists(domains, max_size=4), st.lists(domains, max_size=4), domains)
def test_match_ats_monotone(rules_a, rules_b, fqdn):
    a = [Blocklist("a", frozenset(), frozenset(rules_a))]
    b = a + [Blocklist("b", frozenset(rules_b), frozenset())]
    assert not match_ats(fqdn, a) or match_ats(fqdn, b)


labels = st.text(alphabet="abcdefgh0123-", min_size=1, max_size=6).filter(lambda s: s[0] != "-" and s[-1] != "-")


@given(st.lists(labels, max_size=3), labels, st.sampled_from(["com", "co.uk", "com.au", "org", "io"]))
def test_esld_properties(psl_subs, name, suffix):
    psl = load_psl()
    fqdn = ".".join([*psl_subs, name, suffix])
    esld = extract_esld(fqdn, psl)
    assert esld == f"{name}.{suffix}"
    assert fqdn.endswith(esld) and esld.count(".") <= fqdn.count(".")
    profile = ServiceProfile("S", (esld,))
    assert classify_party(esld, None, profile) == "first"
