import json
from collections import Counter

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from conftest import load_json
from diffaudit.classify import (
    SYSTEM_PROMPT,
    ChatCompletionClient,
    ClientError,
    DataTypeClassifier,
    EnsembleRunner,
    FixtureMissingError,
    LabeledSample,
    RecordingClient,
    ReplayClient,
    RunCache,
    SingleRunResult,
    VotedLabel,
    apply_threshold,
    baseline_classify,
    build_messages,
    build_prompt,
    load_labeled_sample,
    majority_vote,
    normalize_key,
    parse_llm_response,
    prompt_hash,
    request_digest,
    run_ensemble,
    sample_keys,
    validate_against_sample,
    validation_table,
)
from scripted import ScriptedResponder

TEMPS = (0.0, 0.25, 0.5, 0.75, 1.0)


def runs(key, pairs):
    return [SingleRunResult(key, lab, conf, "", t, lab is not None) for t, (lab, conf) in zip(TEMPS, pairs)]


# keys

@pytest.mark.parametrize("raw,norm", [
    ("IsOptOutEmailShown", "is opt out email shown"),
    ("pers_ad_show_third_part_measurement", "pers ad show third part measurement"),
    ("email", "email"),
    ("device-model2", "device model2"),
    ("HTTPHeader", "http header"),
])
def test_normalize_key(raw, norm):
    assert normalize_key(raw) == norm


@pytest.mark.parametrize("bad", ["", "   "])
def test_normalize_key_rejects_empty(bad):
    with pytest.raises(ValueError):
        normalize_key(bad)


def test_baseline_examples(ont):
    assert baseline_classify("email", ont) == ("Contact Information", 1.0)
    assert baseline_classify("os", ont) == ("Device Information", 1.0)
    assert baseline_classify("zqx9", ont) is None


def test_baseline_containment(ont):
    label, conf = baseline_classify("user_email_address_hash", ont)
    assert (label, conf) == ("Contact Information", 0.7)


@given(st.text(min_size=1, max_size=30))
@settings(max_examples=200, deadline=None)
def test_baseline_labels_stay_in_ontology(key):
    from diffaudit.ontology import load_ontology
    ont = load_ontology()
    hit = baseline_classify(key, ont)
    assert hit is None or (hit[0] in ont.label_names and hit[1] in (0.7, 1.0))


# prompt

def test_build_prompt_contents(ont):
    text = build_prompt(ont, ["email"])
    assert "Report a score of confidence on a scale of 0 to 1" in text
    assert text.startswith(SYSTEM_PROMPT)
    for label in ont:
        assert f"{label.name}: " in text
    assert text.endswith("Input texts:\nemail")


def test_build_prompt_keeps_order(ont):
    text = build_prompt(ont, ["zeta", "alpha"])
    assert text.index("\nzeta") < text.index("\nalpha")


def test_build_prompt_batch_limits(ont):
    with pytest.raises(ValueError):
        build_prompt(ont, [])
    with pytest.raises(ValueError):
        build_messages(ont, ["a", "b", "c"], max_batch=2)


def test_prompt_hash_is_batch_independent(ont):
    assert len(prompt_hash(ont)) == 16
    assert prompt_hash(ont) == prompt_hash(ont)


def test_parse_examples(ont):
    r, = parse_llm_response("email // Contact Information // 0.95 // email address is contact info", ont, ["email"])
    assert (r.parse_ok, r.label, r.confidence) == (True, "Contact Information", 0.95)
    r, = parse_llm_response("email // Banana // 0.9 // x", ont, ["email"])
    assert not r.parse_ok and r.label is None and r.error == "unknown_label"
    a, b = parse_llm_response("email // Contact Information // 0.9 // x", ont, ["email", "uid"])
    assert a.parse_ok and not b.parse_ok and b.error == "missing"


@pytest.mark.parametrize("line,error", [
    ("email // Contact Information // 1.5 // x", "bad_score"),
    ("email // Contact Information // high // x", "bad_score"),
    ("email // Contact Information // nan // x", "bad_score"),
    ("email -> Contact Information (0.9)", "missing"),
    ("email // Contact Information", "malformed"),
])
def test_parse_rejects(ont, line, error):
    r, = parse_llm_response(line, ont, ["email"])
    assert not r.parse_ok and r.error == error


def test_parse_lenient_forms(ont):
    text = "\n".join([
        "1. EMAIL // contact information // 0.9 // case folded",
        "- \"a//b\" // Aliases // 0.8 //",
        "uid // Aliases // 0.7",
        "uid // Name // 0.99 // later lines for a key are ignored",
    ])
    got = parse_llm_response(text, ont, ["email", "a//b", "uid"], temperature=0.25)
    assert [(r.key, r.label, r.confidence, r.temperature) for r in got] == [
        ("email", "Contact Information", 0.9, 0.25),
        ("a//b", "Aliases", 0.8, 0.25),
        ("uid", "Aliases", 0.7, 0.25),
    ]


def test_parse_prefers_a_later_good_line(ont):
    r, = parse_llm_response("uid // Nope // 0.9 // x\nuid // Aliases // 0.6 // y", ont, ["uid"])
    assert r.parse_ok and r.label == "Aliases"


@given(st.lists(st.text(alphabet="abc_/ ", min_size=1, max_size=6), min_size=1, max_size=6, unique=True),
       st.text(max_size=200))
@settings(deadline=None)
def test_parse_length_matches_batch(batch, text):
    from diffaudit.ontology import load_ontology
    batch = [b for b in batch if b.strip()] or ["k"]
    out = parse_llm_response(text, load_ontology(), batch)
    assert [r.key for r in out] == batch
    assert all(not r.parse_ok or 0 <= r.confidence <= 1 for r in out)


def test_response_fixture(ont):
    doc = load_json("llm_responses.json")
    failures = 0
    for item in doc["responses"]:
        got = parse_llm_response(item["response"], ont, item["batch"], item["temperature"])
        for r, want in zip(got, item["expected"]):
            assert r.key == want["key"] and r.parse_ok == want["parse_ok"]
            if want["parse_ok"]:
                assert (r.label, r.confidence) == (want["label"], want["confidence"])
            failures += not r.parse_ok
    assert failures == 30


# clients

def test_request_digest_is_canonical():
    m = [{"role": "user", "content": "x"}]
    assert request_digest(m, model="gpt-4", temperature=0) == request_digest(m, model="gpt-4", temperature=0.0)
    assert request_digest(m, model="gpt-4", temperature=0) != request_digest(m, model="gpt-4", temperature=0.25)


def test_record_then_replay(tmp_path, ont):
    rec = RecordingClient(ScriptedResponder(), tmp_path)
    first = run_ensemble(["uid", "email", "cb"], rec, ont)
    assert len(list(tmp_path.iterdir())) == 5
    replay = ReplayClient(tmp_path)
    assert run_ensemble(["uid", "email", "cb"], replay, ont) == first
    assert run_ensemble(["uid", "email", "cb"], replay, ont) == first
    with pytest.raises(FixtureMissingError):
        replay.complete([{"role": "user", "content": "new"}], model="gpt-4", temperature=0.0)


def test_replay_dir_must_exist(tmp_path):
    with pytest.raises(FileNotFoundError):
        ReplayClient(tmp_path / "nope")


def _mock_client(handler):
    return ChatCompletionClient("https://llm.test/v1/chat/completions", api_key="k",
                                transport=httpx.MockTransport(handler))


def test_http_client_request_and_errors():
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        assert request.headers["Authorization"] == "Bearer k"
        return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

    client = _mock_client(handler)
    assert client.complete([{"role": "user", "content": "hi"}], model="m", temperature=0.5) == "ok"
    assert seen == [{"model": "m", "temperature": 0.5, "messages": [{"role": "user", "content": "hi"}]}]
    for status, body in ((500, {}), (429, {}), (200, {"nope": 1})):
        bad = _mock_client(lambda r, s=status, b=body: httpx.Response(s, json=b))
        with pytest.raises(ClientError):
            bad.complete([], model="m", temperature=0.0)


def test_http_client_needs_a_key(monkeypatch):
    monkeypatch.delenv("DIFFAUDIT_API_KEY", raising=False)
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    with pytest.raises(ValueError):
        ChatCompletionClient()


def test_retries_then_success(ont):
    calls = Counter()
    responder = ScriptedResponder()

    def handler(request):
        doc = json.loads(request.content)
        calls[doc["temperature"]] += 1
        if calls[doc["temperature"]] == 1:
            return httpx.Response(503)
        text = responder.complete(doc["messages"], model=doc["model"], temperature=doc["temperature"])
        return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})

    out = run_ensemble(["uid"], _mock_client(handler), ont, retries=2, backoff=0)
    assert all(r.parse_ok for r in out["uid"])
    assert set(calls.values()) == {2}


class FlakyAt:
    def __init__(self, temperature):
        self.bad = temperature
        self.inner = ScriptedResponder()

    def complete(self, messages, *, model, temperature):
        if temperature == self.bad:
            raise TimeoutError("simulated timeout")
        return self.inner.complete(messages, model=model, temperature=temperature)


def test_timeout_at_one_temperature(ont):
    runner = EnsembleRunner(FlakyAt(0.5), ont, retries=1, backoff=0)
    out = runner.run(["uid"])["uid"]
    assert len(out) == 5
    assert [r.parse_ok for r in out] == [True, True, False, True, True]
    assert out[2].error == "client_error"
    assert runner.stats.failed_calls == 1 and runner.stats.remote_calls == 6


# ensemble

def test_one_result_per_temperature(ont):
    out = run_ensemble(["email"], ScriptedResponder(), ont)
    assert [r.temperature for r in out["email"]] == list(TEMPS)


def test_normalized_duplicates_share_one_call(ont):
    client = ScriptedResponder({"userId": ("Aliases", 0.9), "user_id": ("Aliases", 0.9)})
    runner = EnsembleRunner(client, ont, batch_size=8)
    out = runner.run(["user_id", "userId", "user_id"])
    assert sorted(out) == ["userId", "user_id"]
    assert client.calls == 5
    assert [r.key for r in out["user_id"]] == ["user_id"] * 5


def test_cache_warm_rerun_makes_no_calls(tmp_path, ont):
    path = tmp_path / "cache.json"
    cache = RunCache(path)
    cold = EnsembleRunner(ScriptedResponder(), ont, cache=cache)
    first = cold.run(["uid", "email"])
    cache.save()
    before = path.read_bytes()
    client = ScriptedResponder()
    warm = EnsembleRunner(client, ont, cache=RunCache(path))
    assert warm.run(["uid", "email"]) == first
    assert client.calls == 0 and warm.stats.remote_calls == 0
    assert warm.stats.cache_hits == 10 and warm.stats.cache_misses == 0
    warm.cache.save()
    assert path.read_bytes() == before


def test_parallel_matches_serial(ont):
    keys = [f"key{i}" for i in range(30)]
    serial = run_ensemble(keys, ScriptedResponder(), ont, batch_size=4)
    parallel = run_ensemble(keys, ScriptedResponder(), ont, batch_size=4, parallelism=4)
    assert serial == parallel


# vote

def test_vote_examples():
    rs = runs("k", [("Name", 0.9), ("Name", 0.8), ("Aliases", 0.7), ("Name", 0.7), ("Login Information", 0.6)])
    avg, mx = majority_vote(rs, "majority_avg"), majority_vote(rs, "majority_max")
    assert avg.label == "Name" and avg.confidence == pytest.approx(0.8)
    assert (mx.label, mx.confidence, mx.support, mx.tied) == ("Name", 0.9, 3, False)
    same = runs("k", [("Age", 0.9)] * 5)
    assert majority_vote(same, "avg").confidence == pytest.approx(0.9)
    assert majority_vote(same, "max").confidence == 0.9


def test_vote_abstains_and_ties():
    assert majority_vote(runs("k", [(None, 0)] * 5)) is None
    v = majority_vote(runs("k", [("Name", 0.9), ("Name", 0.5), ("Age", 0.8), ("Age", 0.8), (None, 0)]))
    assert (v.label, v.tied) == ("Age", True)
    v = majority_vote(runs("k", [("Name", 0.8), ("Age", 0.8)]))
    assert (v.label, v.tied) == ("Age", True)
    with pytest.raises(ValueError):
        majority_vote(runs("k", [("Name", 0.8)]), "median")
    with pytest.raises(ValueError):
        majority_vote(runs("a", [("Name", 0.8)]) + runs("b", [("Name", 0.8)]))


def test_voted_label_round_trip():
    v = VotedLabel("k", "Name", 0.8, "majority_avg", 3, 5, False)
    assert VotedLabel.from_dict(v.to_dict()) == v


def test_threshold_examples():
    def v(c):
        return VotedLabel("k", "Name", c, "majority_avg", 3)
    assert apply_threshold(v(0.80), 0.8)
    assert not apply_threshold(v(0.79), 0.8)
    assert not apply_threshold(v(0.85), 0.9)
    assert not apply_threshold(None, 0.0)
    with pytest.raises(ValueError):
        apply_threshold(v(0.5), 1.5)


LABELS = ("Name", "Age", "Aliases")
run_lists = st.lists(st.tuples(st.sampled_from(LABELS + (None,)),
                               st.floats(0, 1).map(lambda x: round(x, 2))), min_size=1, max_size=5)


def brute_force(pairs):
    counts = Counter(lab for lab, _ in pairs if lab is not None)
    if not counts:
        return None
    best = max(counts.values())
    return {lab for lab, n in counts.items() if n == best}


@given(run_lists)
def test_vote_matches_brute_force_plurality(pairs):
    rs = runs("k", pairs)
    winners = brute_force(pairs)
    for mode in ("avg", "max"):
        v = majority_vote(rs, mode)
        if winners is None:
            assert v is None
            continue
        assert v.label in winners and v.tied == (len(winners) > 1)
        assert v.support == Counter(lab for lab, _ in pairs)[v.label]
    if winners is not None:
        assert majority_vote(rs, "avg").confidence <= majority_vote(rs, "max").confidence + 1e-12


@given(st.lists(st.floats(0, 1), max_size=50))
def test_kept_count_non_increasing(confs):
    voted = [VotedLabel("k", "Name", c, "majority_avg", 1) for c in confs]
    kept = [sum(apply_threshold(v, t) for v in voted) for t in np.linspace(0, 1, 21)]
    assert kept == sorted(kept, reverse=True)


# validation

def test_validate_examples():
    sample = LabeledSample((("a", "Name"), ("b", "Name"), ("c", "Name"), ("d", "Name")))

    def v(label, c):
        return VotedLabel("", label, c, "majority_avg", 1)
    voted = {"a": v("Name", 0.95), "b": v("Name", 0.85), "c": v("Age", 0.75), "d": v("Name", 0.6)}
    rep = validate_against_sample(sample, voted, (0.8,))
    assert rep.accuracy == 0.75
    assert (rep.thresholds[0].labeled, rep.thresholds[0].accuracy) == (2, 1.0)
    voted["a"] = None
    assert validate_against_sample(sample, voted).accuracy == 0.5
    with pytest.raises(KeyError):
        validate_against_sample(sample, {"a": None})


def test_validation_table_layout(ont):
    sample = LabeledSample((("uid", "Aliases"), ("ts", "Location Time"), ("cb", "Service Information")))
    per_key = run_ensemble(sample.keys, ScriptedResponder(), ont)
    table = validation_table(sample, per_key)
    assert [r.method for r in table.reports] == ["0", "0.25", "0.5", "0.75", "1", "Majority-Max", "Majority-Avg"]
    assert table.header()[:4] == ["Method", "Accuracy", "Confidence 0.7 Accuracy", "Confidence 0.7 Labeled"]
    text = table.to_text()
    assert "Accuracy  Labeled" in text and "Majority-Avg" in text
    # ts is outvoted at t >= 0.75; cb is malformed at t = 1.0
    assert table.reports[3].accuracy == pytest.approx(2 / 3)
    assert table.to_dict()["thresholds"] == [0.7, 0.8, 0.9]
    assert table.to_csv().splitlines()[0].startswith("Method,Accuracy,")


def test_labeled_sample_io(tmp_path, ont):
    path = tmp_path / "s.csv"
    path.write_text("key,label\nemail,contact information\n")
    assert load_labeled_sample(path, ont).items == (("email", "Contact Information"),)
    path.write_text("key,label\nemail,Banana\n")
    with pytest.raises(ValueError, match="Banana"):
        load_labeled_sample(path, ont)


def test_sample_keys_is_seeded():
    keys = [f"k{i}" for i in range(100)]
    assert sample_keys(keys, 0.1, seed=3) == sample_keys(reversed(keys), 0.1, seed=3)
    assert len(sample_keys(keys, 0.1)) == 10
    assert sample_keys([], 0.5) == []


# estimator

def test_estimator_params_and_clone():
    clf = DataTypeClassifier(mode="baseline", threshold=0.7)
    assert clone(clf).get_params()["threshold"] == 0.7
    with pytest.raises(ValueError):
        DataTypeClassifier(mode="magic").fit()
    with pytest.raises(ValueError):
        DataTypeClassifier(mode="ensemble").fit()


def test_estimator_baseline_predict():
    clf = DataTypeClassifier(mode="baseline").fit()
    assert len(clf.classes_) == 35
    assert list(clf.predict(["email", "zqx9", "email"])) == ["Contact Information", None, "Contact Information"]
    assert clf.score(["email", "zqx9"], ["Contact Information", "Name"]) == 0.5


def test_estimator_hybrid_sends_only_misses():
    client = ScriptedResponder()
    clf = DataTypeClassifier(mode="hybrid", client=client, threshold=0.8).fit()
    pred = clf.predict(["email", "uid", "x_q7"])
    assert list(pred) == ["Contact Information", "Aliases", None]
    assert sorted(clf.runs_) == ["uid", "x_q7"]
    assert clf.stats_.remote_calls == 5


def test_estimator_ensemble_thresholds_monotone():
    keys = ["uid", "ts", "cb", "x_q7", "lat", "tz"]
    clf = DataTypeClassifier(mode="ensemble", client=ScriptedResponder()).fit()
    voted = clf.vote_keys(keys)
    kept = [sum(apply_threshold(v, t) for v in voted.values()) for t in (0.5, 0.6, 0.7, 0.8, 0.9)]
    assert kept == sorted(kept, reverse=True)
