from collections import Counter
from pathlib import Path

import pytest

from cidetect.evaluation import FEWSHOT, ZEROSHOT, macro_f1
from cidetect.features import FeatureVector
from cidetect.llmclient import (ABSTAIN, FULL_DATA, LINGUISTIC_ONLY, SYSTEM_PROMPT, TRANSCRIPT_ONLY,
                                LlmClient, LlmRequest, LlmTransportError, PromptError, ResponseCache,
                                classify, parse_verdict, render_prompt, run_llm_eval)
from cidetect.synth import language_corpus
from conftest import make_sample
from mockllm import MockLLM, query_id, user_text

GOLDEN = Path(__file__).parent / "golden"


def golden(name):
    return (GOLDEN / name).read_text(encoding="utf-8")


def _words(text, upos="X"):
    return [(w, upos) for w in text.split()]


QUERY = make_sample([_words("the boy is on the stool"), _words("he takes a cookie")], sid="en-007",
                    label="Patient")
QUERY_FEATURES = FeatureVector(
    speech_rate=1.23461, ttr=0.8, repetitiveness=0.5, coherence=0.654321, familiarity=123.45678,
    idea_density=0.2, syntactic_complexity=3.5, verb_ratio=0.2, noun_ratio=0.3, pronoun_ratio=0.1,
    pronoun_to_noun_ratio=1 / 3)

KOREAN = make_sample([_words("a b c d")], sid="ko-003", language="korean", label="Control")
KOREAN_FEATURES = FeatureVector(
    speech_rate=2.0, ttr=0.75, repetitiveness=None, coherence=None, familiarity=0.0,
    idea_density=None, syntactic_complexity=None, verb_ratio=0.25, noun_ratio=0.25,
    pronoun_ratio=0.0, pronoun_to_noun_ratio=0.0)


# -- prompt rendering ---------------------------------------------------------

@pytest.mark.parametrize("variant", [TRANSCRIPT_ONLY, LINGUISTIC_ONLY, FULL_DATA])
def test_prompt_matches_golden(variant):
    system, user = render_prompt(variant, QUERY, QUERY_FEATURES)
    assert system == golden("system.txt")
    assert user == golden(f"{variant}.txt")


def test_system_prompt_is_shared_by_variants():
    systems = {render_prompt(v, QUERY, QUERY_FEATURES)[0] for v in (TRANSCRIPT_ONLY, FULL_DATA)}
    assert systems == {SYSTEM_PROMPT}


def test_output_format_line_is_exact():
    _, user = render_prompt(FULL_DATA, QUERY, QUERY_FEATURES)
    assert user.rstrip("\n").endswith("[OUTPUT FORMAT]\nReturn exactly one word: Control or Patient.")


def test_metrics_block_has_eleven_lines_in_order():
    _, user = render_prompt(LINGUISTIC_ONLY, QUERY, QUERY_FEATURES)
    block = user.split("[LINGUISTIC METRICS]\n")[1].split("\n\n")[0].splitlines()
    labels = [line[2:].split(":")[0] for line in block]
    assert labels == ["Speech Rate", "Ttr", "Noun Ratio", "Verb Ratio", "Pronoun Ratio",
                      "Pronoun To Noun Ratio", "Mean Frequency", "Coherence", "Repetitiveness",
                      "Idea Density", "Syntactic Complexity"]


def test_missing_features_render_as_na():
    _, user = render_prompt(LINGUISTIC_ONLY, KOREAN, KOREAN_FEATURES)
    assert user == golden("linguistic_only_korean.txt")
    assert user.count(": N/A") == 4


def test_transcript_only_never_shows_metrics():
    _, user = render_prompt(TRANSCRIPT_ONLY, QUERY, QUERY_FEATURES)
    assert "[LINGUISTIC METRICS]" not in user and "0.8000" not in user


def test_fewshot_examples_block():
    demos = [(make_sample([_words("mother is washing dishes")], sid="en-001", label="Control"), None,
              "Control"),
             (make_sample([_words("uh the the thing")], sid="en-002"), None, "Patient")]
    _, user = render_prompt(TRANSCRIPT_ONLY, QUERY, examples=demos)
    assert user == golden("fewshot_transcript_only.txt")


def test_feature_variants_need_features():
    with pytest.raises(PromptError):
        render_prompt(LINGUISTIC_ONLY, QUERY)
    with pytest.raises(PromptError):
        render_prompt("everything", QUERY, QUERY_FEATURES)


# -- verdict parsing ----------------------------------------------------------

@pytest.mark.parametrize("text,label,path", [
    ("Patient", "Patient", "exact"),
    ("Control", "Control", "exact"),
    ("Control\n", "Control", "exact"),
    ("patient.", "Patient", "case_fold"),
    ("CONTROL", "Control", "case_fold"),
    ("**Patient**", "Patient", "case_fold"),
    ("Patient-like pattern", "Patient", "substring"),
    ("I cannot say", ABSTAIN, "abstain"),
    ("", ABSTAIN, "abstain"),
    ("ControlPatient", ABSTAIN, "abstain"),
    ("Maybe Patient", ABSTAIN, "abstain"),
])
def test_parse_ladder(text, label, path):
    v = parse_verdict(text)
    assert (v.label, v.path) == (label, path)
    assert v.abstained == (label == ABSTAIN)


# -- transport ----------------------------------------------------------------

def _client(mock, **kw):
    kw.setdefault("backoff", 0.0)
    return LlmClient(mock.url, "test-model", **kw)


def test_request_body_uses_guided_choice_and_zero_temperature():
    with MockLLM(lambda body: "Patient") as mock, _client(mock, api_key="sekret") as client:
        system, user = render_prompt(FULL_DATA, QUERY, QUERY_FEATURES)
        verdict = client.classify(client.request(system, user))
    assert verdict.label == "Patient"
    (body,) = mock.requests
    assert body["guided_choice"] == ["Control", "Patient"]
    assert body["temperature"] == 0.0
    assert body["model"] == "test-model"
    assert body["messages"] == [{"role": "system", "content": system}, {"role": "user", "content": user}]
    assert mock.headers[0]["Authorization"] == "Bearer sekret"


def test_retries_transient_errors():
    replies = iter([(500, {}), (429, {}), "Control"])
    with MockLLM(lambda body: next(replies)) as mock, _client(mock, max_retries=3) as client:
        verdict = client.classify(client.request("s", "u"))
    assert verdict.label == "Control"
    assert len(mock.requests) == 3 and client.network_calls == 3


def test_gives_up_after_max_retries():
    with MockLLM(lambda body: (503, {})) as mock, _client(mock, max_retries=2) as client:
        with pytest.raises(LlmTransportError):
            client.classify(client.request("s", "u"))
    assert len(mock.requests) == 3


def test_falls_back_when_guided_choice_is_rejected():
    def responder(body):
        if "guided_choice" in body:
            return 400, {"error": "unknown field guided_choice"}
        return "patient"

    with MockLLM(responder) as mock, _client(mock) as client:
        assert client.classify(client.request("s", "u")).label == "Patient"
        assert client.classify(client.request("s", "u2")).label == "Patient"
    assert ["guided_choice" in b for b in mock.requests] == [True, False, False]


def test_malformed_payload_is_a_transport_error():
    with MockLLM(lambda body: (200, {"nothing": []})) as mock, _client(mock) as client:
        with pytest.raises(LlmTransportError):
            client.classify(client.request("s", "u"))


def test_unreachable_endpoint():
    req = LlmRequest("http://127.0.0.1:9", "m", "s", "u", timeout=1.0, max_retries=0)
    with pytest.raises(LlmTransportError):
        classify(req)


def test_cache_key_depends_on_content():
    a = LlmRequest("e", "m", "s", "u")
    assert a.cache_key() == LlmRequest("other-endpoint", "m", "s", "u").cache_key()
    assert a.cache_key() != LlmRequest("e", "m", "s", "u!").cache_key()
    assert a.cache_key() != LlmRequest("e", "m2", "s", "u").cache_key()


def test_response_cache_round_trip(tmp_path):
    cache = ResponseCache(tmp_path)
    assert cache.get("abc") is None
    cache.put("abc", "Patient")
    assert cache.get("abc") == "Patient" and len(cache) == 1
    assert not list(tmp_path.glob("*.tmp"))


# -- evaluation over a language -----------------------------------------------

@pytest.fixture(scope="module")
def english():
    corpus = language_corpus("english", 6, 6, seed=3)
    return corpus.by_language("english")


def _truthful(samples):
    labels = {s.id: s.label for s in samples}
    return lambda body: labels[query_id(body)]


def test_zeroshot_one_request_per_sample(english):
    with MockLLM(_truthful(english)) as mock, _client(mock) as client:
        results = run_llm_eval(client, english, None, TRANSCRIPT_ONLY, mode=ZEROSHOT, max_inflight=4)
    assert len(mock.requests) == len(english)
    assert [r.sample_id for r in results] == sorted(s.id for s in english)
    assert macro_f1(results) == 1.0


def test_fewshot_requests_and_demonstrations(english):
    with MockLLM(_truthful(english)) as mock, _client(mock) as client:
        results = run_llm_eval(client, english, None, TRANSCRIPT_ONLY, mode=FEWSHOT, k=2, episodes=3,
                               max_inflight=3)
    assert len(mock.requests) == 3 * len(english)
    per_query = Counter(query_id(b) for b in mock.requests)
    assert set(per_query.values()) == {3}
    for body in mock.requests:
        text = user_text(body)
        assert text.count("\nLabel: Patient") == 2 and text.count("\nLabel: Control") == 2
        # the held-out sample is never its own demonstration
        assert text.count(f"ID: {query_id(body)} ") == 1
    for r in results:
        assert len(r.supports) == 3 and all(len(s) == 4 for s in r.supports)
        assert r.sample_id not in {i for s in r.supports for i in s}
    assert macro_f1(results) == 1.0


def test_warm_cache_makes_no_network_calls(english, tmp_path):
    with MockLLM(_truthful(english)) as mock:
        with _client(mock, cache_dir=tmp_path) as client:
            cold = run_llm_eval(client, english, None, TRANSCRIPT_ONLY, mode=FEWSHOT, k=1, episodes=2)
            cold_calls = client.network_calls
        with _client(mock, cache_dir=tmp_path) as client:
            warm = run_llm_eval(client, english, None, TRANSCRIPT_ONLY, mode=FEWSHOT, k=1, episodes=2)
            assert client.network_calls == 0
    # an episode that redraws an earlier support is already served from the cache
    assert cold_calls == len({user_text(b) for b in mock.requests}) <= 2 * len(english)
    assert warm == cold


def test_abstentions_are_flagged_and_scored_wrong(english):
    with MockLLM(lambda body: "unsure") as mock, _client(mock) as client:
        results = run_llm_eval(client, english, None, TRANSCRIPT_ONLY, max_inflight=1)
    assert all(r.abstained and r.predicted is None for r in results)
    assert macro_f1(results) == 0.0


def test_transport_failures_become_failed_folds(english):
    with MockLLM(lambda body: (500, {})) as mock, _client(mock, max_retries=0) as client:
        results = run_llm_eval(client, english, None, TRANSCRIPT_ONLY)
    assert all(r.failed for r in results)


def test_constant_control_on_balanced_cohort():
    samples = language_corpus("english", 78, 78, seed=0).by_language("english")
    with MockLLM(lambda body: "Control") as mock, _client(mock) as client:
        results = run_llm_eval(client, samples, None, TRANSCRIPT_ONLY, max_inflight=8)
    assert round(macro_f1(results), 3) == 0.333
