"""Prompted LLM classification over an OpenAI-compatible chat-completions API."""

import hashlib
import json
import logging
import os
import string
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import httpx
import numpy as np

from .evaluation import FEWSHOT, FoldResult, aggregate_episodes, sample_support
from .ingest import CONTROL, PATIENT

log = logging.getLogger(__name__)

TRANSCRIPT_ONLY = "transcript_only"
LINGUISTIC_ONLY = "linguistic_only"
FULL_DATA = "full_data"
VARIANTS = (TRANSCRIPT_ONLY, LINGUISTIC_ONLY, FULL_DATA)

CHOICES = (CONTROL, PATIENT)
ABSTAIN = "ABSTAIN"

API_KEY_ENV = "CIDETECT_API_KEY"

SYSTEM_PROMPT = (
    "You are a binary classifier for a research dataset (non-diagnostic). "
    "Use only the provided transcript and/or linguistic metrics. "
    "Inputs may be English, Slovene, or Korean; treat multilingualism, accent, dialect, "
    "and topical content as neutral. "
    "Ignore demographic/identity attributes and stereotypes. "
    "Assume no class base-rate. Do not reveal reasoning.\n"
    "\n"
    "Output: Exactly one word — Control or Patient."
)

INSTRUCTIONS = (
    "[INSTRUCTIONS]\n"
    'Classify strictly as "Control" or "Patient" using only evidence present in the '
    "provided fields. Output exactly one word."
)

OUTPUT_FORMAT = "[OUTPUT FORMAT]\nReturn exactly one word: Control or Patient."

# (label, feature attribute) in prompt order
METRIC_LINES = (
    ("Speech Rate", "speech_rate"),
    ("Ttr", "ttr"),
    ("Noun Ratio", "noun_ratio"),
    ("Verb Ratio", "verb_ratio"),
    ("Pronoun Ratio", "pronoun_ratio"),
    ("Pronoun To Noun Ratio", "pronoun_to_noun_ratio"),
    ("Mean Frequency", "familiarity"),
    ("Coherence", "coherence"),
    ("Repetitiveness", "repetitiveness"),
    ("Idea Density", "idea_density"),
    ("Syntactic Complexity", "syntactic_complexity"),
)


class PromptError(ValueError):
    pass


class LlmTransportError(RuntimeError):
    """The endpoint could not be reached or kept failing after all retries."""


def transcript_text(sample):
    return "\n".join(" ".join(t.form for t in u.tokens) for u in sample.utterances)


def _fmt(value):
    return "N/A" if value is None else f"{value:.4f}"


def data_block(variant, sample, features=None):
    """Header plus the data sections a variant allows."""
    if variant not in VARIANTS:
        raise PromptError(f"unknown prompt variant {variant!r}")
    if variant != TRANSCRIPT_ONLY and features is None:
        raise PromptError(f"{variant} prompt for {sample.id} needs a feature vector")
    parts = [f"[DATA INPUT FOR ID: {sample.id}    Language: {sample.language.capitalize()}]"]
    if variant in (TRANSCRIPT_ONLY, FULL_DATA):
        parts.append("[TRANSCRIPT]\n" + transcript_text(sample))
    if variant in (LINGUISTIC_ONLY, FULL_DATA):
        lines = [f"- {label}: {_fmt(getattr(features, attr))}" for label, attr in METRIC_LINES]
        parts.append("[LINGUISTIC METRICS]\n" + "\n".join(lines))
    return "\n\n".join(parts)


def render_prompt(variant, sample, features=None, examples=None):
    """Return ``(system_text, user_text)``.

    ``examples`` is an optional list of ``(sample, features, label)`` support
    cases, rendered in an ``[EXAMPLES (labeled)]`` block ahead of the query.
    """
    blocks = []
    if examples:
        demos = [data_block(variant, s, f) + f"\nLabel: {label}" for s, f, label in examples]
        blocks.append("[EXAMPLES (labeled)]\n\n" + "\n\n".join(demos))
    blocks.append(data_block(variant, sample, features))
    blocks.append(INSTRUCTIONS)
    blocks.append(OUTPUT_FORMAT)
    return SYSTEM_PROMPT, "\n\n".join(blocks) + "\n"


@dataclass(frozen=True)
class LlmRequest:
    endpoint: str
    model: str
    system: str
    user: str
    temperature: float = 0.0
    choices: Tuple[str, ...] = CHOICES
    timeout: float = 60.0
    max_retries: int = 3

    def cache_key(self):
        blob = json.dumps([self.model, self.system, self.user, self.temperature, list(self.choices)])
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class LlmVerdict:
    raw: str
    label: str  # Patient, Control or ABSTAIN
    path: str  # exact, case_fold, substring, abstain

    @property
    def abstained(self):
        return self.label == ABSTAIN


def parse_verdict(text, choices=CHOICES):
    """Map a completion onto one of the choices, or ABSTAIN.

    Only the first whitespace-delimited token is inspected: exact match,
    then case-insensitive match with surrounding punctuation stripped, then a
    unique case-insensitive substring match.
    """
    parts = (text or "").split()
    if not parts:
        return LlmVerdict(text or "", ABSTAIN, "abstain")
    token = parts[0]
    if token in choices:
        return LlmVerdict(text, token, "exact")
    folded = token.strip(string.punctuation).lower()
    for c in choices:
        if folded == c.lower():
            return LlmVerdict(text, c, "case_fold")
    hits = [c for c in choices if c.lower() in token.lower()]
    if len(hits) == 1:
        return LlmVerdict(text, hits[0], "substring")
    return LlmVerdict(text, ABSTAIN, "abstain")


class ResponseCache:
    """One JSON file per request key under ``directory``."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key):
        return self.directory / f"{key}.json"

    def get(self, key):
        path = self._path(key)
        if not path.is_file():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["content"]

    def put(self, key, content):
        tmp = self.directory / f"{key}.{os.getpid()}.{threading.get_ident()}.tmp"
        tmp.write_text(json.dumps({"content": content}), encoding="utf-8")
        os.replace(tmp, self._path(key))

    def __len__(self):
        return len(list(self.directory.glob("*.json")))


def _chat_url(endpoint):
    endpoint = endpoint.rstrip("/")
    if endpoint.endswith("/chat/completions"):
        return endpoint
    return endpoint + "/chat/completions"


@dataclass
class LlmClient:
    """Chat-completions client with retries, guided choice and a response cache."""

    endpoint: str
    model: str
    api_key: Optional[str] = None
    cache_dir: Optional[str] = None
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 0.5
    guided_choice: bool = True
    network_calls: int = field(default=0, init=False)

    def __post_init__(self):
        if self.api_key is None:
            self.api_key = os.environ.get(API_KEY_ENV) or os.environ.get("OPENAI_API_KEY")
        self._cache = ResponseCache(self.cache_dir) if self.cache_dir else None
        self._http = httpx.Client(timeout=self.timeout)
        self._lock = threading.Lock()

    def close(self):
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def request(self, system, user, temperature=0.0):
        return LlmRequest(self.endpoint, self.model, system, user, temperature, CHOICES,
                          self.timeout, self.max_retries)

    def _post(self, body):
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = _chat_url(self.endpoint)
        last = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._lock:
                    self.network_calls += 1
                resp = self._http.post(url, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last = exc
                log.warning("LLM request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = RuntimeError(f"HTTP {resp.status_code}")
                log.warning("LLM endpoint returned %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            return resp
        raise LlmTransportError(f"giving up on {url} after {self.max_retries + 1} attempts: {last}")

    def complete(self, req):
        body = {"model": req.model,
                "messages": [{"role": "system", "content": req.system},
                             {"role": "user", "content": req.user}],
                "temperature": req.temperature}
        if self.guided_choice:
            body["guided_choice"] = list(req.choices)
        resp = self._post(body)
        if resp.status_code in (400, 422) and "guided_choice" in body:
            # server does not know the extension field; drop it for good
            log.warning("endpoint rejected guided_choice; retrying without it")
            self.guided_choice = False
            body.pop("guided_choice")
            resp = self._post(body)
        if resp.status_code >= 400:
            raise LlmTransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise LlmTransportError(f"malformed completion payload: {exc}") from None

    def classify(self, req):
        key = req.cache_key()
        content = self._cache.get(key) if self._cache is not None else None
        if content is None:
            content = self.complete(req)
            if self._cache is not None:
                self._cache.put(key, content)
        return parse_verdict(content, req.choices)


def classify(request, client=None):
    """Send one request; a throwaway client is used unless one is given."""
    if client is not None:
        return client.classify(request)
    with LlmClient(request.endpoint, request.model, timeout=request.timeout,
                   max_retries=request.max_retries) as c:
        return c.classify(request)


def _label_or_none(verdict):
    return None if verdict.abstained else verdict.label


def run_llm_eval(client, samples, features, variant, mode="zeroshot", k=None, episodes=3, seed=0,
                 max_inflight=4):
    """Classify every sample of one language.

    Zero-shot sends one request per sample. Few-shot reuses the tabular
    support sampler: per episode the 2k support samples become labelled
    demonstrations and the episode labels are combined by majority vote.
    Abstentions are scored as wrong answers and flagged on the result.
    """
    samples = sorted(samples, key=lambda s: s.id)
    ids = tuple(s.id for s in samples)
    y = np.array([1 if s.label == PATIENT else 0 for s in samples])

    def feats(s):
        return None if features is None else features.get(s.id)

    def one(i):
        s = samples[i]
        try:
            if mode != FEWSHOT:
                system, user = render_prompt(variant, s, feats(s))
                verdict = client.classify(client.request(system, user))
                label = _label_or_none(verdict)
                return FoldResult(s.id, seed, s.label, label, vote=label,
                                  episode_labels=(label,), abstained=verdict.abstained)
            labels, supports = [], []
            for e in range(episodes):
                support = sample_support(y, ids, i, k, seed, e)
                supports.append(tuple(ids[j] for j in support))
                demos = [(samples[j], feats(samples[j]), samples[j].label) for j in support]
                system, user = render_prompt(variant, s, feats(s), examples=demos)
                labels.append(_label_or_none(client.classify(client.request(system, user))))
            final, vote, _ = aggregate_episodes(labels)
            return FoldResult(s.id, seed, s.label, final, vote=vote, episode_labels=tuple(labels),
                              supports=tuple(supports), abstained=final is None)
        except (LlmTransportError, ValueError) as exc:
            return FoldResult(s.id, seed, s.label, None, failure=str(exc))

    if max_inflight <= 1:
        results = [one(i) for i in range(len(samples))]
    else:
        with ThreadPoolExecutor(max_workers=max_inflight) as pool:
            results = list(pool.map(one, range(len(samples))))
    return sorted(results, key=lambda r: r.sample_id)
