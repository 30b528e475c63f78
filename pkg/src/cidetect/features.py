"""The 11 symbolic linguistic features computed per participant."""

import csv
from dataclasses import astuple, dataclass, fields
from itertools import combinations
from typing import Optional

import numpy as np

FEATURE_NAMES = (
    "speech_rate",
    "ttr",
    "repetitiveness",
    "coherence",
    "familiarity",
    "idea_density",
    "syntactic_complexity",
    "verb_ratio",
    "noun_ratio",
    "pronoun_ratio",
    "pronoun_to_noun_ratio",
)

NOUN_TAGS = frozenset({"NOUN", "PROPN"})


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    """One value per feature; ``None`` marks a missing value."""

    speech_rate: Optional[float]
    ttr: Optional[float]
    repetitiveness: Optional[float]
    coherence: Optional[float]
    familiarity: Optional[float]
    idea_density: Optional[float]
    syntactic_complexity: Optional[float]
    verb_ratio: Optional[float]
    noun_ratio: Optional[float]
    pronoun_ratio: Optional[float]
    pronoun_to_noun_ratio: Optional[float]

    def as_array(self):
        return np.array([np.nan if v is None else v for v in astuple(self)], dtype=np.float64)

    @property
    def missing(self):
        return [f.name for f in fields(self) if getattr(self, f.name) is None]


@dataclass(frozen=True)
class FeatureConfig:
    """Policies the source method leaves open.

    familiarity_lookup: ``form_then_lemma`` (default), ``form`` or ``lemma``.
    oov_policy: ``zero`` counts unknown words as frequency 0, ``skip`` drops them.
    """

    familiarity_lookup: str = "form_then_lemma"
    oov_policy: str = "zero"
    lowercase_types: bool = True

    def __post_init__(self):
        if self.familiarity_lookup not in ("form_then_lemma", "form", "lemma"):
            raise ValueError(f"unknown familiarity_lookup {self.familiarity_lookup!r}")
        if self.oov_policy not in ("zero", "skip"):
            raise ValueError(f"unknown oov_policy {self.oov_policy!r}")


DEFAULT_CONFIG = FeatureConfig()


def speech_rate(sample):
    if sample.duration_seconds <= 0:
        raise FeatureError(f"non-positive duration for sample {sample.id}")
    return sample.n_tokens / sample.duration_seconds


def type_token_ratio(sample, lowercase=True):
    forms = [t.form.lower() if lowercase else t.form for t in sample.tokens]
    if not forms:
        raise FeatureError(f"sample {sample.id} has no tokens")
    return len(set(forms)) / len(forms)


def _unit_rows(vectors, sample_id):
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise FeatureError(f"zero-norm utterance vector at utterance {int(zero[0])} of sample {sample_id}")
    return vectors / norms[:, None]


def _cosine_distance(u, v):
    # clipped so rounding never leaves [0, 2]
    return float(min(2.0, max(0.0, 1.0 - float(u @ v))))


def repetitiveness(sample, emb):
    """Mean cosine distance between consecutive utterance vectors."""
    vecs = emb.utterance_vectors
    if len(vecs) != len(sample.utterances):
        raise FeatureError(f"utterance vectors not aligned with utterances for sample {sample.id}")
    if len(vecs) < 2:
        return None
    unit = _unit_rows(vecs, sample.id)
    return float(np.mean([_cosine_distance(unit[i], unit[i + 1]) for i in range(len(unit) - 1)]))


def coherence(sample, emb):
    """Mean cosine distance over all unordered pairs of utterances."""
    vecs = emb.utterance_vectors
    if len(vecs) != len(sample.utterances):
        raise FeatureError(f"utterance vectors not aligned with utterances for sample {sample.id}")
    if len(vecs) < 2:
        return None
    unit = _unit_rows(vecs, sample.id)
    return float(np.mean([_cosine_distance(unit[i], unit[j])
                          for i, j in combinations(range(len(unit)), 2)]))


def familiarity(sample, freq, config=DEFAULT_CONFIG):
    """Mean per-million frequency over the sample's unique (lowercased) words."""
    lemma_of = {}
    for t in sample.tokens:
        lemma_of.setdefault(t.form.lower(), t.lemma.lower())
    values = []
    for form, lemma in lemma_of.items():
        value = None
        if config.familiarity_lookup in ("form_then_lemma", "form"):
            value = freq.get(form)
        if value is None and config.familiarity_lookup in ("form_then_lemma", "lemma") and lemma != "_":
            value = freq.get(lemma)
        if value is None:
            if config.oov_policy == "skip":
                continue
            value = 0.0
        values.append(value)
    if not values:
        return None
    return float(np.mean(values))


def idea_density(sample):
    """Share of tokens tagged VERB; missing for samples without dependency parses."""
    if not sample.has_dependencies:
        return None
    tokens = sample.tokens
    return sum(t.upos == "VERB" for t in tokens) / len(tokens)


def _utterance_depth(utt, where):
    n = len(utt.tokens)
    best = 0
    for i in range(1, n + 1):
        depth, node = 1, i
        while utt.tokens[node - 1].head != 0:
            node = utt.tokens[node - 1].head
            depth += 1
            if depth > n:
                raise FeatureError(f"dependency cycle in {where}")
        best = max(best, depth)
    return best


def syntactic_complexity(sample):
    """Mean over utterances of the maximal root-to-token depth (root counts as 1)."""
    if not sample.has_dependencies:
        return None
    depths = [_utterance_depth(u, f"utterance {i} of sample {sample.id}")
              for i, u in enumerate(sample.utterances)]
    return float(np.mean(depths))


def pos_ratios(sample):
    tokens = sample.tokens
    n = len(tokens)
    if n == 0:
        raise FeatureError(f"sample {sample.id} has no tokens")
    verbs = sum(t.upos == "VERB" for t in tokens)
    nouns = sum(t.upos in NOUN_TAGS for t in tokens)
    prons = sum(t.upos == "PRON" for t in tokens)
    ratio = prons / nouns if nouns else None
    return verbs / n, nouns / n, prons / n, ratio


def sample_features(sample, emb, freq, config=DEFAULT_CONFIG):
    verb, noun, pron, p2n = pos_ratios(sample)
    return FeatureVector(
        speech_rate=speech_rate(sample),
        ttr=type_token_ratio(sample, lowercase=config.lowercase_types),
        repetitiveness=repetitiveness(sample, emb),
        coherence=coherence(sample, emb),
        familiarity=familiarity(sample, freq, config),
        idea_density=idea_density(sample),
        syntactic_complexity=syntactic_complexity(sample),
        verb_ratio=verb,
        noun_ratio=noun,
        pronoun_ratio=pron,
        pronoun_to_noun_ratio=p2n,
    )


def extract_features(corpus, config=DEFAULT_CONFIG):
    """Feature vector for every sample, keyed by sample id (corpus order)."""
    out = {}
    for s in corpus.samples:
        freq = corpus.frequency_lists.get(s.language)
        if freq is None:
            raise FeatureError(f"no frequency list for language {s.language!r}")
        out[s.id] = sample_features(s, corpus.embeddings[s.id], freq, config)
    return out


def feature_matrix(samples, features):
    """Stack feature vectors of ``samples`` into an ``(n, 11)`` array, NaN for missing."""
    return np.vstack([features[s.id].as_array() for s in samples])


def write_feature_csv(path, samples, features):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "label", *FEATURE_NAMES])
        for s in samples:
            vec = features[s.id]
            writer.writerow([s.id, s.label] + ["" if v is None else repr(float(v)) for v in astuple(vec)])


def read_feature_csv(path):
    """Inverse of :func:`write_feature_csv`: ``{sample_id: (label, FeatureVector)}``."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            values = {n: (None if row[n] == "" else float(row[n])) for n in FEATURE_NAMES}
            out[row["sample_id"]] = (row["label"], FeatureVector(**values))
    return out
