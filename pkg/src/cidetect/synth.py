"""Seeded synthetic corpora for smoke runs and tests.

Nothing here resembles clinical speech. The generator only has to exercise
every code path: dependency-annotated and unannotated languages, missing
features, and a weak class signal in both the transcripts and the embeddings.
"""

import numpy as np

from .ingest import CONTROL, PATIENT, Corpus, merge_corpora, EmbeddingSet, FrequencyList, Sample, Token, Utterance

# Class counts of the three reference cohorts: (patients, controls).
TABLE1_COUNTS = {"english": (78, 78), "slovene": (12, 15), "korean": (40, 37)}

LANGUAGES = ("english", "korean", "slovene")
DEPENDENCY_LANGUAGES = frozenset({"english", "slovene"})

_POS_CYCLE = ("NOUN", "VERB", "PRON", "ADJ", "ADV", "DET", "PROPN", "ADP")


def _vocabulary(language, rng, size=60):
    """Pseudo-words tagged by POS, with per-million frequencies."""
    prefix = language[:2]
    words = []
    for i in range(size):
        upos = _POS_CYCLE[i % len(_POS_CYCLE)]
        words.append((f"{prefix}{upos.lower()}{i}", upos))
    freqs = {w: float(np.round(rng.lognormal(3.0, 1.5), 4)) for w, _ in words}
    return words, freqs


def _random_heads(n, rng):
    """Heads of a uniformly grown random tree over ``n`` tokens (1-based, 0 = root)."""
    order = rng.permutation(n) + 1
    heads = np.zeros(n + 1, dtype=int)
    for pos in range(1, n):
        heads[order[pos]] = order[rng.integers(0, pos)]
    heads[order[0]] = 0
    return heads[1:].tolist()


def _utterance(words, patient, with_deps, rng):
    n = int(rng.integers(3, 7) if patient else rng.integers(5, 10))
    # patients lean on pronouns
    pron_weight = 3.0 if patient else 1.0
    weights = np.array([pron_weight if upos == "PRON" else 1.0 for _, upos in words])
    picks = rng.choice(len(words), size=n, p=weights / weights.sum())
    heads = _random_heads(n, rng) if with_deps else [None] * n
    tokens = []
    for j, w in enumerate(picks):
        form, upos = words[w]
        head = heads[j]
        deprel = None if head is None else ("root" if head == 0 else "dep")
        tokens.append(Token(form=form, lemma=form, upos=upos, deprel=deprel, head=head))
    return Utterance(tuple(tokens))


def _embedding_set(sid, n_utts, patient, dim, separation, rng):
    centre = np.zeros(dim)
    centre[0] = separation if patient else -separation
    doc = centre + rng.normal(size=dim)
    utts = centre + rng.normal(size=(n_utts, dim))
    return EmbeddingSet(sid, doc, utts, provenance="synthetic-gaussian")


def language_corpus(language, n_patients, n_controls, seed=0, dim=16, separation=1.0,
                    with_dependencies=None):
    """One language's synthetic corpus; sample ids are ``<lang>-NNN``."""
    if with_dependencies is None:
        with_dependencies = language in DEPENDENCY_LANGUAGES
    rng = np.random.default_rng([seed, sum(language.encode())])
    words, freqs = _vocabulary(language, rng)
    labels = [PATIENT] * n_patients + [CONTROL] * n_controls
    rng.shuffle(labels)
    samples, embeddings = [], {}
    for i, label in enumerate(labels):
        sid = f"{language[:2]}-{i:03d}"
        patient = label == PATIENT
        utts = tuple(Utterance(u.tokens, utterance_embedding_id=j) for j, u in enumerate(
            _utterance(words, patient, with_dependencies, rng) for _ in range(int(rng.integers(3, 6)))))
        n_tokens = sum(len(u) for u in utts)
        duration = float(np.round(n_tokens / rng.uniform(1.2, 1.8 if patient else 2.6), 3))
        samples.append(Sample(sid, language, label, utts, duration, with_dependencies))
        embeddings[sid] = _embedding_set(sid, len(utts), patient, dim, separation, rng)
    freq = FrequencyList(language, freqs)
    return Corpus(tuple(samples), embeddings, {language: freq})


def mini_corpus(seed=0, per_language=20, dim=16):
    """Three languages, ``per_language`` balanced samples each; Korean lacks dependencies."""
    return merge_corpora([language_corpus(lang, per_language // 2, per_language - per_language // 2,
                                          seed=seed, dim=dim) for lang in LANGUAGES])


def table1_corpus(seed=0, dim=8):
    """All three languages at the reference class counts."""
    return merge_corpora([language_corpus(lang, p, c, seed=seed, dim=dim)
                          for lang, (p, c) in TABLE1_COUNTS.items()])
