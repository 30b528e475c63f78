"""Corpus loading: manifests, CoNLL-U transcripts, embeddings and frequency lists."""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

log = logging.getLogger(__name__)

PATIENT = "Patient"
CONTROL = "Control"
LABELS = (PATIENT, CONTROL)


class CorpusError(ValueError):
    """Raised for any malformed corpus input; carries the sample id and location."""

    def __init__(self, message, sample_id=None, location=None):
        self.sample_id = sample_id
        self.location = location
        where = []
        if sample_id is not None:
            where.append(f"sample {sample_id}")
        if location is not None:
            where.append(str(location))
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass(frozen=True)
class Token:
    form: str
    lemma: str
    upos: str
    deprel: Optional[str] = None
    head: Optional[int] = None


@dataclass(frozen=True)
class Utterance:
    tokens: Tuple[Token, ...]
    utterance_embedding_id: Optional[int] = None

    def __len__(self):
        return len(self.tokens)

    @property
    def has_heads(self):
        return any(t.head is not None for t in self.tokens)


@dataclass(frozen=True)
class Sample:
    id: str
    language: str
    label: str
    utterances: Tuple[Utterance, ...]
    duration_seconds: float
    has_dependencies: bool

    @property
    def tokens(self):
        return [t for u in self.utterances for t in u.tokens]

    @property
    def n_tokens(self):
        return sum(len(u) for u in self.utterances)


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    sample_id: str
    document_vector: np.ndarray
    utterance_vectors: np.ndarray  # (n_utterances, d)
    provenance: str = ""

    @property
    def dim(self):
        return int(self.document_vector.shape[0])

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (self.sample_id == other.sample_id and self.provenance == other.provenance
                and np.array_equal(self.document_vector, other.document_vector)
                and np.array_equal(self.utterance_vectors, other.utterance_vectors))

    __hash__ = None


@dataclass(frozen=True)
class FrequencyList:
    language: str
    entries: Dict[str, float]
    duplicates: int = field(default=0, compare=False)

    def get(self, word, default=None):
        return self.entries.get(word.lower(), default)

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class Corpus:
    samples: Tuple[Sample, ...]
    embeddings: Dict[str, EmbeddingSet]
    frequency_lists: Dict[str, FrequencyList]

    @property
    def languages(self):
        return sorted({s.language for s in self.samples})

    def by_language(self, language):
        return [s for s in self.samples if s.language == language]

    def class_counts(self, language=None):
        counts = {PATIENT: 0, CONTROL: 0}
        for s in self.samples:
            if language is None or s.language == language:
                counts[s.label] += 1
        return counts


# ---------------------------------------------------------------------------
# CoNLL-U


def _check_tree(tokens, sample_id, where):
    n = len(tokens)
    annotated = [t.head is not None for t in tokens]
    if not any(annotated):
        return
    if not all(annotated):
        raise CorpusError("partial dependency annotation in utterance", sample_id, where)
    roots = [i for i, t in enumerate(tokens) if t.head == 0]
    if len(roots) != 1:
        raise CorpusError(f"expected exactly one root, found {len(roots)}", sample_id, where)
    for i, t in enumerate(tokens, start=1):
        if not 0 <= t.head <= n or t.head == i:
            raise CorpusError(f"token {i} has invalid head {t.head}", sample_id, where)
    for start in range(1, n + 1):
        node, steps = start, 0
        while node != 0:
            node = tokens[node - 1].head
            steps += 1
            if steps > n:
                raise CorpusError("dependency cycle", sample_id, where)


def _finish_sentence(rows, sample_id, first_line):
    """Drop punctuation, remap heads onto the kept tokens, build an Utterance."""
    by_id = {r[0]: r for r in rows}
    kept = [r for r in rows if r[3] != "PUNCT"]
    if not kept:
        return None
    new_index = {r[0]: i for i, r in enumerate(kept, start=1)}
    tokens = []
    for tid, form, lemma, upos, head, deprel in kept:
        if head is not None:
            # a head that was punctuation is replaced by its nearest kept ancestor
            seen = 0
            while head != 0 and head not in new_index:
                if head not in by_id or seen > len(rows):
                    raise CorpusError(f"head out of range for token {tid}", sample_id,
                                      f"line {first_line}")
                head = by_id[head][4]
                seen += 1
                if head is None:
                    raise CorpusError("head chain runs into an unannotated token", sample_id,
                                      f"line {first_line}")
            head = 0 if head == 0 else new_index[head]
        tokens.append(Token(form=form, lemma=lemma, upos=upos, deprel=deprel, head=head))
    _check_tree(tokens, sample_id, f"sentence at line {first_line}")
    return Utterance(tokens=tuple(tokens))


def parse_conllu_sample(text, sample_id=None):
    """Parse CoNLL-U text into utterances, one per sentence block.

    Multiword ranges (``3-4``) and empty nodes (``5.1``) are skipped, PUNCT
    tokens are dropped and ``_`` in HEAD/DEPREL means absent.
    """
    utterances = []
    rows = []
    first_line = None

    def flush():
        if rows:
            utt = _finish_sentence(rows, sample_id, first_line)
            if utt is not None:
                utterances.append(utt)
            rows.clear()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise CorpusError(f"expected 10 columns, got {len(cols)}", sample_id, f"line {lineno}")
        tid = cols[0]
        if "-" in tid or "." in tid:
            parts = tid.replace("-", ".").split(".")
            if len(parts) != 2 or not all(p.isdigit() for p in parts):
                raise CorpusError(f"non-integer token id {tid!r}", sample_id, f"line {lineno}")
            continue
        try:
            tid = int(tid)
        except ValueError:
            raise CorpusError(f"non-integer token id {tid!r}", sample_id, f"line {lineno}") from None
        if tid != len(rows) + 1:
            raise CorpusError(f"token id {tid} out of sequence", sample_id, f"line {lineno}")
        if not rows:
            first_line = lineno
        form, lemma, upos = cols[1], cols[2], cols[3]
        if not form:
            raise CorpusError("empty token form", sample_id, f"line {lineno}")
        head = None
        if cols[6] != "_":
            try:
                head = int(cols[6])
            except ValueError:
                raise CorpusError(f"non-integer head {cols[6]!r}", sample_id,
                                  f"line {lineno}") from None
            if head < 0:
                raise CorpusError(f"head out of range: {head}", sample_id, f"line {lineno}")
        deprel = None if cols[7] == "_" else cols[7]
        rows.append((tid, form, lemma, upos, head, deprel))
    flush()
    return utterances


def format_conllu(utterances):
    """Serialise utterances back to CoNLL-U (XPOS, FEATS, DEPS, MISC as ``_``)."""
    blocks = []
    for utt in utterances:
        lines = []
        for i, t in enumerate(utt.tokens, start=1):
            head = "_" if t.head is None else str(t.head)
            deprel = "_" if t.deprel is None else t.deprel
            lines.append("\t".join([str(i), t.form, t.lemma, t.upos, "_", "_", head, deprel, "_", "_"]))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


# ---------------------------------------------------------------------------
# frequency lists


def parse_frequency_list(text, language, source="<string>"):
    entries = {}
    duplicates = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        cols = raw.rstrip("\r\n").split("\t")
        if len(cols) != 2:
            raise CorpusError(f"expected word<TAB>frequency, got {len(cols)} columns",
                              location=f"{source}:{lineno}")
        word, value = cols[0].strip().lower(), cols[1].strip()
        try:
            freq = float(value)
        except ValueError:
            raise CorpusError(f"unparsable frequency {value!r}", location=f"{source}:{lineno}") from None
        if not math.isfinite(freq) or freq < 0:
            raise CorpusError(f"frequency must be finite and >= 0, got {value!r}",
                              location=f"{source}:{lineno}")
        if word in entries:
            duplicates += 1
        entries[word] = freq
    if duplicates:
        log.warning("%s: %d duplicate frequency entries overwritten", source, duplicates)
    return FrequencyList(language=language, entries=entries, duplicates=duplicates)


def load_frequency_list(path, language):
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"frequency list not found: {path}")
    return parse_frequency_list(path.read_text(encoding="utf-8"), language, source=str(path))


# ---------------------------------------------------------------------------
# embeddings


def parse_embeddings(text, sample_id, provenance="", source="<string>"):
    document = None
    utterance_vecs = {}
    dim = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        where = f"{source}:{lineno}"
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"invalid JSON: {exc.msg}", sample_id, where) from None
        vec = np.asarray(rec.get("vector"), dtype=np.float64)
        if vec.ndim != 1 or vec.size == 0:
            raise CorpusError("vector must be a non-empty list of numbers", sample_id, where)
        if not np.all(np.isfinite(vec)):
            raise CorpusError("NaN/Inf in embedding vector", sample_id, where)
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise CorpusError(f"embedding dimension mismatch: {vec.size} != {dim}", sample_id, where)
        kind = rec.get("kind")
        if kind == "document":
            if document is not None:
                raise CorpusError("more than one document vector", sample_id, where)
            document = vec
            provenance = rec.get("provenance", provenance)
        elif kind == "utterance":
            index = rec.get("index")
            if not isinstance(index, int) or index < 0:
                raise CorpusError(f"bad utterance index {index!r}", sample_id, where)
            if index in utterance_vecs:
                raise CorpusError(f"duplicate utterance index {index}", sample_id, where)
            utterance_vecs[index] = vec
        else:
            raise CorpusError(f"unknown record kind {kind!r}", sample_id, where)
    if document is None:
        raise CorpusError("missing document vector", sample_id, source)
    if sorted(utterance_vecs) != list(range(len(utterance_vecs))):
        raise CorpusError("utterance indices are not contiguous from 0", sample_id, source)
    utt = (np.vstack([utterance_vecs[i] for i in range(len(utterance_vecs))])
           if utterance_vecs else np.empty((0, dim)))
    document.setflags(write=False)
    utt.setflags(write=False)
    return EmbeddingSet(sample_id=sample_id, document_vector=document, utterance_vectors=utt,
                        provenance=provenance)


def format_embeddings(emb):
    lines = [json.dumps({"kind": "document", "vector": emb.document_vector.tolist(),
                         "provenance": emb.provenance})]
    for i, vec in enumerate(emb.utterance_vectors):
        lines.append(json.dumps({"kind": "utterance", "index": i, "vector": vec.tolist()}))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# manifest


def _positive_duration(value, sample_id):
    try:
        d = float(value)
    except (TypeError, ValueError):
        raise CorpusError(f"duration_seconds must be a number, got {value!r}", sample_id) from None
    if not math.isfinite(d) or d <= 0:
        raise CorpusError(f"duration_seconds must be > 0, got {value!r}", sample_id)
    return d


def load_corpus(manifest_path):
    """Load one manifest (one language) into a validated :class:`Corpus`."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise CorpusError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"malformed manifest: {exc}", location=str(manifest_path)) from None
    base = manifest_path.parent
    language = manifest.get("language")
    if not isinstance(language, str) or not language.strip():
        raise CorpusError("manifest needs a non-empty 'language'", location=str(manifest_path))
    language = language.strip().lower()
    provenance = manifest.get("embedding_provenance", "")
    freq_rel = manifest.get("frequency_list_path")
    if not freq_rel:
        raise CorpusError(f"no frequency list for language {language!r}", location=str(manifest_path))
    freq = load_frequency_list(base / freq_rel, language)

    entries = manifest.get("samples")
    if not isinstance(entries, list) or not entries:
        raise CorpusError("manifest has no samples", location=str(manifest_path))
    samples, embeddings = [], {}
    for pos, entry in enumerate(entries):
        sid = entry.get("id")
        if not isinstance(sid, str) or not sid:
            raise CorpusError("sample without id", location=f"{manifest_path} samples[{pos}]")
        if sid in embeddings:
            raise CorpusError("duplicate sample id", sid, str(manifest_path))
        label = entry.get("label")
        if label not in LABELS:
            raise CorpusError(f"label must be one of {LABELS}, got {label!r}", sid)
        duration = _positive_duration(entry.get("duration_seconds"), sid)
        tpath = base / entry.get("transcript_path", "")
        epath = base / entry.get("embeddings_path", "")
        if not tpath.is_file():
            raise CorpusError(f"transcript not found: {tpath}", sid)
        if not epath.is_file():
            raise CorpusError(f"embeddings not found: {epath}", sid)
        text = tpath.read_text(encoding="utf-8")
        utts = parse_conllu_sample(text, sample_id=sid)
        if not utts:
            raise CorpusError("transcript has no utterances", sid, str(tpath))
        annotated = {u.has_heads for u in utts}
        if len(annotated) > 1:
            raise CorpusError("some utterances carry dependencies and others do not", sid, str(tpath))
        utts = tuple(Utterance(u.tokens, utterance_embedding_id=i) for i, u in enumerate(utts))
        emb = parse_embeddings(epath.read_text(encoding="utf-8"), sid, provenance, source=str(epath))
        if emb.utterance_vectors.shape[0] != len(utts):
            raise CorpusError(f"utterance-count mismatch: {len(utts)} utterances, "
                              f"{emb.utterance_vectors.shape[0]} utterance vectors", sid, str(epath))
        samples.append(Sample(id=sid, language=language, label=label, utterances=utts,
                              duration_seconds=duration, has_dependencies=annotated.pop()))
        embeddings[sid] = emb
    dims = {e.dim for e in embeddings.values()}
    if len(dims) > 1:
        raise CorpusError(f"embedding dimension mismatch across samples: {sorted(dims)}",
                          location=str(manifest_path))
    samples.sort(key=lambda s: s.id)
    return Corpus(samples=tuple(samples), embeddings=embeddings, frequency_lists={language: freq})


def merge_corpora(corpora):
    samples, embeddings, freqs = [], {}, {}
    for c in corpora:
        for s in c.samples:
            if s.id in embeddings:
                raise CorpusError("duplicate sample id across manifests", s.id)
            samples.append(s)
            embeddings[s.id] = c.embeddings[s.id]
        for lang, fl in c.frequency_lists.items():
            if lang in freqs:
                raise CorpusError(f"language {lang!r} appears in more than one manifest")
            freqs[lang] = fl
    samples.sort(key=lambda s: s.id)
    return Corpus(samples=tuple(samples), embeddings=embeddings, frequency_lists=freqs)


def write_corpus(corpus, out_dir) -> List[Path]:
    """Write ``corpus`` in the interchange layout; returns one manifest per language."""
    out_dir = Path(out_dir)
    (out_dir / "transcripts").mkdir(parents=True, exist_ok=True)
    (out_dir / "embeddings").mkdir(parents=True, exist_ok=True)
    manifests = []
    for lang in corpus.languages:
        freq = corpus.frequency_lists[lang]
        freq_name = f"frequency_{lang}.tsv"
        (out_dir / freq_name).write_text(
            "".join(f"{w}\t{v!r}\n" for w, v in freq.entries.items()), encoding="utf-8")
        entries = []
        provenance = ""
        for s in corpus.by_language(lang):
            emb = corpus.embeddings[s.id]
            provenance = emb.provenance
            (out_dir / "transcripts" / f"{s.id}.conllu").write_text(
                format_conllu(s.utterances), encoding="utf-8")
            (out_dir / "embeddings" / f"{s.id}.jsonl").write_text(format_embeddings(emb), encoding="utf-8")
            entries.append({"id": s.id, "label": s.label, "duration_seconds": s.duration_seconds,
                            "transcript_path": f"transcripts/{s.id}.conllu",
                            "embeddings_path": f"embeddings/{s.id}.jsonl"})
        manifest = {"language": lang, "embedding_provenance": provenance,
                    "frequency_list_path": freq_name, "samples": entries}
        path = out_dir / f"manifest_{lang}.json"
        path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        manifests.append(path)
    return manifests


def corpus_digest(corpus):
    """Content hash of a corpus, independent of file layout."""
    h = hashlib.sha256()
    for s in corpus.samples:
        h.update(json.dumps([s.id, s.language, s.label, repr(s.duration_seconds)]).encode())
        h.update(format_conllu(s.utterances).encode())
        h.update(format_embeddings(corpus.embeddings[s.id]).encode())
    for lang in sorted(corpus.frequency_lists):
        h.update(lang.encode())
        h.update(json.dumps(sorted(corpus.frequency_lists[lang].entries.items())).encode())
    return h.hexdigest()
