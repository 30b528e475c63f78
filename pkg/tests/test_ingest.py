import json
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cidetect.ingest import (CONTROL, PATIENT, CorpusError, corpus_digest, format_conllu, load_corpus,
                             load_frequency_list, merge_corpora, parse_conllu_sample, parse_embeddings,
                             parse_frequency_list, write_corpus)
from cidetect.synth import language_corpus, mini_corpus

BOY_RUNS = (
    "# text = the boy runs\n"
    "1\tthe\tthe\tDET\t_\t_\t2\tdet\t_\t_\n"
    "2\tboy\tboy\tNOUN\t_\t_\t3\tnsubj\t_\t_\n"
    "3\truns\trun\tVERB\t_\t_\t0\troot\t_\t_\n"
)


def _line(i, form, upos, head="_", deprel="_", lemma=None):
    return "\t".join([str(i), form, lemma or form, upos, "_", "_", str(head), deprel, "_", "_"])


def test_the_boy_runs_tree():
    (utt,) = parse_conllu_sample(BOY_RUNS)
    assert [t.form for t in utt.tokens] == ["the", "boy", "runs"]
    assert [t.head for t in utt.tokens] == [2, 3, 0]
    assert utt.tokens[2].deprel == "root" and utt.tokens[2].lemma == "run"


def test_two_sentence_block():
    text = BOY_RUNS + "\n" + _line(1, "yes", "INTJ", 0, "root") + "\n"
    assert len(parse_conllu_sample(text)) == 2


def test_punct_dropped_and_heads_remapped():
    text = "\n".join([_line(1, "I", "PRON", 2, "nsubj"), _line(2, ",", "PUNCT", 3, "punct"),
                      _line(3, "see", "VERB", 0, "root"), _line(4, ".", "PUNCT", 3, "punct")]) + "\n"
    (utt,) = parse_conllu_sample(text)
    assert [t.form for t in utt.tokens] == ["I", "see"]
    assert [t.head for t in utt.tokens] == [2, 0]


def test_multiword_range_and_underscore_heads():
    text = "\n".join(["1-2\tdel\t_\t_\t_\t_\t_\t_\t_\t_", _line(1, "de", "ADP"), _line(2, "el", "DET")]) + "\n"
    (utt,) = parse_conllu_sample(text)
    assert len(utt) == 2 and not utt.has_heads
    assert all(t.head is None and t.deprel is None for t in utt.tokens)


@pytest.mark.parametrize("text, fragment", [
    ("x\tthe\tthe\tDET\t_\t_\t0\troot\t_\t_\n", "non-integer token id"),
    ("1\tthe\tthe\tDET\t_\t_\t0\troot\t_\n", "10 columns"),
    ("1\tthe\tthe\tDET\t_\t_\t5\troot\t_\t_\n", "head"),
    ("1\ta\ta\tDET\t_\t_\t0\troot\t_\t_\n2\tb\tb\tNOUN\t_\t_\t0\troot\t_\t_\n", "one root"),
    ("1\ta\ta\tDET\t_\t_\t2\tdet\t_\t_\n2\tb\tb\tNOUN\t_\t_\t1\tdep\t_\t_\n", "root"),
])
def test_malformed_conllu(text, fragment):
    with pytest.raises(CorpusError, match=fragment):
        parse_conllu_sample(text, sample_id="bad-1")


def test_error_names_sample_and_line():
    with pytest.raises(CorpusError) as exc:
        parse_conllu_sample(BOY_RUNS + "\nbroken line\n", sample_id="s-9")
    assert exc.value.sample_id == "s-9" and "line 6" in str(exc.value)


@given(st.text(alphabet="0123456789\t_-.abNOUNVERBroot\n #", max_size=200))
def test_fuzzed_conllu_yields_utterances_or_typed_error(text):
    try:
        utts = parse_conllu_sample(text)
    except CorpusError:
        return
    for u in utts:
        assert len(u) >= 1
        if u.has_heads:
            assert sum(t.head == 0 for t in u.tokens) == 1


def test_mutated_valid_conllu_never_crashes():
    rnd = random.Random(0)
    base = BOY_RUNS + "\n" + BOY_RUNS
    for _ in range(500):
        chars = list(base)
        for _ in range(rnd.randint(1, 4)):
            chars[rnd.randrange(len(chars))] = rnd.choice("0123\t_x\n-")
        try:
            parse_conllu_sample("".join(chars))
        except CorpusError:
            pass


def test_format_parse_round_trip():
    utts = parse_conllu_sample(BOY_RUNS + "\n" + BOY_RUNS)
    assert parse_conllu_sample(format_conllu(utts)) == utts


def test_frequency_list_examples(tmp_path):
    fl = parse_frequency_list("dog\t49.2\ncat\t30.0", "english")
    assert fl.entries == {"dog": 49.2, "cat": 30.0}
    dup = parse_frequency_list("Dog\t5\ndog\t7", "english")
    assert dup.entries == {"dog": 7.0} and dup.duplicates == 1
    path = tmp_path / "empty.tsv"
    path.write_text("")
    assert len(load_frequency_list(path, "english")) == 0
    with pytest.raises(CorpusError, match="unparsable"):
        parse_frequency_list("dog\tmany", "english")
    with pytest.raises(CorpusError):
        parse_frequency_list("dog\t-1", "english")


def test_embeddings_parse_and_validate():
    text = "\n".join([json.dumps({"kind": "document", "vector": [1, 2]}),
                      json.dumps({"kind": "utterance", "index": 0, "vector": [0, 1]})])
    emb = parse_embeddings(text, "s1")
    assert emb.dim == 2 and emb.utterance_vectors.shape == (1, 2)
    bad_dim = text + "\n" + json.dumps({"kind": "utterance", "index": 1, "vector": [1, 2, 3]})
    with pytest.raises(CorpusError, match="dimension"):
        parse_embeddings(bad_dim, "s1")
    with pytest.raises(CorpusError, match="NaN"):
        parse_embeddings('{"kind": "document", "vector": [NaN, 1]}', "s1")
    with pytest.raises(CorpusError, match="contiguous"):
        parse_embeddings(text.replace('"index": 0', '"index": 2'), "s1")


def _manifest(tmp_path, entries, freq="dog\t1.0\n"):
    (tmp_path / "freq.tsv").write_text(freq)
    m = {"language": "english", "frequency_list_path": "freq.tsv", "samples": entries}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(m))
    return path


def _write_sample(tmp_path, sid, n_utts=1, n_vecs=None, dim=3):
    (tmp_path / f"{sid}.conllu").write_text(
        "\n\n".join(_line(1, "dog", "NOUN", 0, "root") for _ in range(n_utts)) + "\n")
    lines = [json.dumps({"kind": "document", "vector": [1.0] * dim})]
    lines += [json.dumps({"kind": "utterance", "index": i, "vector": [1.0] * dim})
              for i in range(n_utts if n_vecs is None else n_vecs)]
    (tmp_path / f"{sid}.jsonl").write_text("\n".join(lines) + "\n")
    return {"id": sid, "label": PATIENT, "duration_seconds": 3.0,
            "transcript_path": f"{sid}.conllu", "embeddings_path": f"{sid}.jsonl"}


def test_minimal_manifest(tmp_path):
    path = _manifest(tmp_path, [_write_sample(tmp_path, "b"), _write_sample(tmp_path, "a")])
    corpus = load_corpus(path)
    assert [s.id for s in corpus.samples] == ["a", "b"]
    assert corpus.samples[0].has_dependencies


def test_utterance_count_mismatch(tmp_path):
    path = _manifest(tmp_path, [_write_sample(tmp_path, "a", n_utts=3, n_vecs=2)])
    with pytest.raises(CorpusError, match="utterance-count mismatch") as exc:
        load_corpus(path)
    assert exc.value.sample_id == "a"


@pytest.mark.parametrize("mutate, fragment", [
    (lambda e: e.append(dict(e[0])), "duplicate"),
    (lambda e: e[0].update(label="Healthy"), "label"),
    (lambda e: e[0].update(duration_seconds=0), "duration"),
    (lambda e: e[0].update(transcript_path="nope.conllu"), "not found"),
])
def test_manifest_errors(tmp_path, mutate, fragment):
    entries = [_write_sample(tmp_path, "a")]
    mutate(entries)
    with pytest.raises(CorpusError, match=fragment):
        load_corpus(_manifest(tmp_path, entries))


def test_dimension_mismatch_across_samples(tmp_path):
    entries = [_write_sample(tmp_path, "a", dim=3), _write_sample(tmp_path, "b", dim=4)]
    with pytest.raises(CorpusError, match="dimension"):
        load_corpus(_manifest(tmp_path, entries))


def test_missing_manifest(tmp_path):
    with pytest.raises(CorpusError, match="not found"):
        load_corpus(tmp_path / "absent.json")


def test_round_trip_and_order_independence(tmp_path):
    corpus = mini_corpus(seed=3)
    paths = write_corpus(corpus, tmp_path / "c")
    reloaded = merge_corpora([load_corpus(p) for p in paths])
    assert reloaded == corpus
    assert corpus_digest(reloaded) == corpus_digest(corpus)
    # shuffle one manifest's entries
    m = json.loads(paths[0].read_text())
    m["samples"].reverse()
    paths[0].write_text(json.dumps(m))
    assert list(load_corpus(paths[0]).samples) == reloaded.by_language(m["language"])


def test_table1_english_counts(tmp_path):
    corpus = language_corpus("english", 78, 78, dim=4)
    (path,) = write_corpus(corpus, tmp_path)
    assert load_corpus(path).class_counts("english") == {PATIENT: 78, CONTROL: 78}


def test_korean_without_dependencies():
    corpus = mini_corpus()
    ko = corpus.by_language("korean")
    assert ko and not any(s.has_dependencies for s in ko)
    assert all(s.has_dependencies for s in corpus.by_language("english"))
