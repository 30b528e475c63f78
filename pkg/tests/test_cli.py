import csv
import json

import pytest

from cidetect import cli
from cidetect.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from cidetect.evaluation import FoldResult
from mockllm import MockLLM, user_text

LANGS = ("english", "korean", "slovene")


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--out", str(out), "--per-language", "10", "--dim", "6"]) == EXIT_OK
    return out


def manifests(corpus_dir, langs=LANGS):
    args = []
    for lang in langs:
        args += ["--manifest", str(corpus_dir / f"manifest_{lang}.json")]
    return args


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_features_writes_csv_per_language(corpus_dir, tmp_path, capsys):
    assert main(["features", *manifests(corpus_dir), "--out", str(tmp_path)]) == EXIT_OK
    for lang in LANGS:
        rows = read_csv(tmp_path / f"features_{lang}.csv")
        assert len(rows) == 10
    korean = read_csv(tmp_path / "features_korean.csv")
    assert all(r["idea_density"] == "" and r["syntactic_complexity"] == "" for r in korean)
    assert all(r["idea_density"] != "" for r in read_csv(tmp_path / "features_english.csv"))


def test_missing_manifest_is_a_usage_error(tmp_path, capsys):
    code = main(["features", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
    assert code == EXIT_USAGE
    assert "manifest not found" in capsys.readouterr().err


def test_broken_manifest_is_a_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["features", "--manifest", str(bad), "--out", str(tmp_path)]) == EXIT_FAILURE


@pytest.mark.parametrize("extra", [
    ["--families", ""], ["--families", "logreg,bogus"], ["--representations", "both"],
    ["--mode", "fewshot", "--k", "0"], ["--seeds", "a,b"], ["--mode", "sideways"],
])
def test_eval_usage_errors(corpus_dir, tmp_path, extra, capsys):
    code = main(["eval", *manifests(corpus_dir, ["english"]), "--out", str(tmp_path), *extra])
    assert code == EXIT_USAGE
    assert not any(tmp_path.iterdir())  # validated before any work starts


def test_unknown_flag_rejected(corpus_dir, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["eval", *manifests(corpus_dir), "--out", str(tmp_path), "--frobnicate"])
    assert exc.value.code == EXIT_USAGE


def test_eval_majority_row(corpus_dir, tmp_path, capsys):
    code = main(["eval", *manifests(corpus_dir), "--out", str(tmp_path), "--run-id", "r",
                 "--families", "majority", "--representations", "features_only", "--seeds", "0"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    run = tmp_path / "r"
    table = list(csv.reader(open(run / "loo_table.csv")))
    assert table[0] == ["Model", "Input", *LANGS]
    assert table[1][:2] == ["Majority", ""] and len(table) == 2
    assert "LOO Macro-F1" in out
    config = json.loads((run / "config.json").read_text())
    assert config["commands"]["eval"]["config"]["families"] == ["majority"]
    assert len(read_csv(run / "loo.csv")) == 3


def test_eval_fewshot_table_shape(corpus_dir, tmp_path, capsys):
    code = main(["eval", *manifests(corpus_dir, ["english"]), "--out", str(tmp_path), "--run-id", "r",
                 "--mode", "fewshot", "--k", "1,2,3", "--families", "logreg,knn3",
                 "--representations", "embeddings_only", "--seeds", "0,1", "--episodes", "2"])
    assert code == EXIT_OK
    table = list(csv.reader(open(tmp_path / "r" / "fewshot_table.csv")))
    assert [row[:3] for row in table[1:]] == [["LogReg", "Emb", k] for k in "123"] + \
        [["kNN-3", "Emb", k] for k in "123"]
    assert len(read_csv(tmp_path / "r" / "fewshot.csv")) == 2 * 3 * 2


def test_eval_exits_1_when_every_cell_fails(corpus_dir, tmp_path, monkeypatch, capsys):
    real = cli.run_plan

    def broken(plan, data, workers=1):
        results, report = real(plan, data, workers=workers)
        failed = [FoldResult(r.sample_id, r.seed, r.true_label, None, failure="boom") for r in results]
        return failed, type(report)(**{**report.__dict__, "n_failed": len(failed)})

    monkeypatch.setattr(cli, "run_plan", broken)
    code = main(["eval", *manifests(corpus_dir, ["english"]), "--out", str(tmp_path), "--run-id", "r",
                 "--families", "majority", "--representations", "features_only", "--seeds", "0"])
    assert code == EXIT_FAILURE
    assert len(read_csv(tmp_path / "r" / "failures.csv")) == 10


def test_align_three_rows_and_self_check(corpus_dir, tmp_path, capsys):
    assert main(["align", *manifests(corpus_dir), "--out", str(tmp_path), "--run-id", "a"]) == EXIT_OK
    rows = read_csv(tmp_path / "a" / "alignment.csv")
    assert [r["language"] for r in rows] == list(LANGS)
    assert main(["align", *manifests(corpus_dir), "--out", str(tmp_path), "--run-id", "s",
                 "--self-check"]) == EXIT_OK
    for row in list(csv.reader(open(tmp_path / "s" / "alignment_table.csv")))[1:]:
        assert row[1:5] == ["1.000", "1.000", "0.000", "1.000"]


def test_align_requires_more_samples_than_k(corpus_dir, tmp_path, caplog):
    code = main(["align", *manifests(corpus_dir, ["slovene"]), "--out", str(tmp_path), "--k", "10"])
    assert code == EXIT_FAILURE
    assert "not more than k" in caplog.text


def test_llm_run_with_cache(corpus_dir, tmp_path, capsys):
    cache = tmp_path / "cache"
    args = ["llm", *manifests(corpus_dir), "--out", str(tmp_path), "--llm-model", "mock",
            "--cache", str(cache), "--max-inflight", "4"]
    with MockLLM(lambda body: "Patient") as mock:
        assert main([*args, "--llm-endpoint", mock.url, "--run-id", "cold"]) == EXIT_OK
        n_cold = len(mock.requests)
        assert n_cold == 3 * 30
        assert len(list(cache.glob("*.json"))) == 3 * 30
        korean = [user_text(b) for b in mock.requests
                  if "Language: Korean" in user_text(b) and "[TRANSCRIPT]" not in user_text(b)]
        assert len(korean) == 10 and all("- Idea Density: N/A" in t for t in korean)
        assert main([*args, "--llm-endpoint", mock.url, "--run-id", "warm"]) == EXIT_OK
        assert len(mock.requests) == n_cold
    cold = (tmp_path / "cold" / "llm.csv").read_text()
    assert cold == (tmp_path / "warm" / "llm.csv").read_text()
    table = list(csv.reader(open(tmp_path / "cold" / "loo_table.csv")))
    assert sorted(row[1] for row in table[1:]) == ["Full", "Ling.", "Trans."]


def test_llm_all_failures_exit_1(corpus_dir, tmp_path, capsys):
    with MockLLM(lambda body: (500, {})) as mock:
        code = main(["llm", *manifests(corpus_dir, ["slovene"]), "--out", str(tmp_path), "--run-id", "r",
                     "--llm-endpoint", mock.url, "--llm-model", "mock", "--variant", "transcript_only",
                     "--max-retries", "0"])
    assert code == EXIT_FAILURE
    assert len(read_csv(tmp_path / "r" / "failures.csv")) == 10


def test_synth_rejects_tiny_corpus(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--per-language", "1"]) == EXIT_USAGE
