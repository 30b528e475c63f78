"""Deterministic result tables and run-directory output.

A *record* is one flat dict per (language, model, input, mode, k, seed)
cell, see :data:`RESULT_COLUMNS`. Records round-trip through CSV, and the
text tables are always rebuilt from those CSVs, so a run directory can be
re-rendered after the fact.
"""

import csv
import io
import json
import math
import time
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from . import __version__
from .evaluation import FEWSHOT, LOO, ZEROSHOT, seed_report
from .llmclient import FULL_DATA, LINGUISTIC_ONLY, TRANSCRIPT_ONLY
from .pipeline import EARLY_FUSION, EMBEDDINGS_ONLY, FEATURES_ONLY, LATE_FUSION

MISSING = "—"
BEST_MARK = "*"

RESULT_COLUMNS = ("language", "model", "representation", "mode", "k", "seed",
                  "macro_f1", "n_results", "n_failed", "n_abstained")
FAILURE_COLUMNS = ("language", "model", "representation", "mode", "k", "seed", "sample_id", "reason")
ALIGNMENT_COLUMNS = ("language", "cka", "spearman_rho", "procrustes_disparity", "overlap_at_k",
                     "purity_feat_at_k", "purity_emb_at_k", "k")
_METRIC_COLUMNS = ALIGNMENT_COLUMNS[1:7]

FAMILY_NAMES = {
    "majority": "Majority",
    "logreg": "LogReg",
    "svm_linear": "SVM",
    "knn3": "kNN-3",
    "knn5": "kNN-5",
    "knn7": "kNN-7",
    "random_forest": "RF",
}
INPUT_NAMES = {
    EMBEDDINGS_ONLY: "Emb",
    FEATURES_ONLY: "Feat",
    EARLY_FUSION: "Early",
    LATE_FUSION: "Late",
    FULL_DATA: "Full",
    LINGUISTIC_ONLY: "Ling.",
    TRANSCRIPT_ONLY: "Trans.",
}
_INPUT_ORDER = {name: i for i, name in enumerate(INPUT_NAMES)}
_FAMILY_ORDER = {name: i for i, name in enumerate(FAMILY_NAMES)}

BEST_LLM_ROW = "Best LLM†"
MAJORITY_NOTE = "Majority: constant class of the whole language (ties to Patient), not refitted per fold"


def fmt3(value):
    """Three decimals, rounding half up; missing or NaN becomes a dash."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return MISSING
    return str(Decimal(repr(float(value))).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


# -- records ---------------------------------------------------------------

def records_from_results(language, model, representation, mode, k, results):
    """One record per seed present in ``results``."""
    by_seed = {}
    for r in results:
        by_seed.setdefault(r.seed, []).append(r)
    records = []
    for seed in sorted(by_seed):
        rep = seed_report(language, model, representation, mode, k, seed, by_seed[seed])
        records.append({
            "language": language, "model": model, "representation": representation, "mode": mode,
            "k": k, "seed": seed, "macro_f1": rep.macro_f1, "n_results": rep.n_results,
            "n_failed": rep.n_failed, "n_abstained": rep.n_abstained})
    return records


def failures_from_results(language, model, representation, mode, k, results):
    return [{"language": language, "model": model, "representation": representation, "mode": mode,
             "k": k, "seed": r.seed, "sample_id": r.sample_id, "reason": r.failure}
            for r in results if r.failed]


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def to_csv(rows, columns):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


_INT_FIELDS = ("k", "seed", "n_results", "n_failed", "n_abstained")
_FLOAT_FIELDS = ("macro_f1",) + _METRIC_COLUMNS


def parse_csv(text):
    """Inverse of :func:`to_csv` for result, failure and alignment files."""
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        row = {}
        for key, value in raw.items():
            if value == "":
                row[key] = None
            elif key in _INT_FIELDS:
                row[key] = int(value)
            elif key in _FLOAT_FIELDS:
                row[key] = float(value)
            else:
                row[key] = value
        rows.append(row)
    return rows


def _sort_key(row):
    return tuple("" if row.get(c) is None else f"{row[c]:>12}" if isinstance(row.get(c), int) else str(row[c])
                 for c in ("language", "mode", "model", "representation", "k", "seed"))


def sorted_records(records):
    return sorted(records, key=_sort_key)


# -- tables ----------------------------------------------------------------

def _mean(values):
    finite = [v for v in values if v is not None and not math.isnan(v)]
    return sum(finite) / len(finite) if finite else float("nan")


def _cells(records, key):
    """``{row_key: {language: seed-mean macro-F1}}``."""
    grouped = {}
    for r in records:
        grouped.setdefault(key(r), {}).setdefault(r["language"], []).append(r["macro_f1"])
    return {rk: {lang: _mean(v) for lang, v in langs.items()} for rk, langs in grouped.items()}


def _row_order(model, representation):
    return (_FAMILY_ORDER.get(model, len(_FAMILY_ORDER)), model,
            _INPUT_ORDER.get(representation, len(_INPUT_ORDER)), representation or "")


def _best(cells, languages):
    best = {}
    for lang in languages:
        vals = [langs[lang] for langs in cells.values()
                if lang in langs and not math.isnan(langs[lang])]
        if vals:
            best[lang] = fmt3(max(vals))
    return best


def _grid(header, rows, cells, languages):
    """Formatted string grid: ``rows`` are ``(label_cells, row_key)`` pairs."""
    best = _best({rk: cells.get(rk, {}) for _, rk in rows}, languages)
    out = [list(header)]
    for labels, rk in rows:
        line = list(labels)
        for lang in languages:
            value = cells.get(rk, {}).get(lang)
            text = fmt3(value)
            if text != MISSING and best.get(lang) == text:
                text += BEST_MARK
            line.append(text)
        out.append(line)
    return out


def _render(title, grid, note=None):
    widths = [max(len(r[i]) for r in grid) for i in range(len(grid[0]))]

    def line(cells):
        first = [cells[0].ljust(widths[0])]
        return "  ".join(first + [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]).rstrip()

    rule = "-" * len(line(grid[0]))
    body = [title, rule, line(grid[0]), rule] + [line(r) for r in grid[1:]] + [rule]
    if note:
        body.append(note)
    return "\n".join(body) + "\n"


def _grid_csv(grid):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(grid)
    return buf.getvalue()


def _languages(records):
    return sorted({r["language"] for r in records})


def _model_name(model):
    return FAMILY_NAMES.get(model, model)


def _input_name(representation):
    return INPUT_NAMES.get(representation, representation or "")


def _note(row_keys):
    note = f"{BEST_MARK} best per language"
    if any(rk[0] == "majority" for rk in row_keys):
        note += f"; {MAJORITY_NOTE}"
    return note


def emit_loo_table(records):
    """LOO Macro-F1 per (model, input) and language, with zero-shot LLM rows.

    Returns ``(text, csv_text)``; best value per language carries ``*``.
    """
    records = [r for r in records if r["mode"] in (LOO, ZEROSHOT)]
    languages = _languages(records)
    cells = _cells(records, lambda r: (r["model"], r["representation"]))
    keys = sorted(cells, key=lambda rk: _row_order(*rk))
    rows = [((_model_name(m), _input_name(rep)), (m, rep)) for m, rep in keys]
    grid = _grid(("Model", "Input", *languages), rows, cells, languages)
    return _render("LOO Macro-F1", grid, _note(keys)), _grid_csv(grid)


def emit_fewshot_table(records):
    """Seed-mean few-shot Macro-F1 per (model, input, k), plus the best zero-shot LLM."""
    shots = [r for r in records if r["mode"] == FEWSHOT]
    llm_zero = [r for r in records if r["mode"] == ZEROSHOT]
    languages = _languages(shots + llm_zero)
    cells = _cells(shots, lambda r: (r["model"], r["representation"], r["k"]))
    keys = sorted(cells, key=lambda rk: (_row_order(rk[0], rk[1]), rk[2]))
    rows = [((_model_name(m), _input_name(rep), str(k)), (m, rep, k)) for m, rep, k in keys]
    if llm_zero:
        zero = _cells(llm_zero, lambda r: (r["model"], r["representation"]))
        best = {}
        for lang in languages:
            vals = [c[lang] for c in zero.values() if lang in c and not math.isnan(c[lang])]
            if vals:
                best[lang] = max(vals)
        cells[("llm", None, 0)] = best
        rows.append(((BEST_LLM_ROW, "", "0"), ("llm", None, 0)))
    grid = _grid(("Model", "Input", "k", *languages), rows, cells, languages)
    note = _note(keys)
    if llm_zero:
        note += f"; {BEST_LLM_ROW}: best zero-shot LLM configuration"
    return _render("Few-shot Macro-F1 (k shots per class, seed mean)", grid, note), _grid_csv(grid)


def _alignment_row(rep):
    if isinstance(rep, dict):
        return rep
    return {c: getattr(rep, c) for c in ALIGNMENT_COLUMNS}


def emit_alignment_table(reports):
    """One row per language with the six alignment metrics."""
    rows = sorted((_alignment_row(r) for r in reports), key=lambda r: r["language"])
    ks = {r.get("k") for r in rows}
    k = ks.pop() if len(ks) == 1 else None
    k = "k" if k is None else str(k)
    grid = [["Language", "CKA", "Spearman rho", "Procrustes", f"Overlap@{k}",
             f"Purity_feat@{k}", f"Purity_emb@{k}"]]
    grid += [[r["language"], *(fmt3(r[c]) for c in _METRIC_COLUMNS)] for r in rows]
    text = _render("Feature-embedding alignment", grid)
    return text, _grid_csv(grid)


# -- run directory ---------------------------------------------------------

RESULT_FILES = {"loo": "loo.csv", "fewshot": "fewshot.csv", "llm": "llm.csv"}


class RunDirectory:
    """``<out>/<run-id>/`` holding config.json, per-kind CSVs and tables.txt."""

    def __init__(self, out, run_id=None):
        if run_id is None:
            run_id = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
            base, n = run_id, 1
            while (Path(out) / run_id).exists():
                n += 1
                run_id = f"{base}-{n}"
        self.run_id = run_id
        self.path = Path(out) / run_id
        self.path.mkdir(parents=True, exist_ok=True)

    def _write(self, name, text):
        tmp = self.path / (name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(self.path / name)

    def write_config(self, command, config, corpus_digest=None):
        """Record one command's configuration; several commands may share a run."""
        path = self.path / "config.json"
        payload = json.loads(path.read_text(encoding="utf-8")) if path.is_file() else {
            "run_id": self.run_id, "version": __version__, "commands": {}}
        payload["commands"][command] = {
            "config": config, "corpus_digest": corpus_digest,
            "started": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
        self._write("config.json", json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")

    def write_records(self, kind, records):
        self._write(RESULT_FILES[kind], to_csv(sorted_records(records), RESULT_COLUMNS))

    def write_failures(self, failures):
        """Merge ``failures`` into failures.csv (several commands may contribute)."""
        rows = {tuple(_cell(r.get(c)) for c in FAILURE_COLUMNS): r
                for r in (self.read("failures.csv") or []) + list(failures)}
        self._write("failures.csv", to_csv(sorted_records(rows.values()), FAILURE_COLUMNS))

    def write_alignment(self, reports):
        rows = sorted((_alignment_row(r) for r in reports), key=lambda r: r["language"])
        self._write("alignment.csv", to_csv(rows, ALIGNMENT_COLUMNS))

    def read(self, name):
        path = self.path / name
        return parse_csv(path.read_text(encoding="utf-8")) if path.is_file() else None

    def render_tables(self):
        """Rebuild tables.txt (and the table CSVs) from whatever result files exist."""
        return render_run(self.path)


def render_run(path):
    path = Path(path)

    def load(name):
        f = path / name
        return parse_csv(f.read_text(encoding="utf-8")) if f.is_file() else []

    results = load("loo.csv") + load("fewshot.csv") + load("llm.csv")
    alignment = load("alignment.csv")
    sections = []
    if any(r["mode"] in (LOO, ZEROSHOT) for r in results):
        text, table = emit_loo_table(results)
        (path / "loo_table.csv").write_text(table, encoding="utf-8")
        sections.append(text)
    if any(r["mode"] == FEWSHOT for r in results):
        text, table = emit_fewshot_table(results)
        (path / "fewshot_table.csv").write_text(table, encoding="utf-8")
        sections.append(text)
    if alignment:
        text, table = emit_alignment_table(alignment)
        (path / "alignment_table.csv").write_text(table, encoding="utf-8")
        sections.append(text)
    tables = "\n".join(sections)
    (path / "tables.txt").write_text(tables, encoding="utf-8")
    return tables
