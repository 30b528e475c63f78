"""Command-line entry point: ``cidetect {features,eval,llm,align,synth}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import DegenerateInputError, align
from .classifiers import FAMILIES
from .evaluation import (DEFAULT_KS, DEFAULT_SEEDS, FEWSHOT, LOO, ZEROSHOT, LanguageData, expand_grid,
                         run_plan)
from .features import FEATURE_NAMES, FeatureError, extract_features, write_feature_csv
from .ingest import CorpusError, corpus_digest, load_corpus, merge_corpora, write_corpus
from .llmclient import VARIANTS, LlmClient, run_llm_eval
from .pipeline import REPRESENTATIONS
from .report import RunDirectory, failures_from_results, records_from_results

log = logging.getLogger("cidetect")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

_MODE_NAMES = {"loo": LOO, "fewshot": FEWSHOT, "zeroshot": ZEROSHOT}


class UsageError(Exception):
    pass


def _csv_list(text, allowed=None, what="value"):
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError(f"empty {what} list")
    if allowed is not None:
        unknown = [t for t in items if t not in allowed]
        if unknown:
            raise UsageError(f"unknown {what} {', '.join(unknown)}; choose from {', '.join(sorted(allowed))}")
    return list(dict.fromkeys(items))


def _int_list(text, what):
    try:
        values = [int(t) for t in _csv_list(text, what=what)]
    except ValueError:
        raise UsageError(f"{what} must be a comma-separated list of integers, got {text!r}") from None
    return values


def _positive(values, what):
    if any(v < 1 for v in values):
        raise UsageError(f"{what} must be positive")
    return values


def _load(args):
    missing = [m for m in args.manifest if not Path(m).is_file()]
    if missing:
        raise UsageError(f"manifest not found: {', '.join(missing)}")
    return merge_corpora([load_corpus(m) for m in args.manifest])


def _common(p, manifest=True):
    if manifest:
        p.add_argument("--manifest", action="append", required=True,
                       help="language manifest (repeat for several languages)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--run-id", help="run directory name under --out (default: UTC timestamp)")
    p.add_argument("--workers", type=int, default=1, help="worker threads")


def build_parser():
    parser = argparse.ArgumentParser(prog="cidetect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="compute the 11 linguistic features")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--out", required=True, help="directory for features_<language>.csv")

    p = sub.add_parser("eval", help="LOO and few-shot evaluation of the classifier grid")
    _common(p)
    p.add_argument("--mode", default="loo", help="loo, fewshot or both (comma-separated)")
    p.add_argument("--k", default=",".join(map(str, DEFAULT_KS)), help="shots per class")
    p.add_argument("--episodes", type=int, default=3)
    p.add_argument("--seeds", default=",".join(map(str, DEFAULT_SEEDS)))
    p.add_argument("--families", default=",".join(FAMILIES))
    p.add_argument("--representations", default=",".join(REPRESENTATIONS))

    p = sub.add_parser("llm", help="prompted LLM classification")
    _common(p)
    p.add_argument("--llm-endpoint", required=True)
    p.add_argument("--llm-model", required=True)
    p.add_argument("--variant", default=",".join(VARIANTS))
    p.add_argument("--mode", default="zeroshot", choices=("zeroshot", "fewshot"),
                   help="zeroshot (default) or fewshot with labelled demonstrations (experimental)")
    p.add_argument("--k", default="1", help="shots per class in few-shot mode")
    p.add_argument("--episodes", type=int, default=3)
    p.add_argument("--seeds", default="0")
    p.add_argument("--max-inflight", type=int, default=4)
    p.add_argument("--cache", help="response cache directory")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--max-retries", type=int, default=3)

    p = sub.add_parser("align", help="feature/embedding space alignment per language")
    _common(p)
    p.add_argument("--k", type=int, default=5, help="neighbourhood size")
    p.add_argument("--self-check", action="store_true",
                   help="align the feature space with itself (identity smoke test)")

    p = sub.add_parser("synth", help="write the bundled synthetic mini-corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-language", type=int, default=20)
    p.add_argument("--dim", type=int, default=16)
    return parser


# -- commands --------------------------------------------------------------

def cmd_features(args):
    corpus = _load(args)
    features = extract_features(corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for lang in corpus.languages:
        path = out / f"features_{lang}.csv"
        write_feature_csv(path, corpus.by_language(lang), features)
        print(path)
    return EXIT_OK


def _eval_config(args):
    modes = [_MODE_NAMES[m] for m in _csv_list(args.mode, {"loo", "fewshot"}, "mode")]
    ks = _positive(_int_list(args.k, "--k"), "--k") if FEWSHOT in modes else []
    seeds = _int_list(args.seeds, "--seeds")
    families = _csv_list(args.families, set(FAMILIES), "family")
    reps = _csv_list(args.representations, set(REPRESENTATIONS), "representation")
    if args.episodes < 1 or args.workers < 1:
        raise UsageError("--episodes and --workers must be positive")
    return {"command": "eval", "manifests": args.manifest, "modes": modes, "k": ks,
            "episodes": args.episodes, "seeds": seeds, "families": families,
            "representations": reps, "workers": args.workers}


def cmd_eval(args):
    config = _eval_config(args)
    corpus = _load(args)
    run = RunDirectory(args.out, args.run_id)
    run.write_config("eval", config, corpus_digest(corpus))
    features = extract_features(corpus)
    plans = expand_grid(corpus.languages, config["families"], config["representations"],
                        config["modes"], ks=config["k"], episodes=config["episodes"],
                        seeds=config["seeds"])
    data = {lang: LanguageData.from_corpus(corpus, features, lang) for lang in corpus.languages}
    for lang, d in data.items():
        empty = [FEATURE_NAMES[j] for j in np.flatnonzero(np.isnan(d.features).all(axis=0))]
        if empty:
            log.warning("%s: features %s are missing for every sample and impute to 0",
                        lang, ", ".join(empty))
    records = {LOO: [], FEWSHOT: []}
    failures = []
    cells_ok = 0
    for plan in plans:
        log.info("%s %s %s %s k=%s", plan.language, plan.mode, plan.family, plan.representation, plan.k)
        results, report = run_plan(plan, data[plan.language], workers=args.workers)
        records[plan.mode].extend(records_from_results(plan.language, plan.family, plan.representation,
                                                       plan.mode, plan.k, results))
        failures += failures_from_results(plan.language, plan.family, plan.representation,
                                          plan.mode, plan.k, results)
        cells_ok += report.n_failed < report.n_results
    if LOO in config["modes"]:
        run.write_records("loo", records[LOO])
    if FEWSHOT in config["modes"]:
        run.write_records("fewshot", records[FEWSHOT])
    run.write_failures(failures)
    print(run.render_tables(), end="")
    print(f"run directory: {run.path}")
    if plans and not cells_ok:
        log.error("every evaluation cell failed")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_llm(args):
    variants = _csv_list(args.variant, set(VARIANTS), "variant")
    seeds = _int_list(args.seeds, "--seeds")
    ks = _positive(_int_list(args.k, "--k"), "--k") if args.mode == "fewshot" else [None]
    if args.max_inflight < 1:
        raise UsageError("--max-inflight must be positive")
    config = {"command": "llm", "manifests": args.manifest, "endpoint": args.llm_endpoint,
              "model": args.llm_model, "variants": variants, "mode": args.mode, "k": ks,
              "episodes": args.episodes, "seeds": seeds, "max_inflight": args.max_inflight,
              "cache": args.cache}
    corpus = _load(args)
    run = RunDirectory(args.out, args.run_id)
    run.write_config("llm", config, corpus_digest(corpus))
    features = extract_features(corpus)
    mode = _MODE_NAMES[args.mode]
    records, failures = [], []
    with LlmClient(args.llm_endpoint, args.llm_model, cache_dir=args.cache, timeout=args.timeout,
                   max_retries=args.max_retries) as client:
        for lang in corpus.languages:
            samples = corpus.by_language(lang)
            for variant in sorted(variants):
                for k in ks:
                    for seed in seeds:
                        results = run_llm_eval(client, samples, features, variant, mode=mode, k=k,
                                               episodes=args.episodes, seed=seed,
                                               max_inflight=args.max_inflight)
                        records += records_from_results(lang, args.llm_model, variant, mode, k, results)
                        failures += failures_from_results(lang, args.llm_model, variant, mode, k, results)
        log.info("network calls: %d", client.network_calls)
    run.write_records("llm", records)
    run.write_failures(failures)
    print(run.render_tables(), end="")
    print(f"run directory: {run.path}")
    if records and all(r["n_failed"] == r["n_results"] for r in records):
        log.error("every LLM request failed")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_align(args):
    if args.k < 1:
        raise UsageError("--k must be positive")
    corpus = _load(args)
    run = RunDirectory(args.out, args.run_id)
    run.write_config("align", {"command": "align", "manifests": args.manifest, "k": args.k,
                               "self_check": args.self_check}, corpus_digest(corpus))
    features = extract_features(corpus)
    reports = []
    for lang in corpus.languages:
        data = LanguageData.from_corpus(corpus, features, lang)
        if data.n <= args.k:
            log.error("%s: %d samples is not more than k=%d", lang, data.n, args.k)
            return EXIT_FAILURE
        other = data.features if args.self_check else data.embeddings
        try:
            reports.append(align(lang, data.features, other, data.y, k=args.k))
        except DegenerateInputError as exc:
            log.error("%s: %s", lang, exc)
            return EXIT_FAILURE
    run.write_alignment(reports)
    print(run.render_tables(), end="")
    print(f"run directory: {run.path}")
    return EXIT_OK


def cmd_synth(args):
    from .synth import mini_corpus

    if args.per_language < 2 or args.dim < 1:
        raise UsageError("--per-language must be at least 2 and --dim positive")
    for path in write_corpus(mini_corpus(args.seed, args.per_language, args.dim), args.out):
        print(path)
    return EXIT_OK


COMMANDS = {"features": cmd_features, "eval": cmd_eval, "llm": cmd_llm, "align": cmd_align,
            "synth": cmd_synth}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cidetect {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, FeatureError, ValueError, OSError) as exc:
        print(f"cidetect {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
