"""Leave-one-out and few-shot episodic evaluation, scored by Macro-F1.

Every fold is a pure function of (plan, data, seed, held-out index): model
seeds and support sets come from a counter-based stream keyed by
``(seed, sample id, episode)``, so results do not depend on fold order or on
the number of worker threads.
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .classifiers import STOCHASTIC_FAMILIES, Majority, SingleClassError, train
from .ingest import CONTROL, LABELS, PATIENT
from .pipeline import (EARLY_FUSION, EMBEDDINGS_ONLY, FEATURES_ONLY, LATE_FUSION, REPRESENTATIONS,
                       early_fuse, fit_preprocessor, late_fuse_proba, transform)

log = logging.getLogger(__name__)

LOO = "loo_full"
FEWSHOT = "fewshot"
ZEROSHOT = "zeroshot"
MODES = (LOO, FEWSHOT, ZEROSHOT)
DEFAULT_KS = (1, 2, 3, 5)
DEFAULT_SEEDS = (0, 1, 2)


class InsufficientSupport(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LanguageData:
    """Per-language design matrices in sample-id order; labels 1 = Patient."""

    language: str
    ids: Tuple[str, ...]
    y: np.ndarray
    features: Optional[np.ndarray] = None  # (n, 11), NaN = missing
    embeddings: Optional[np.ndarray] = None  # (n, d)

    @classmethod
    def from_corpus(cls, corpus, features, language):
        samples = corpus.by_language(language)
        if not samples:
            raise ValueError(f"no samples for language {language!r}")
        ids = tuple(s.id for s in samples)
        y = np.array([1 if s.label == PATIENT else 0 for s in samples], dtype=np.int64)
        feats = np.vstack([features[i].as_array() for i in ids]) if features is not None else None
        embs = np.vstack([corpus.embeddings[i].document_vector for i in ids])
        return cls(language=language, ids=ids, y=y, features=feats, embeddings=embs)

    @property
    def n(self):
        return len(self.ids)

    def with_rows(self, rows, features=None, embeddings=None):
        """Copy with selected rows replaced (used to probe for leakage)."""
        feats = None if self.features is None else self.features.copy()
        embs = None if self.embeddings is None else self.embeddings.copy()
        if features is not None:
            feats[rows] = features
        if embeddings is not None:
            embs[rows] = embeddings
        return replace(self, features=feats, embeddings=embs)


@dataclass(frozen=True)
class EvalPlan:
    language: str
    mode: str
    family: str
    representation: Optional[str] = FEATURES_ONLY
    k: Optional[int] = None
    episodes: int = 3
    seeds: Tuple[int, ...] = DEFAULT_SEEDS

    def __post_init__(self):
        if self.mode not in (LOO, FEWSHOT):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.representation is None and self.family != "majority":
            raise ValueError("only the majority family runs without a representation")
        if self.representation is not None and self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.mode == FEWSHOT and (self.k is None or self.k < 1 or self.episodes < 1):
            raise ValueError("few-shot plans need k >= 1 and episodes >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


@dataclass(frozen=True)
class FoldResult:
    sample_id: str
    seed: int
    true_label: str
    predicted: Optional[str]
    proba: Optional[float] = None
    vote: Optional[str] = None
    episode_labels: Tuple[Optional[str], ...] = ()
    episode_probas: Tuple[float, ...] = ()
    supports: Tuple[Tuple[str, ...], ...] = ()
    failure: Optional[str] = None
    abstained: bool = False

    @property
    def failed(self):
        return self.failure is not None


# ---------------------------------------------------------------------------
# counter-based seeding


def _id_key(sample_id):
    return int.from_bytes(hashlib.sha256(sample_id.encode("utf-8")).digest()[:8], "little")


_STREAMS = {"support": 1, "model": 2}


def stream_rng(seed, sample_id, episode, stream):
    """Generator keyed by (seed, sample id, episode, stream); order independent."""
    return np.random.default_rng(np.random.SeedSequence(
        [int(seed) & 0xFFFFFFFF, _id_key(sample_id), int(episode), _STREAMS[stream]]))


def model_seed(seed, sample_id, episode=0):
    return int(stream_rng(seed, sample_id, episode, "model").integers(0, 2**63))


def sample_support(y, ids, held_out, k, seed, episode):
    """Draw ``k`` Patient then ``k`` Control rows uniformly without replacement,
    never including ``held_out``."""
    rng = stream_rng(seed, ids[held_out], episode, "support")
    chosen = []
    for cls in (1, 0):
        pool = np.flatnonzero(y == cls)
        pool = pool[pool != held_out]
        if pool.size < k:
            raise InsufficientSupport(
                f"class {LABELS[1 - cls]} has {pool.size} samples left, need {k}")
        chosen.append(rng.choice(pool, size=k, replace=False))
    return np.concatenate(chosen)


# ---------------------------------------------------------------------------
# one fold


def majority_constant(y):
    """Most frequent class of ``y`` (1 = Patient), ties to Patient."""
    n_pos = int(np.sum(y))
    return PATIENT if n_pos >= len(y) - n_pos else CONTROL


def _blocks(representation):
    if representation == FEATURES_ONLY:
        return ("features",)
    if representation == EMBEDDINGS_ONLY:
        return ("embeddings",)
    return ("embeddings", "features")


@dataclass
class FoldModel:
    representation: Optional[str]
    preprocessors: Dict[str, object] = field(default_factory=dict)
    models: Dict[str, object] = field(default_factory=dict)

    def _standardised(self, data, rows):
        out = {}
        for block, prep in self.preprocessors.items():
            out[block] = transform(prep, getattr(data, block)[rows])
        return out

    def predict_proba(self, data, rows):
        rows = np.atleast_1d(rows)
        if self.representation is None:
            return self.models["majority"].predict_proba(np.zeros((rows.size, 1)))
        std = self._standardised(data, rows)
        if self.representation == EARLY_FUSION:
            return self.models["early"].predict_proba(early_fuse(std["embeddings"], std["features"]))
        if self.representation == LATE_FUSION:
            return late_fuse_proba(self.models["embeddings"].predict_proba(std["embeddings"]),
                                   self.models["features"].predict_proba(std["features"]))
        (block,) = std
        return self.models[block].predict_proba(std[block])


def fit_fold(data, train_rows, representation, family, seed, majority_label=None):
    """Fit preprocessing and classifier(s) on ``train_rows`` only."""
    train_rows = np.asarray(train_rows)
    y = data.y[train_rows]
    if family == "majority":
        label = majority_label if majority_label is not None else majority_constant(y)
        return FoldModel(None, models={"majority": Majority.constant(label, 1)})
    fm = FoldModel(representation)
    std = {}
    for block in _blocks(representation):
        matrix = getattr(data, block)
        if matrix is None:
            raise ValueError(f"{representation} needs {block}, which this dataset lacks")
        prep = fit_preprocessor(matrix[train_rows])
        fm.preprocessors[block] = prep
        std[block] = transform(prep, matrix[train_rows])
    if representation == EARLY_FUSION:
        fm.models["early"] = train(family, early_fuse(std["embeddings"], std["features"]), y, seed)
    else:
        for block, X in std.items():
            fm.models[block] = train(family, X, y, seed)
    return fm


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _label(p):
    return PATIENT if p >= 0.5 else CONTROL


def _truth(data, i):
    return PATIENT if data.y[i] == 1 else CONTROL


def run_loo(plan, data, workers=1, majority_policy="language"):
    """Leave-one-out over every sample, once per seed.

    ``majority_policy="language"`` makes the majority family a constant
    predictor from the full language's class counts (ties to Patient);
    ``"fold"`` fits it on each training pool instead.
    """
    if plan.mode != LOO:
        raise ValueError("run_loo needs a loo_full plan")
    majority_label = None
    if plan.family == "majority" and majority_policy == "language":
        majority_label = majority_constant(data.y)
    everyone = np.arange(data.n)

    def fold(args):
        seed, i = args
        train_rows = everyone[everyone != i]
        try:
            fm = fit_fold(data, train_rows, plan.representation, plan.family,
                          model_seed(seed, data.ids[i]), majority_label)
        except SingleClassError as exc:
            return FoldResult(data.ids[i], seed, _truth(data, i), None, failure=str(exc))
        p = float(fm.predict_proba(data, i)[0])
        return FoldResult(data.ids[i], seed, _truth(data, i), _label(p), proba=p)

    deterministic = plan.family not in STOCHASTIC_FAMILIES
    first = _map(fold, [(plan.seeds[0], i) for i in range(data.n)], workers)
    results = list(first)
    for seed in plan.seeds[1:]:
        if deterministic:
            results.extend(replace(r, seed=seed) for r in first)
        else:
            results.extend(_map(fold, [(seed, i) for i in range(data.n)], workers))
    return sorted(results, key=lambda r: (r.seed, r.sample_id))


def aggregate_episodes(labels, probas=None):
    """Combine per-episode decisions.

    Returns ``(final, vote, mean_proba)``. The vote ignores abstentions
    (``None``) and breaks ties towards Patient. When probabilities are given,
    their mean thresholded at 0.5 is the final decision.
    """
    cast = [lab for lab in labels if lab is not None]
    vote = None
    if cast:
        n_pos = sum(lab == PATIENT for lab in cast)
        vote = PATIENT if n_pos >= len(cast) - n_pos else CONTROL
    if probas is not None and len(probas):
        mean_p = float(np.mean(probas))
        return _label(mean_p), vote, mean_p
    return vote, vote, None


def run_fewshot(plan, data, workers=1, majority_policy="language"):
    """Outer leave-one-out; ``plan.episodes`` support draws of ``k`` per class."""
    if plan.mode != FEWSHOT:
        raise ValueError("run_fewshot needs a fewshot plan")
    majority_label = None
    if plan.family == "majority" and majority_policy == "language":
        majority_label = majority_constant(data.y)

    def fold(args):
        seed, i = args
        sid = data.ids[i]
        labels, probas, supports = [], [], []
        try:
            for e in range(plan.episodes):
                support = sample_support(data.y, data.ids, i, plan.k, seed, e)
                supports.append(tuple(data.ids[j] for j in support))
                fm = fit_fold(data, support, plan.representation, plan.family,
                              model_seed(seed, sid, e), majority_label)
                p = float(fm.predict_proba(data, i)[0])
                probas.append(p)
                labels.append(_label(p))
        except (InsufficientSupport, SingleClassError) as exc:
            return FoldResult(sid, seed, _truth(data, i), None, supports=tuple(supports),
                              failure=str(exc))
        final, vote, mean_p = aggregate_episodes(labels, probas)
        return FoldResult(sid, seed, _truth(data, i), final, proba=mean_p, vote=vote,
                          episode_labels=tuple(labels), episode_probas=tuple(probas),
                          supports=tuple(supports))

    jobs = [(seed, i) for seed in plan.seeds for i in range(data.n)]
    return sorted(_map(fold, jobs, workers), key=lambda r: (r.seed, r.sample_id))


# ---------------------------------------------------------------------------
# scoring


def confusion_counts(y_true, y_pred):
    """Counts with Patient as the positive class."""
    tp = fp = fn = tn = 0
    for t, p in zip(y_true, y_pred):
        if p == PATIENT:
            if t == PATIENT:
                tp += 1
            else:
                fp += 1
        elif t == PATIENT:
            fn += 1
        else:
            tn += 1
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn}


def _prf(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    # equals 2PR/(P+R), but as a single correctly rounded division
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return precision, recall, f1


def per_class_scores(y_true, y_pred):
    c = confusion_counts(y_true, y_pred)
    return {PATIENT: _prf(c["tp"], c["fp"], c["fn"]),
            CONTROL: _prf(c["tn"], c["fn"], c["fp"])}


def macro_f1_labels(y_true, y_pred):
    scores = per_class_scores(y_true, y_pred)
    return (scores[PATIENT][2] + scores[CONTROL][2]) / 2


def _scored_pairs(results):
    truths, preds = [], []
    for r in results:
        if r.failed:
            continue
        pred = r.predicted
        if pred is None:  # abstention counts as a wrong answer
            pred = CONTROL if r.true_label == PATIENT else PATIENT
        truths.append(r.true_label)
        preds.append(pred)
    return truths, preds


def macro_f1(results):
    """Macro-F1 over Patient/Control; failed folds are excluded."""
    truths, preds = _scored_pairs(results)
    if not truths:
        raise ValueError("no scorable fold results")
    return macro_f1_labels(truths, preds)


@dataclass(frozen=True)
class MetricsReport:
    language: str
    model: str
    representation: Optional[str]
    mode: str
    k: Optional[int]
    seeds: Tuple[int, ...]
    macro_f1_per_seed: Tuple[float, ...]
    macro_f1: float
    per_class: Dict[str, Tuple[float, float, float]]
    confusion: Dict[str, int]
    n_results: int
    n_failed: int
    n_abstained: int


def seed_report(language, model, representation, mode, k, seed, results):
    """Score the fold results of a single seed."""
    truths, preds = _scored_pairs(results)
    score = macro_f1_labels(truths, preds) if truths else float("nan")
    return MetricsReport(
        language=language, model=model, representation=representation, mode=mode, k=k,
        seeds=(seed,), macro_f1_per_seed=(score,), macro_f1=score,
        per_class=per_class_scores(truths, preds), confusion=confusion_counts(truths, preds),
        n_results=len(results), n_failed=sum(r.failed for r in results),
        n_abstained=sum(r.abstained for r in results))


def aggregate_seeds(reports):
    """Merge single-seed reports: mean Macro-F1, pooled counts, per-seed values kept."""
    if not reports:
        raise ValueError("need at least one seed report")
    head = reports[0]
    per_seed = tuple(v for r in reports for v in r.macro_f1_per_seed)
    seeds = tuple(s for r in reports for s in r.seeds)
    finite = [v for v in per_seed if v == v]
    confusion = {key: sum(r.confusion[key] for r in reports) for key in head.confusion}
    c = confusion
    return MetricsReport(
        language=head.language, model=head.model, representation=head.representation,
        mode=head.mode, k=head.k, seeds=seeds, macro_f1_per_seed=per_seed,
        macro_f1=float(np.mean(finite)) if finite else float("nan"),
        per_class={PATIENT: _prf(c["tp"], c["fp"], c["fn"]), CONTROL: _prf(c["tn"], c["fn"], c["fp"])},
        confusion=confusion, n_results=sum(r.n_results for r in reports),
        n_failed=sum(r.n_failed for r in reports), n_abstained=sum(r.n_abstained for r in reports))


def summarize(language, model, representation, mode, k, results):
    by_seed = {}
    for r in results:
        by_seed.setdefault(r.seed, []).append(r)
    return aggregate_seeds([seed_report(language, model, representation, mode, k, s, by_seed[s])
                            for s in sorted(by_seed)])


def run_plan(plan, data, workers=1, majority_policy="language"):
    runner = run_loo if plan.mode == LOO else run_fewshot
    results = runner(plan, data, workers=workers, majority_policy=majority_policy)
    report = summarize(plan.language, plan.family, plan.representation, plan.mode, plan.k, results)
    return results, report


def expand_grid(languages, families, representations, modes, ks=DEFAULT_KS, episodes=3,
                seeds=DEFAULT_SEEDS):
    """Deterministically ordered plans; majority runs once per (language, mode, k)."""
    plans = []
    for language in sorted(languages):
        for mode in sorted(modes):
            for k in (sorted(ks) if mode == FEWSHOT else [None]):
                for family in sorted(families):
                    reps = [None] if family == "majority" else sorted(representations)
                    for rep in reps:
                        plans.append(EvalPlan(language=language, mode=mode, family=family,
                                              representation=rep, k=k, episodes=episodes,
                                              seeds=tuple(seeds)))
    return plans
