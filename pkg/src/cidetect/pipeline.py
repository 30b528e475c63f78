"""Leakage-safe preprocessing and the two fusion strategies."""

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .ingest import CONTROL, PATIENT

log = logging.getLogger(__name__)

FEATURES_ONLY = "features_only"
EMBEDDINGS_ONLY = "embeddings_only"
EARLY_FUSION = "early_fusion"
LATE_FUSION = "late_fusion"
REPRESENTATIONS = (FEATURES_ONLY, EMBEDDINGS_ONLY, EARLY_FUSION, LATE_FUSION)

N_FEATURES = 11


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FittedPreprocessor:
    """Median imputation followed by a z-score, both fitted on training rows."""

    medians: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    all_missing: np.ndarray  # bool per dimension

    @property
    def fitted_dim(self):
        return int(self.medians.shape[0])

    def same_params(self, other):
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("medians", "means", "stds", "all_missing"))

    def to_json(self):
        return json.dumps({"medians": self.medians.tolist(), "means": self.means.tolist(),
                           "stds": self.stds.tolist(), "all_missing": self.all_missing.tolist()})


def _column_medians(X, counts):
    """NaN-aware column medians; all-NaN columns give 0."""
    srt = np.sort(X, axis=0)  # NaN sorts last
    cols = np.arange(X.shape[1])
    lo = np.maximum((counts - 1) // 2, 0)
    hi = np.maximum(counts // 2, 0)
    med = (srt[lo, cols] + srt[hi, cols]) / 2.0
    return np.where(counts > 0, med, 0.0)


def fit_preprocessor(train_matrix):
    """Fit imputation medians and population z-score parameters.

    ``NaN`` marks a missing value. An all-missing column gets median 0 (and is
    flagged); a constant column gets std 1 so it standardises to 0.
    """
    X = np.asarray(train_matrix, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"need a non-empty 2-D training matrix, got shape {X.shape}")
    observed = ~np.isnan(X)
    all_missing = ~observed.any(axis=0)
    medians = _column_medians(X, observed.sum(axis=0))
    if all_missing.any():
        log.debug("all-missing training columns %s imputed with 0", np.flatnonzero(all_missing).tolist())
    imputed = np.where(observed, X, medians)
    means = imputed.mean(axis=0)
    stds = imputed.std(axis=0)
    # std can underflow to 0 on subnormal spreads as well
    constant = (imputed.max(axis=0) == imputed.min(axis=0)) | ~(stds > 0)
    means[constant] = imputed[0, constant]
    stds[constant] = 1.0
    return FittedPreprocessor(medians=_frozen(medians), means=_frozen(means), stds=_frozen(stds),
                              all_missing=np.array(all_missing, copy=True))


def transform(prep, matrix):
    X = np.asarray(matrix, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != prep.fitted_dim:
        raise ValueError(f"dimension mismatch: matrix has {X.shape[1]} columns, "
                         f"preprocessor was fitted on {prep.fitted_dim}")
    X = np.where(np.isnan(X), prep.medians, X)
    return (X - prep.means) / prep.stds


def fit_transform(train_matrix):
    prep = fit_preprocessor(train_matrix)
    return prep, transform(prep, train_matrix)


def fusion_weight(emb_dim, feat_dim=N_FEATURES):
    """Scale for the feature block so both blocks carry comparable squared norm."""
    if emb_dim <= 0 or feat_dim <= 0:
        raise ValueError("dimensions must be positive")
    return math.sqrt(emb_dim / feat_dim)


def early_fuse(emb_std, feat_std):
    """Concatenate standardised embeddings with reweighted standardised features."""
    emb_std = np.atleast_2d(np.asarray(emb_std, dtype=np.float64))
    feat_std = np.atleast_2d(np.asarray(feat_std, dtype=np.float64))
    if emb_std.shape[0] != feat_std.shape[0]:
        raise ValueError(f"row-count mismatch: {emb_std.shape[0]} vs {feat_std.shape[0]}")
    w = fusion_weight(emb_std.shape[1], feat_std.shape[1])
    return np.hstack([emb_std, w * feat_std])


def late_fuse_proba(p_emb, p_feat):
    p_emb = np.asarray(p_emb, dtype=np.float64)
    p_feat = np.asarray(p_feat, dtype=np.float64)
    if np.any((p_emb < 0) | (p_emb > 1) | (p_feat < 0) | (p_feat > 1)) or \
            np.any(np.isnan(p_emb) | np.isnan(p_feat)):
        raise ValueError("probabilities must lie in [0, 1]")
    return (p_emb + p_feat) / 2.0


def late_fuse(p_emb, p_feat):
    """Average two P(Patient) values; returns ``(p, label)`` with ties going to Patient."""
    p = float(late_fuse_proba(p_emb, p_feat))
    return p, PATIENT if p >= 0.5 else CONTROL
