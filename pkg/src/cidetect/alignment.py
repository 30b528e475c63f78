"""Agreement between the feature space and the embedding space of one language."""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import kernels
from .pipeline import fit_transform


class DegenerateInputError(ValueError):
    pass


class DegenerateAlignmentWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AlignmentReport:
    language: str
    cka: float
    spearman_rho: float
    procrustes_disparity: float
    overlap_at_k: float
    purity_feat_at_k: float
    purity_emb_at_k: float
    k: int = 5
    n: int = 0


def _pair(X, Y, min_n=3):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError(f"need two 2-D matrices with the same rows, got {X.shape} and {Y.shape}")
    if X.shape[0] < min_n:
        raise ValueError(f"need at least {min_n} samples, got {X.shape[0]}")
    return X, Y


def cka(X, Y):
    """Linear centred kernel alignment, in [0, 1]."""
    X, Y = _pair(X, Y)
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    if not np.any(Xc) or not np.any(Yc):
        raise DegenerateInputError("CKA is undefined for a constant matrix")
    n = X.shape[0]
    if n < max(X.shape[1], Y.shape[1]):
        Kx, Ky = Xc @ Xc.T, Yc @ Yc.T
        value = np.sum(Kx * Ky) / (np.linalg.norm(Kx) * np.linalg.norm(Ky))
    else:
        value = (np.linalg.norm(Xc.T @ Yc) ** 2
                 / (np.linalg.norm(Xc.T @ Xc) * np.linalg.norm(Yc.T @ Yc)))
    return float(min(1.0, max(0.0, value)))


def _upper_distances(X):
    d = np.sqrt(np.maximum(kernels.pairwise_sqdist(X, X), 0.0))
    return d[np.triu_indices(X.shape[0], k=1)]


def rsa_spearman_flagged(X, Y):
    """``(rho, degenerate)`` for the rank correlation of pairwise distances."""
    X, Y = _pair(X, Y)
    rx = rankdata(_upper_distances(X))
    ry = rankdata(_upper_distances(Y))
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    if denom == 0:
        return 0.0, True
    return float(np.clip((rx @ ry) / denom, -1.0, 1.0)), False


def rsa_spearman(X, Y):
    """Spearman rho between the two spaces' pairwise Euclidean distances (i < j)."""
    rho, degenerate = rsa_spearman_flagged(X, Y)
    if degenerate:
        warnings.warn("constant distance structure; Spearman rho reported as 0",
                      DegenerateAlignmentWarning, stacklevel=2)
    return rho


def procrustes_disparity(X, Y, scaling=False):
    """Residual of the best orthogonal map of ``Y`` onto ``X``.

    Both clouds are centred and scaled to unit Frobenius norm, so the
    residual lies in [0, 2] (2 - 2 * nuclear norm of ``X^T Y``). With
    ``scaling=True`` a global scale is also fitted and the residual
    ``1 - nuclear^2`` lies in [0, 1]. Differing widths behave as if the narrower
    matrix were zero-padded, which leaves ``X^T Y`` unchanged.
    """
    X, Y = _pair(X, Y, min_n=1)
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    nx, ny = np.linalg.norm(Xc), np.linalg.norm(Yc)
    if nx == 0 or ny == 0:
        raise DegenerateInputError("Procrustes disparity is undefined for a constant matrix")
    nuclear = np.linalg.svd((Xc / nx).T @ (Yc / ny), compute_uv=False).sum()
    nuclear = min(nuclear, 1.0)
    value = 1.0 - nuclear ** 2 if scaling else 2.0 - 2.0 * nuclear
    return float(max(0.0, value))


def overlap_at_k(X, Y, k=5):
    """Mean share of each point's k nearest neighbours common to both spaces."""
    X, Y = _pair(X, Y, min_n=1)
    if X.shape[0] <= k:
        raise ValueError(f"need more than k={k} samples, got {X.shape[0]}")
    nx = kernels.knn_indices(X, X, k, exclude_self=True)
    ny = kernels.knn_indices(Y, Y, k, exclude_self=True)
    shared = [len(set(a) & set(b)) for a, b in zip(nx.tolist(), ny.tolist())]
    return float(np.mean(shared) / k)


def purity_at_k(X, labels, k=5):
    """Mean share of each point's k nearest neighbours that carry its label."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if X.shape[0] != labels.shape[0]:
        raise ValueError("labels and X disagree in length")
    if X.shape[0] <= k:
        raise ValueError(f"need more than k={k} samples, got {X.shape[0]}")
    nbrs = kernels.knn_indices(X, X, k, exclude_self=True)
    return float(np.mean(labels[nbrs] == labels[:, None]))


def align(language, features, embeddings, labels, k=5):
    """Full alignment report; both spaces are imputed and z-scored on all rows."""
    _, F = fit_transform(features)
    _, E = fit_transform(embeddings)
    return AlignmentReport(
        language=language,
        cka=cka(F, E),
        spearman_rho=rsa_spearman(F, E),
        procrustes_disparity=procrustes_disparity(F, E),
        overlap_at_k=overlap_at_k(F, E, k),
        purity_feat_at_k=purity_at_k(F, labels, k),
        purity_emb_at_k=purity_at_k(E, labels, k),
        k=k,
        n=F.shape[0],
    )
