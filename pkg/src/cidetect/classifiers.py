"""In-repo classifiers behind one ``train`` / ``predict_proba`` contract.

Labels are encoded as 1 = Patient, 0 = Control. Every model returns
P(Patient) and predicts Patient when that probability is >= 0.5.

Adding a family (e.g. an adapter around an external tabular model) means
subclassing :class:`TrainedModel`, implementing ``_fit`` and ``_proba``, and
registering the class in :data:`FAMILIES`.
"""

import math

import numpy as np

from . import kernels
from .ingest import CONTROL, PATIENT


class SingleClassError(ValueError):
    """Training data holds one class only and the family cannot handle it."""


def encode_labels(y):
    """Map Patient/Control strings (or 0/1) to an int array with 1 = Patient."""
    y = list(y)
    out = np.empty(len(y), dtype=np.int64)
    for i, v in enumerate(y):
        if v == PATIENT or v is True:
            out[i] = 1
        elif v == CONTROL or v is False:
            out[i] = 0
        elif v in (0, 1):
            out[i] = int(v)
        else:
            raise ValueError(f"unknown label {v!r}")
    return out


def decode_labels(y):
    return [PATIENT if v else CONTROL for v in np.asarray(y)]


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class TrainedModel:
    family = None

    def __init__(self, seed=0):
        self.seed = seed
        self.n_features_ = None
        self.n_iter_ = 0

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError(f"need a non-empty 2-D matrix, got shape {X.shape}")
        y = encode_labels(y)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y have different lengths")
        self.n_features_ = X.shape[1]
        self._fit(X, y)
        return self

    def predict_proba(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.n_features_ is None:
            raise RuntimeError("model is not trained")
        if X.shape[1] != self.n_features_:
            raise ValueError(f"dimension mismatch: got {X.shape[1]} columns, trained on {self.n_features_}")
        return np.clip(self._proba(X), 0.0, 1.0)

    def predict(self, X):
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def _fit(self, X, y):
        raise NotImplementedError

    def _proba(self, X):
        raise NotImplementedError


def _require_two_classes(y, family):
    if y.min() == y.max():
        raise SingleClassError(f"{family} needs both classes in the training data")


class LogisticRegression(TrainedModel):
    """L2 logistic regression, lambda = 1/n (the C = 1 convention)."""

    family = "logreg"

    def __init__(self, seed=0, C=1.0, max_iter=1000, tol=1e-6):
        super().__init__(seed)
        self.C = C
        self.max_iter = max_iter
        self.tol = tol

    def _fit(self, X, y):
        _require_two_classes(y, self.family)
        lam = 1.0 / (self.C * X.shape[0])
        self.coef_, self.intercept_, self.n_iter_ = kernels.logreg_gd(
            X, 2.0 * y - 1.0, lam, self.max_iter, self.tol)

    def decision_function(self, X):
        return np.asarray(X, dtype=np.float64) @ self.coef_ + self.intercept_

    def _proba(self, X):
        return _sigmoid(self.decision_function(X))


def platt_fit(margins, y, max_iter=100, min_step=1e-10, sigma=1e-12):
    """Fit ``P(y=1 | f) = 1 / (1 + exp(A f + B))`` by Newton's method.

    Follows the regularised targets and backtracking scheme of the usual
    Platt scaling implementation (Lin, Lin & Weng 2007).
    """
    with np.errstate(over="ignore"):
        return _platt_newton(np.asarray(margins, dtype=np.float64), np.asarray(y),
                             max_iter, min_step, sigma)


def _platt_newton(f, y, max_iter, min_step, sigma):
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    hi = (n_pos + 1.0) / (n_pos + 2.0)
    lo = 1.0 / (n_neg + 2.0)
    t = np.where(y == 1, hi, lo)
    A, B = 0.0, math.log((n_neg + 1.0) / (n_pos + 1.0))

    def objective(a, b):
        fab = f * a + b
        return float(np.sum(np.where(fab >= 0, t * fab + np.log1p(np.exp(-fab)),
                                     (t - 1.0) * fab + np.log1p(np.exp(fab)))))

    fval = objective(A, B)
    for _ in range(max_iter):
        fab = f * A + B
        p = np.where(fab >= 0, np.exp(-fab) / (1.0 + np.exp(-fab)), 1.0 / (1.0 + np.exp(fab)))
        q = 1.0 - p
        d2 = p * q
        h11 = sigma + np.sum(f * f * d2)
        h22 = sigma + np.sum(d2)
        h21 = np.sum(f * d2)
        d1 = t - p
        g1 = np.sum(f * d1)
        g2 = np.sum(d1)
        if abs(g1) < 1e-5 and abs(g2) < 1e-5:
            break
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        step = 1.0
        while step >= min_step:
            newA, newB = A + step * dA, B + step * dB
            newf = objective(newA, newB)
            if newf < fval + 1e-4 * step * gd:
                A, B, fval = newA, newB, newf
                break
            step /= 2.0
        else:
            break
    return A, B


class LinearSVM(TrainedModel):
    """Hinge-loss linear SVM with Platt-scaled probabilities."""

    family = "svm_linear"

    def __init__(self, seed=0, C=1.0, n_iter=2000):
        super().__init__(seed)
        self.C = C
        self.n_iter = n_iter

    def _fit(self, X, y):
        _require_two_classes(y, self.family)
        lam = 1.0 / (self.C * X.shape[0])
        self.coef_, self.intercept_ = kernels.svm_pegasos(X, 2.0 * y - 1.0, lam, self.n_iter)
        self.n_iter_ = self.n_iter
        self.platt_ = platt_fit(self.decision_function(X), y)

    def decision_function(self, X):
        return np.asarray(X, dtype=np.float64) @ self.coef_ + self.intercept_

    def _proba(self, X):
        A, B = self.platt_
        return _sigmoid(-(A * self.decision_function(X) + B))


class KNeighbors(TrainedModel):
    """Euclidean k-NN; P(Patient) is the Patient share among the neighbours."""

    def __init__(self, k, seed=0):
        super().__init__(seed)
        self.k = k
        self.family = f"knn{k}"

    def _fit(self, X, y):
        self.X_ = X.copy()
        self.y_ = y.copy()
        self.k_ = min(self.k, X.shape[0])

    def _proba(self, X):
        nbrs = kernels.knn_indices(self.X_, X, self.k_)
        return self.y_[nbrs].sum(axis=1) / self.k_


class DecisionTree(TrainedModel):
    """Unpruned Gini tree; ``max_features=None`` scores every feature at each node."""

    family = "decision_tree"

    def __init__(self, seed=0, max_features=None):
        super().__init__(seed)
        self.max_features = max_features

    def _fit(self, X, y):
        rng = np.random.default_rng(self.seed)
        mtry = X.shape[1] if self.max_features is None else self.max_features
        tree_seed = int(rng.integers(0, 2**63))
        self.tree_ = kernels.fit_tree(X, y, np.arange(X.shape[0]), mtry, tree_seed)

    def _proba(self, X):
        return kernels.tree_apply(self.tree_, X)


def _sqrt_features(p):
    return max(1, int(math.sqrt(p)))


class RandomForest(TrainedModel):
    """Bagged Gini trees with sqrt(p) candidate features per split.

    Each tree casts one vote (its leaf's majority class, ties to Patient);
    P(Patient) is the share of Patient votes.
    """

    family = "random_forest"

    def __init__(self, seed=0, n_trees=100, bootstrap=True, max_features="sqrt"):
        super().__init__(seed)
        self.n_trees = n_trees
        self.bootstrap = bootstrap
        self.max_features = max_features

    def _fit(self, X, y):
        n, p = X.shape
        mtry = _sqrt_features(p) if self.max_features == "sqrt" else (self.max_features or p)
        rng = np.random.default_rng(self.seed)
        boot = np.empty((self.n_trees, n), dtype=np.int64)
        seeds = []
        for t in range(self.n_trees):
            boot[t] = rng.integers(0, n, n) if self.bootstrap else np.arange(n)
            seeds.append(int(rng.integers(0, 2**63)))
        self.forest_ = kernels.fit_forest(X, y, boot, mtry, seeds)

    def _proba(self, X):
        return kernels.forest_votes(self.forest_, X) / self.n_trees


class Majority(TrainedModel):
    """Constant predictor: the most frequent training class, ties to Patient."""

    family = "majority"

    def _fit(self, X, y):
        n_pos = int(y.sum())
        self.constant_ = 1 if n_pos >= y.size - n_pos else 0

    @classmethod
    def constant(cls, label, n_features):
        model = cls()
        model.constant_ = int(encode_labels([label])[0])
        model.n_features_ = n_features
        return model

    def _proba(self, X):
        return np.full(X.shape[0], float(self.constant_))


FAMILIES = {
    "logreg": LogisticRegression,
    "svm_linear": LinearSVM,
    "knn3": lambda seed=0: KNeighbors(3, seed),
    "knn5": lambda seed=0: KNeighbors(5, seed),
    "knn7": lambda seed=0: KNeighbors(7, seed),
    "random_forest": RandomForest,
    "majority": Majority,
}

# families whose fitted model depends on the seed
STOCHASTIC_FAMILIES = frozenset({"random_forest"})


def train(family, X, y, seed=0):
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}")
    return FAMILIES[family](seed=seed).fit(X, y)


def predict_proba(model, X):
    return model.predict_proba(X)


def predict(model, X):
    return decode_labels(model.predict(X))
