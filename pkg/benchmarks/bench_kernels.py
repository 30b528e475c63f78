"""Time every numeric kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

The first numba call of each kernel compiles it (or loads it from the on-disk
cache), so every case is run once untimed before measuring. Each case also
reports whether both backends return the same result.
"""

import argparse
import statistics
import time

import numpy as np

from cidetect import kernels
from cidetect._accel import HAVE_NUMBA, use_backend
from cidetect.evaluation import LOO, EvalPlan, LanguageData, run_plan


def _flat(a):
    if isinstance(a, (tuple, list)):
        return np.concatenate([_flat(x) for x in a]) if a else np.zeros(0)
    return np.ravel(np.asarray(a, dtype=np.float64))


def agreement(a, b):
    """``exact``, ``close`` (float summation order only) or ``NO``."""
    a, b = _flat(a), _flat(b)
    if a.shape != b.shape:
        return "NO"
    if np.array_equal(a, b):
        return "exact"
    return "close" if np.allclose(a, b, rtol=1e-8, atol=1e-10) else "NO"


def _forest_inputs(rng, n, p, trees):
    X = rng.normal(size=(n, p))
    y = (X[:, 0] + rng.normal(size=n) > 0).astype(np.int64)
    boot = rng.integers(0, n, size=(trees, n))
    seeds = [int(s) for s in rng.integers(0, 2**63, trees)]
    return X, y, boot, seeds


def cases(quick):
    rng = np.random.default_rng(0)
    n = 80 if quick else 155
    A = rng.normal(size=(n * 3, 64))
    X = rng.normal(size=(n, 27))
    signs = np.where(X[:, 0] + rng.normal(size=n) > 0, 1.0, -1.0)
    Xf, yf, boot, seeds = _forest_inputs(rng, n, 27, 20 if quick else 100)
    mtry = int(np.sqrt(27))
    forests = {}

    def forest_votes():
        return kernels.forest_votes(forests.setdefault(
            kernels.get_backend(), kernels.fit_forest(Xf, yf, boot, mtry, seeds)), Xf)

    scores = rng.normal(size=(40, 11))
    labels = rng.permutation(np.repeat([0, 1], 20))
    scores[:, 0] += 2 * labels
    loo_data = LanguageData("bench", tuple(f"s{i:03d}" for i in range(40)), labels, features=scores)
    loo_plan = EvalPlan("bench", LOO, "random_forest", seeds=(0,))

    return [
        ("pairwise_sqdist", lambda: kernels.pairwise_sqdist(A, A)),
        ("knn_indices", lambda: kernels.knn_indices(A, A, 5, exclude_self=True)),
        ("logreg_gd", lambda: kernels.logreg_gd(X, signs, 1.0 / n)),
        ("svm_pegasos", lambda: kernels.svm_pegasos(X, signs, 1.0 / n)),
        ("fit_tree", lambda: kernels.fit_tree(Xf, yf, np.arange(n), 27, 12345)),
        ("fit_forest", lambda: kernels.fit_forest(Xf, yf, boot, mtry, seeds)),
        ("forest_votes", forest_votes),
        ("rf_loo_n40", lambda: [r.proba for r in run_plan(loo_plan, loo_data)[0]]),
    ]


def timed(fn, repeat):
    result = fn()  # warm-up: compilation or cache load
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return result, statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller inputs")
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"{'kernel':<16}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}  match")
    for name, fn in cases(args.quick):
        with use_backend("numba"):
            r_nb, t_nb = timed(fn, args.repeat)
        with use_backend("numpy"):
            r_np, t_np = timed(fn, args.repeat)
        # the two forest representations differ; compare their votes instead
        match = "n/a" if name == "fit_forest" else agreement(r_nb, r_np)
        print(f"{name:<16}{t_nb * 1e3:>12.3f}{t_np * 1e3:>12.3f}{t_np / t_nb:>9.1f}x  {match}")


if __name__ == "__main__":
    main()
