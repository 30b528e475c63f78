"""Backend switch for the numeric kernels.

Kernels come in pairs: a numba ``@njit`` loop version and a vectorised numpy
version. The active one is picked at import time from ``CIDETECT_BACKEND``
(``numba`` or ``numpy``); ``CIDETECT_DISABLE_NUMBA=1`` is accepted as a
shorthand for ``numpy``. When numba is not importable the numpy path is used.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is declared but may be missing in odd installs
    numba = None
    HAVE_NUMBA = False


def _initial_backend():
    if os.environ.get("CIDETECT_DISABLE_NUMBA", "").lower() in ("1", "true", "yes"):
        return "numpy"
    name = os.environ.get("CIDETECT_BACKEND", "numba").strip().lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"CIDETECT_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        return "numpy"
    return name


_backend = _initial_backend()


def njit(*args, **kwargs):
    """``numba.njit`` when numba is installed, otherwise an identity decorator."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def get_backend():
    return _backend


def set_backend(name):
    """Switch backend at runtime (tests and benchmarks); returns the previous one."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    previous, _backend = _backend, name
    return previous


class use_backend:
    """Context manager form of :func:`set_backend`."""

    def __init__(self, name):
        self.name = name
        self._previous = None

    def __enter__(self):
        self._previous = set_backend(self.name)
        return self

    def __exit__(self, *exc):
        set_backend(self._previous)
        return False
