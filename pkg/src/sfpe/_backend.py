"""Kernel backend selection.

``SFPE_BACKEND`` chooses the implementation of the hot loops:

``auto`` (default)
    the compiled extension if it imports, otherwise numpy
``cython``
    the compiled extension; fail loudly if it is missing
``python``
    the numpy fallback
"""
import os

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_CHOICES = ("auto", "cython", "python")


def available():
    """Names of the backends usable in this installation."""
    return ("cython", "python") if _compiled is not None else ("python",)


def get(name=None):
    """Return the kernel module for ``name`` (default: ``$SFPE_BACKEND`` or auto)."""
    name = (name or os.environ.get("SFPE_BACKEND") or "auto").lower()
    if name not in _CHOICES:
        raise ValueError(f"unknown backend {name!r}; choose one of {', '.join(_CHOICES)}")
    if name == "python":
        return _fallback
    if _compiled is None:
        if name == "cython":
            raise ImportError("the compiled extension sfpe._kernels is not built")
        return _fallback
    return _compiled


def name_of(module):
    return "cython" if module is _compiled and module is not None else "python"


def resolve_threads(threads=None):
    """Worker count: explicit value, else ``$SFPE_THREADS``, else all cores."""
    if threads is None:
        env = os.environ.get("SFPE_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    threads = int(threads)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    return threads
