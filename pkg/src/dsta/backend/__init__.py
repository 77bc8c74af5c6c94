"""Kernel backend selection.

The compiled Cython core is preferred; the pure-Python kernel set is the
fallback when the extension was not built. ``DSTA_BACKEND=python`` or
``DSTA_BACKEND=c`` forces a choice (``c`` raises if the extension is
missing). Both backends produce bit-identical results; only speed differs.
"""

import os
import warnings
from contextlib import contextmanager

from . import kernels_py


def _load_compiled():
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = _load_compiled()
_forced = os.environ.get("DSTA_BACKEND", "").strip().lower()

if _forced == "python":
    active = kernels_py
elif _forced == "c":
    if _compiled is None:
        raise ImportError(
            "DSTA_BACKEND=c but the compiled kernel extension is not built; "
            "reinstall the package with a C compiler available"
        )
    active = _compiled
elif _forced:
    raise ImportError(f"unknown DSTA_BACKEND value {_forced!r} (use 'c' or 'python')")
elif _compiled is not None:
    active = _compiled
else:
    warnings.warn(
        "dsta: compiled kernels unavailable, using the pure-Python fallback "
        "(correct but far slower)",
        RuntimeWarning,
        stacklevel=2,
    )
    active = kernels_py


def name() -> str:
    return active.NAME


def compiled_available() -> bool:
    return _compiled is not None


def get(backend_name: str):
    """Return a kernel module by name without switching the active one."""
    if backend_name == "python":
        return kernels_py
    if backend_name == "c":
        if _compiled is None:
            raise ValueError("compiled kernel backend is not built")
        return _compiled
    raise ValueError(f"unknown backend {backend_name!r}")


@contextmanager
def use(backend_name: str):
    """Temporarily switch the active backend (tests and benchmarks only).

    Not safe while other threads are mid-operation; the swap is process-wide.
    """
    global active
    previous = active
    active = get(backend_name)
    try:
        yield active
    finally:
        active = previous
