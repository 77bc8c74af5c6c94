"""Build script: compiles the optional Cython kernel core.

The package works without the extension (a pure-Python kernel set is
selected at import time), so a failed extension build is downgraded to
a warning rather than aborting the install.
"""

import sys

from setuptools import setup

# No -ffast-math and contraction off: the compiled kernels must produce
# bit-identical results to the pure-Python fallback, so the C code has to
# keep IEEE semantics and the exact summation order of the Python loops.
EXTRA_COMPILE_ARGS = ["-O3", "-march=native", "-ffp-contract=off"]


def _extensions():
    try:
        from Cython.Build import cythonize
        from setuptools.extension import Extension
    except ImportError:
        print("dsta: Cython not available, skipping compiled kernels", file=sys.stderr)
        return []
    ext = Extension(
        "dsta.backend._kernels",
        ["src/dsta/backend/_kernels.pyx"],
        extra_compile_args=EXTRA_COMPILE_ARGS,
    )
    return cythonize(
        [ext],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )


setup(ext_modules=_extensions())
