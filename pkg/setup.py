"""Build script: compiles the optional Cython evaluation core.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile only costs speed.
"""
import sys

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "gellab._core",
                ["src/gellab/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": 3},
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    sys.stderr.write(f"gellab: skipping Cython extension ({exc}); "
                     "pure-numpy fallback will be used\n")

setup(ext_modules=ext_modules)
