"""Build script for the optional Cython kernel extension.

The package is fully functional without the extension; vrdu.kernels falls
back to a pure-numpy implementation at import time if the build failed or
was skipped (VRDU_NO_EXT=1).
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("VRDU_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "vrdu._ckernels",
                    ["src/vrdu/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
