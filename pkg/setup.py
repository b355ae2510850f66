"""Build script: compiles the optional active-set QP extension.

Set PRICELAB_NO_EXT=1 to skip the extension entirely; the package then
falls back to the pure-NumPy kernel at import time.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("PRICELAB_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "pricelab._qp_ext",
                    ["src/pricelab/_qp_ext.pyx"],
                    extra_compile_args=["-O3"],
                    include_dirs=[numpy.get_include()],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
