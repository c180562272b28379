import os

import numpy as np
from setuptools import Extension, setup

# NSL_LAB_PURE=1 skips the compiled core; the package then runs on the numpy fallback.
ext_modules = []
if os.environ.get("NSL_LAB_PURE") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "nsl_lab._kernels",
                    ["src/nsl_lab/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=ext_modules)
