import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; the numpy fallback kernels are used
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("CARDIOXNET_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "cardioxnet._ckernels",
                ["src/cardioxnet/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                # no FMA contraction: forward sums must stay bitwise equal to the loop oracle
                extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
