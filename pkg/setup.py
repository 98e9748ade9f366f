import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    USE_CYTHON = True
except ImportError:
    USE_CYTHON = False

# FLOWVFI_NO_EXT=1 skips the compiled kernels entirely (pure-Python install)
if os.environ.get("FLOWVFI_NO_EXT"):
    extensions = []
elif USE_CYTHON:
    extensions = cythonize(
        [
            Extension(
                "flowvfi._kernels._ckernels",
                ["src/flowvfi/_kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
else:
    extensions = []

setup(ext_modules=extensions)
