from setuptools import Extension, setup

import numpy as np
from Cython.Build import cythonize

# -ffp-contract=off: the compiled kernels promise the same per-element
# rounding sequence as the numpy fallback; fused multiply-adds would break
# the bitwise forward-agreement contract.
extensions = [
    Extension(
        "dilseg._kernels",
        ["src/dilseg/_kernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
)
