import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "loopfit.kernels._compiled",
        ["src/loopfit/kernels/_compiled.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        # reassociation lets the reduction loops vectorize; NaN semantics are
        # kept so the DTW comparisons stay well-defined
        extra_compile_args=[
            "-O3",
            "-march=native",
            "-funsafe-math-optimizations",
            "-fno-finite-math-only",
        ],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        language_level=3,
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
)
