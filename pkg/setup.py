"""Builds the optional compiled kernel core.

The package works without it (the numpy fallback is selected at import),
so the extension is skipped rather than failing the install when Cython
or a C toolchain is unavailable.
"""

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = cythonize(
        [
            Extension(
                "msam.kernels._compiled",
                ["src/msam/kernels/_compiled.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
        compiler_directives={"boundscheck": False, "wraparound": False},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
