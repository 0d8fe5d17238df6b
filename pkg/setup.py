"""Build script for the optional compiled assembly kernels.

The package works without the extension: helmpert.kernels falls back to the
vectorized numpy implementation when helmpert._kernels is missing. Building
in an environment without Cython or numpy headers therefore still succeeds.
"""

from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = cythonize(
        [
            Extension(
                "helmpert._kernels",
                ["src/helmpert/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
