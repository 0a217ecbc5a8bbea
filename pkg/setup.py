import os

from setuptools import setup, Extension

# The compiled kernels are optional: without Cython (or with
# HANDREFINE_NO_EXT=1) the package installs with the pure-Python fallback.
ext_modules = []
if not os.environ.get("HANDREFINE_NO_EXT"):
    try:
        from Cython.Build import cythonize
        import numpy as np
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            Extension(
                "handrefine._kernels",
                ["src/handrefine/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            ),
            language_level=3,
        )


setup(ext_modules=ext_modules)
