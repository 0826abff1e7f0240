import os

from setuptools import setup

ext_modules = []
if os.environ.get("PREDIFLOW_PURE_PYTHON") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        extensions = [
            Extension(
                "prediflow._kernels._fastops",
                ["src/prediflow/_kernels/_fastops.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3", "-march=native", "-fno-math-errno"],
            )
        ]
        ext_modules = cythonize(
            extensions,
            compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
        )
    except ImportError:
        # Package still works without the compiled core; the numpy fallback
        # backend is selected at import time.
        ext_modules = []

setup(ext_modules=ext_modules)
