import os
import sys

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; sfpe falls back to numpy kernels
    cythonize = None

compile_args = ["-O3", "-ffp-contract=off"]
link_args = []
if sys.platform.startswith("linux") and os.environ.get("SFPE_NO_OPENMP") != "1":
    compile_args.append("-fopenmp")
    link_args.append("-fopenmp")
# tuned for the build machine unless a portable binary is requested
if os.environ.get("SFPE_PORTABLE") != "1" and sys.platform != "win32":
    compile_args.append("-march=native")

ext_modules = []
if cythonize is not None and os.environ.get("SFPE_PURE_PYTHON") != "1":
    ext_modules = cythonize(
        [
            Extension(
                "sfpe._kernels",
                ["src/sfpe/_kernels.pyx"],
                include_dirs=[np.get_include(), "src/sfpe"],
                depends=["src/sfpe/_core.h"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=compile_args,
                extra_link_args=link_args,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
