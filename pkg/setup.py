import os

import numpy as np
from setuptools import Extension, setup

# Set IBO_EVAL_NO_EXT=1 to install without compiling; the package then uses
# the pure-Python kernels.
ext_modules = []
if not os.environ.get("IBO_EVAL_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "ibo_eval._kernels",
                ["src/ibo_eval/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
