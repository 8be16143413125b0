import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ModuleNotFoundError:
    cythonize = None

if cythonize is not None:
    extensions = cythonize(
        [
            Extension(
                "ltnn._kernels",
                ["src/ltnn/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
else:
    # No Cython available: install pure-python; ltnn.kernels falls back to numpy.
    extensions = []

setup(ext_modules=extensions)
