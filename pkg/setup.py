import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

define_macros = [("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")]

ext_modules = [
    Extension(
        "segaware._ckernels",
        ["src/segaware/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=define_macros,
        extra_compile_args=["-O3", "-ffp-contract=off"],
    ),
]

setup(ext_modules=cythonize(ext_modules, language_level=3))
