import numpy as np
from setuptools import Extension, setup

# The compiled kernel is optional: without Cython (or a compiler) the package
# falls back to the pure-numpy twin in ftensemble._kernels_py.
try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "ftensemble._kernels",
                ["src/ftensemble/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # -ffp-contract=off keeps the compiled rotations bit-identical
                # to the numpy fallback (no FMA fusion).
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
