"""Build the optional compiled transport kernel.

If Cython or a C compiler is unavailable the package still installs and runs
on the pure-Python kernel.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("SAIMC_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "saimc._core",
                    ["src/saimc/_core.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # no fast-math and no FMA contraction: the compiled kernel must
                    # round exactly like the pure-Python one
                    extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math", "-fno-builtin-sin", "-fno-builtin-cos"],
                    optional=True,
                )
            ],
            compiler_directives={"language_level": 3},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
