import os

from setuptools import Extension, setup

# The compiled kernels are optional: without cython (or with
# STUNMOE_NO_EXTENSION=1) the package falls back to the numpy backend at
# import time.  -ffp-contract=off keeps the C loops from being fused into
# FMAs, which would break bit-agreement with the fallback's reduction order.
ext_modules = []
if os.environ.get("STUNMOE_NO_EXTENSION") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "stunmoe._ckernels",
                    ["src/stunmoe/_ckernels.pyx"],
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "initializedcheck": False,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
