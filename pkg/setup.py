import os

from setuptools import Extension, setup

# The compiled scan kernels are an optimization, not a requirement: the
# package falls back to the pure-Python implementation when the extension
# is absent.  Set BAGBID_SKIP_EXT=1 to skip compilation entirely.
ext_modules = []
if not os.environ.get("BAGBID_SKIP_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "bagbid._kernels._scan",
                    ["src/bagbid/_kernels/_scan.pyx"],
                    # Keep IEEE semantics so the compiled kernels are
                    # bit-identical to the pure-Python fallback.
                    extra_compile_args=["-O2", "-ffp-contract=off"],
                )
            ],
            language_level=3,
        )

setup(ext_modules=ext_modules)
