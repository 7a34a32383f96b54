import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("DPCOMPRESS_NO_EXT", "") in ("", "0"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "dpcompress._kernels",
                    ["src/dpcompress/_kernels.pyx"],
                    # no -ffast-math: reductions must keep IEEE order for reproducibility
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
