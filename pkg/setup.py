"""Build glue for the optional compiled kernels.

The package is pure Python except for exac._kernels._ckernels, a small
Cython extension covering the byte-chunking and trajectory codec hot
loops.  If Cython or a C compiler is unavailable the build degrades to
the pure-Python fallback in exac._kernels._pykernels; nothing else
changes.
"""

import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """build_ext that downgrades compiler failures to a warning."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001 - any build failure is non-fatal
            warnings.warn(f"compiled kernels skipped ({exc}); using pure-Python fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            warnings.warn(f"compiled kernels skipped ({exc}); using pure-Python fallback")


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "exac._kernels._ckernels",
        sources=["src/exac/_kernels/_ckernels.pyx"],
        # -O2 without fast-math: the pure and compiled codecs must round
        # identically, so no reassociation or FMA contraction is allowed.
        extra_compile_args=["-O2", "-ffp-contract=off"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
