"""Build script for the optional compiled FFT kernel.

The package works without the extension: ``fedsynth.fourier`` falls back to a
pure-Python kernel at import time when ``fedsynth.fourier._fftc`` is missing.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "fedsynth.fourier._fftc",
                ["src/fedsynth/fourier/_fftc.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level="3",
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
