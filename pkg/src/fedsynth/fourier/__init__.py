"""Fourier-domain amplitude perturbation with a swappable FFT kernel.

The hot 2-D FFT runs in a compiled Cython core when available and falls back
to a pure-Python kernel otherwise; both implement the identical radix-2
algorithm. ``KERNEL_COMPILED`` records which one was selected at import.
"""

try:
    from . import _fftc as _kernel

    KERNEL_COMPILED = True
except ImportError:  # pragma: no cover - depends on build environment
    import warnings

    from . import _fftpy as _kernel

    KERNEL_COMPILED = False
    warnings.warn(
        "compiled FFT kernel unavailable; using the pure-Python fallback",
        RuntimeWarning,
        stacklevel=2,
    )

fft2d_kernel = _kernel.fft2d


def kernel_name() -> str:
    return "compiled" if KERNEL_COMPILED else "pure-python"


from .ops import (  # noqa: E402
    PerturbConfig,
    Spectrum,
    amplitude_of,
    fft2,
    fourier_perturb,
    ifft2,
    ifft2_full,
    perturb_amplitude,
)

__all__ = [
    "KERNEL_COMPILED",
    "PerturbConfig",
    "Spectrum",
    "amplitude_of",
    "fft2",
    "fft2d_kernel",
    "fourier_perturb",
    "ifft2",
    "ifft2_full",
    "kernel_name",
    "perturb_amplitude",
]
