# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled radix-2 FFT kernel: iterative Cooley-Tukey, rows then columns.

Mirrors _fftpy exactly (same butterfly order, same twiddle computation) so
the two kernels agree to floating-point noise and can be swapped freely.
"""

from libc.math cimport cos, sin

import numpy as np

cdef double TWO_PI = 6.283185307179586476925287


cdef void _fft1d(double complex* buf, Py_ssize_t n, double sign) noexcept nogil:
    cdef Py_ssize_t i, j, bit, half, m, base, a, b
    cdef double step, ang
    cdef double complex w, u, v
    j = 0
    for i in range(1, n):
        bit = n >> 1
        while j & bit:
            j ^= bit
            bit >>= 1
        j |= bit
        if i < j:
            u = buf[i]
            buf[i] = buf[j]
            buf[j] = u
    m = 2
    while m <= n:
        half = m >> 1
        step = sign * TWO_PI / m
        for i in range(half):
            ang = step * i
            w = cos(ang) + 1j * sin(ang)
            base = 0
            while base < n:
                a = base + i
                b = a + half
                u = buf[a]
                v = buf[b] * w
                buf[a] = u + v
                buf[b] = u - v
                base += m
        m <<= 1


def fft2d(field, bint inverse=False):
    """2-D radix-2 FFT of a (H, W) array; returns a new complex128 array."""
    arr = np.array(field, dtype=np.complex128, order="C")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D field, got shape {arr.shape}")
    cdef Py_ssize_t h = arr.shape[0], w = arr.shape[1]
    if h == 0 or w == 0 or (h & (h - 1)) or (w & (w - 1)):
        raise ValueError(f"sides must be powers of two, got {h}x{w}")
    cdef double complex[:, ::1] a = arr
    cdef double sign = 1.0 if inverse else -1.0
    cdef double norm = <double>(h * w)
    scratch_np = np.empty(h, dtype=np.complex128)
    cdef double complex[::1] scratch = scratch_np
    cdef Py_ssize_t r, c
    with nogil:
        for r in range(h):
            _fft1d(&a[r, 0], w, sign)
        for c in range(w):
            for r in range(h):
                scratch[r] = a[r, c]
            _fft1d(&scratch[0], h, sign)
            for r in range(h):
                a[r, c] = scratch[r]
        if inverse:
            for r in range(h):
                for c in range(w):
                    a[r, c] = a[r, c] / norm
    return arr
