"""Pure-Python radix-2 FFT kernel (fallback when the compiled core is absent).

Same algorithm as the compiled kernel: iterative Cooley-Tukey with bit
reversal, rows then columns, e^{-j2*pi*kn/N} forward kernel, inverse scaled
by 1/(H*W). Numpy appears only at the array boundary.
"""

from __future__ import annotations

import math

import numpy as np


def _fft1d_inplace(buf: list[complex], sign: float) -> None:
    n = len(buf)
    j = 0
    for i in range(1, n):
        bit = n >> 1
        while j & bit:
            j ^= bit
            bit >>= 1
        j |= bit
        if i < j:
            buf[i], buf[j] = buf[j], buf[i]
    m = 2
    while m <= n:
        half = m >> 1
        step = sign * 2.0 * math.pi / m
        for i in range(half):
            ang = step * i
            w = complex(math.cos(ang), math.sin(ang))
            for base in range(0, n, m):
                a = base + i
                b = a + half
                u = buf[a]
                v = buf[b] * w
                buf[a] = u + v
                buf[b] = u - v
        m <<= 1


def fft2d(field: np.ndarray, inverse: bool = False) -> np.ndarray:
    """2-D radix-2 FFT of a (H, W) array; returns a new complex128 array."""
    arr = np.asarray(field, dtype=np.complex128)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D field, got shape {arr.shape}")
    h, w = arr.shape
    if h == 0 or w == 0 or (h & (h - 1)) or (w & (w - 1)):
        raise ValueError(f"sides must be powers of two, got {h}x{w}")
    sign = 1.0 if inverse else -1.0

    rows = [list(arr[r]) for r in range(h)]
    for row in rows:
        _fft1d_inplace(row, sign)
    for c in range(w):
        col = [rows[r][c] for r in range(h)]
        _fft1d_inplace(col, sign)
        for r in range(h):
            rows[r][c] = col[r]
    out = np.array(rows, dtype=np.complex128)
    if inverse:
        out /= h * w
    return out
