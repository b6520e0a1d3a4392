"""Radix-2 FFT and the centered magnitude spectrum used by the frequency branch.

Hand-rolled iterative Cooley-Tukey (decimation in time with bit-reversed
input ordering) rather than a library call, so the exact numerics are pinned
down here. Sizes must be powers of two; anything else raises
``UnsupportedSizeError``. All arithmetic runs in complex128 regardless of
the tensor dtype. Nothing in this module is recorded on a gradient tape:
the spectrum is computed once per segment as a fixed input channel.
"""

from __future__ import annotations

import numpy as np

from .errors import UnsupportedSizeError

_rev_cache: dict[int, np.ndarray] = {}


def _bit_reversal(n: int) -> np.ndarray:
    perm = _rev_cache.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        perm = np.zeros(n, dtype=np.intp)
        for i in range(n):
            r = 0
            v = i
            for _ in range(bits):
                r = (r << 1) | (v & 1)
                v >>= 1
            perm[i] = r
        _rev_cache[n] = perm
    return perm


def _check_pow2(n: int, what: str) -> None:
    if n < 1 or (n & (n - 1)) != 0:
        raise UnsupportedSizeError(f"fft: {what} must be a power of two, got {n}")


def fft1d(x: np.ndarray) -> np.ndarray:
    """Forward DFT along the last axis. Length must be a power of two."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    _check_pow2(n, "length")
    if n == 1:
        return x.copy()
    out = x[..., _bit_reversal(n)].copy()
    half = 1
    while half < n:
        step = half * 2
        # twiddles for a butterfly of width `step`
        tw = np.exp(-2j * np.pi * np.arange(half) / step)
        blocks = out.reshape(*out.shape[:-1], n // step, step)
        even = blocks[..., :half].copy()  # copy: the write below would alias it
        odd = blocks[..., half:] * tw
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        half = step
    return out


def fft2d(x: np.ndarray) -> np.ndarray:
    """2-D DFT of the trailing two axes: rows first, then columns."""
    x = np.asarray(x, dtype=np.complex128)
    _check_pow2(x.shape[-1], "width")
    _check_pow2(x.shape[-2], "height")
    rows = fft1d(x)
    return fft1d(rows.swapaxes(-1, -2)).swapaxes(-1, -2)


def magnitude_spectrum(frame: np.ndarray) -> np.ndarray:
    """Centered log-magnitude spectrum of a single [H,W] frame.

    Returns float64 [H,W] with the DC bin shifted to (H//2, W//2) and
    values log(1 + |F|).
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise UnsupportedSizeError(f"magnitude_spectrum: expected 2-D frame, "
                                   f"got {frame.ndim}-D")
    spec = fft2d(frame)
    H, W = frame.shape
    centered = np.roll(np.roll(spec, H // 2, axis=0), W // 2, axis=1)
    return np.log1p(np.abs(centered))
