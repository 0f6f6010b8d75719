"""Discrete Fourier transforms: iterative radix-2 with Bluestein for other lengths.

Transforms run along one axis and are vectorised over all the others, so a
3D transform is three batched 1D passes. Conventions match the usual
unnormalised forward / 1/n inverse pair.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@lru_cache(maxsize=64)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=64)
def _twiddles(size: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(size // 2) / size)


def _fft_pow2(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    lead = x.shape[:-1]
    a = x[..., _bitrev(n)]
    size = 2
    while size <= n:
        half = size // 2
        blocks = a.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(size)
        a = np.concatenate((even + odd, even - odd), axis=-1).reshape(lead + (n,))
        size *= 2
    return a


@lru_cache(maxsize=64)
def _chirp(n: int):
    k = np.arange(n, dtype=np.int64)
    # k^2 mod 2n keeps the phase argument small for long transforms
    w = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    m = 1 << (2 * n - 1).bit_length()
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(w)
    if n > 1:
        b[m - n + 1:] = np.conj(w[1:])[::-1]
    return w, m, _fft_pow2(b)


def _fft_bluestein(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    w, m, fb = _chirp(n)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * w
    conv = ifft(_fft_pow2(a) * fb)
    return conv[..., :n] * w


def fft(x, axis: int = -1) -> np.ndarray:
    x = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("cannot transform an empty axis")
    if n == 1:
        out = x.copy()
    elif _is_pow2(n):
        out = _fft_pow2(x)
    else:
        out = _fft_bluestein(x)
    return np.moveaxis(out, -1, axis)


def ifft(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[axis]
    return np.conj(fft(np.conj(x), axis)) / n


def fftn(x) -> np.ndarray:
    out = np.asarray(x, dtype=np.complex128)
    for ax in range(out.ndim):
        out = fft(out, ax)
    return out


def ifftn(x) -> np.ndarray:
    out = np.asarray(x, dtype=np.complex128)
    for ax in range(out.ndim):
        out = ifft(out, ax)
    return out
