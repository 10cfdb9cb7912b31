"""Iterative radix-2 FFT with cached bit-reversal and twiddle tables.

Every transform works on the last axis and treats leading axes as
independent lanes. Sizes must be powers of two.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

_BLOCK_ELEMS = 1 << 16  # lanes per butterfly pass: about 1 MiB of complex128


def is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def next_pow2(n: int) -> int:
    return 1 if n <= 1 else 1 << (int(n) - 1).bit_length()


@lru_cache(maxsize=None)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n, dtype=np.intp)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.setflags(write=False)
    return rev


@lru_cache(maxsize=None)
def _twiddles(n: int, ctype: str) -> tuple[np.ndarray, ...]:
    # stage with half-width h uses exp(-2*pi*i*j/(2h)), j < h; built in f64
    out = []
    h = 1
    while h < n:
        w = np.exp(-2j * np.pi * np.arange(h) / (2 * h)).astype(ctype)
        w.setflags(write=False)
        out.append(w)
        h *= 2
    return tuple(out)


@lru_cache(maxsize=None)
def _rfft_twiddles(m: int, ctype: str) -> np.ndarray:
    w = np.exp(-2j * np.pi * np.arange(m // 2 + 1) / m).astype(ctype)
    w.setflags(write=False)
    return w


def _complex_dtype(x: np.ndarray):
    return np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128


def _butterflies(y: np.ndarray, tw) -> None:
    rows, n = y.shape
    h = 1
    stage = 0
    while h < n:
        v = y.reshape(rows, n // (2 * h), 2, h)
        a = v[:, :, 0, :]
        b = v[:, :, 1, :]
        t = b.copy() if h == 1 else b * tw[stage]
        np.subtract(a, t, out=b)
        np.add(a, t, out=a)
        h *= 2
        stage += 1


def fft(x, inverse: bool = False) -> np.ndarray:
    """DFT along the last axis (unnormalised forward, 1/n-scaled inverse)."""
    x = np.asarray(x)
    n = x.shape[-1]
    if not is_pow2(n):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {n}")
    ctype = _complex_dtype(x)
    lead = x.shape[:-1]
    y = np.take(x.reshape(-1, n), _bitrev(n), axis=1).astype(ctype, copy=False)
    if inverse:
        np.conjugate(y, out=y)
    tw = _twiddles(n, np.dtype(ctype).name)
    # all stages run on a cache-sized block of lanes before moving on
    block = max(1, _BLOCK_ELEMS // n)
    for r0 in range(0, y.shape[0], block):
        _butterflies(y[r0 : r0 + block], tw)
    if inverse:
        np.conjugate(y, out=y)
        y *= 1.0 / n
    return y.reshape(*lead, n)


def ifft(x) -> np.ndarray:
    return fft(x, inverse=True)


def rfft(x, m: int | None = None) -> np.ndarray:
    """Spectrum bins 0..m/2 of a real signal zero-padded (or cut) to length m.

    Packs even/odd samples into one complex transform of half the size.
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    m = x.shape[-1] if m is None else int(m)
    if not is_pow2(m):
        raise ValueError(f"transform size must be a power of two, got {m}")
    ctype = _complex_dtype(x)
    if x.shape[-1] != m:
        pad = np.zeros(x.shape[:-1] + (m,), dtype=x.dtype)
        k = min(m, x.shape[-1])
        pad[..., :k] = x[..., :k]
        x = pad
    if m == 1:
        return x.astype(ctype)
    h = m // 2
    z = np.empty(x.shape[:-1] + (h,), dtype=ctype)
    z.real = x[..., 0::2]
    z.imag = x[..., 1::2]
    Z = fft(z)
    Zk = np.concatenate([Z, Z[..., :1]], axis=-1)
    Zr = np.conj(Zk[..., ::-1])
    even = 0.5 * (Zk + Zr)
    odd = -0.5j * (Zk - Zr)
    return even + _rfft_twiddles(m, np.dtype(ctype).name) * odd


def irfft(X, m: int) -> np.ndarray:
    """Inverse of :func:`rfft` for a length-m real signal."""
    X = np.asarray(X)
    m = int(m)
    if X.shape[-1] != m // 2 + 1:
        raise ValueError(f"expected {m // 2 + 1} bins for size {m}, got {X.shape[-1]}")
    rtype = np.float32 if X.dtype == np.complex64 else np.float64
    if m == 1:
        return X.real.astype(rtype)
    h = m // 2
    Xk = X[..., :h]
    Xr = np.conj(X[..., :0:-1])
    even = 0.5 * (Xk + Xr)
    odd = 0.5 * (Xk - Xr) * np.conj(_rfft_twiddles(m, np.dtype(X.dtype).name)[:h])
    z = ifft(even + 1j * odd)
    out = np.empty(X.shape[:-1] + (m,), dtype=rtype)
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out
