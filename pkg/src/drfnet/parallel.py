"""Time-parallel D-RF forward pass.

The branch recurrence is unrolled into a causal convolution with the
resonator kernel and evaluated with zero-padded FFTs; the adaptive threshold
becomes a short causal convolution over pre-spikes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import fft as _fft
from .core import ComplexStateSequence, RealSequence, ShapeError, TimeGrid, _readonly
from .dynamics import DendriticParams, DRFTrace, SomaParams, SpikeTrain

RENORM_EVERY = 1024


@dataclass(frozen=True)
class TransformPlan:
    """Transform size for linear (non-circular) convolution of length-L signals."""

    length: int

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("length must be ≥ 1")

    @property
    def size(self) -> int:
        return _fft.next_pow2(2 * self.length - 1)

    @property
    def bins(self) -> int:
        return self.size // 2 + 1

    def twiddles(self, dtype=np.complex128):
        # shared, read-only tables; the rfft runs a complex transform of size M/2
        half = max(self.size // 2, 1)
        return _fft._twiddles(half, np.dtype(dtype).name)


@dataclass(frozen=True, eq=False)
class ResonatorKernel:
    """Taps K[..., i, k] = gamma_i * exp(k * delta * (-1/tau_i + i*omega_i)).

    ``spectrum_re`` / ``spectrum_im`` cache the transforms of the real and
    imaginary tap planes at the plan's size.
    """

    taps: np.ndarray
    plan: TransformPlan
    spectrum_re: np.ndarray
    spectrum_im: np.ndarray

    @property
    def length(self) -> int:
        return self.taps.shape[-1]


def _split_hi(v: np.ndarray) -> np.ndarray:
    """Leading ~26 bits of v, so that (integer < 2**26) * hi is exact."""
    c = v * 134217729.0  # 2**27 + 1 (Veltkamp split)
    return c - (c - v)


def _anchor_powers(pole: np.ndarray, k: np.ndarray) -> np.ndarray:
    """exp(k * pole) with the phase k*Im(pole) carried in two parts.

    A plain ``k * omega`` loses about k*|omega|*eps radians of phase, which
    is ~1e-11 at k ~ 3e4; splitting omega keeps the product exact.
    """
    k = k.astype(np.float64)
    w = pole.imag[..., None]
    hi = _split_hi(w)
    lo = w - hi
    th_hi = k * hi
    th_lo = k * lo
    cos = np.cos(th_hi) * np.cos(th_lo) - np.sin(th_hi) * np.sin(th_lo)
    sin = np.sin(th_hi) * np.cos(th_lo) + np.cos(th_hi) * np.sin(th_lo)
    return np.exp(k * pole.real[..., None]) * (cos + 1j * sin)


def kernel_taps(p: DendriticParams, grid: TimeGrid, dtype=np.complex128) -> np.ndarray:
    """Kernel taps by repeated multiplication, re-anchored to the closed form
    every ``RENORM_EVERY`` taps so rounding drift stays bounded."""
    L = grid.length
    pole = p.pole(grid.delta)[..., None]
    step = np.exp(pole)
    block = min(L, RENORM_EVERY)
    ramp = np.empty(pole.shape[:-1] + (block,), dtype=np.complex128)
    ramp[..., 0] = 1.0
    if block > 1:
        ramp[..., 1:] = np.cumprod(np.broadcast_to(step, ramp[..., 1:].shape), axis=-1)
    nblocks = -(-L // block)
    anchors = _anchor_powers(pole[..., 0], np.arange(nblocks) * block)
    taps = (anchors[..., :, None] * ramp[..., None, :]).reshape(pole.shape[:-1] + (nblocks * block,))
    taps = taps[..., :L] * p.gamma[..., None]
    return taps.astype(dtype, copy=False)


def build_kernel(p: DendriticParams, grid: TimeGrid, plan: TransformPlan | None = None, dtype=np.float64) -> ResonatorKernel:
    plan = plan or TransformPlan(grid.length)
    if plan.length != grid.length:
        raise ShapeError("plan length differs from the time grid")
    ctype = np.complex64 if dtype == np.float32 else np.complex128
    taps = kernel_taps(p, grid, ctype)
    spec_re = _fft.rfft(np.ascontiguousarray(taps.real), plan.size)
    spec_im = _fft.rfft(np.ascontiguousarray(taps.imag), plan.size)
    return ResonatorKernel(_readonly(taps), plan, _readonly(spec_re), _readonly(spec_im))


def _split_batch(fn, x, threads: int):
    if threads <= 1 or x.shape[0] < 2:
        return fn(x)
    chunks = np.array_split(x, min(threads, x.shape[0]), axis=0)
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(fn, chunks))
    return np.concatenate(parts, axis=0)


def causal_conv_spectra(x_spec: np.ndarray, k_spec: np.ndarray, plan: TransformPlan) -> np.ndarray:
    """Linear convolution from two spectra, truncated to the first L samples."""
    return _fft.irfft(x_spec * k_spec, plan.size)[..., : plan.length]


def causal_corr_spectra(g_spec: np.ndarray, k_spec: np.ndarray, plan: TransformPlan) -> np.ndarray:
    """out[t] = sum_s g[t + s] k[s] for t < L, from the spectra of g and k."""
    return _fft.irfft(g_spec * np.conj(k_spec), plan.size)[..., : plan.length]


def fft_causal_conv(input, kernel: ResonatorKernel, plan: TransformPlan | None = None, threads: int = 1) -> ComplexStateSequence:
    """States Z[b, j, i, t] = sum_{k<=t} K[j, i, k] * input[b, j, t - k]."""
    seq = input if isinstance(input, RealSequence) else RealSequence(input)
    x = seq.values
    plan = plan or kernel.plan
    if x.shape[-1] != plan.length or kernel.length != plan.length:
        raise ShapeError(f"input length {x.shape[-1]}, kernel length {kernel.length}, plan length {plan.length}")
    kr = kernel.spectrum_re
    ki = kernel.spectrum_im
    if kr.ndim == 2:
        kr, ki = kr[None], ki[None]
    if kr.shape[0] not in (1, x.shape[1]):
        raise ShapeError(f"kernel has {kr.shape[0]} neurons, input has {x.shape[1]}")

    def run(xb):
        xs = _fft.rfft(xb, plan.size)[:, :, None, :]
        re_ = causal_conv_spectra(xs, kr, plan)
        im_ = causal_conv_spectra(xs, ki, plan)
        return np.stack([re_, im_])

    out = _split_batch(lambda xb: run(xb).transpose(1, 0, 2, 3, 4), x, threads)
    return ComplexStateSequence(out[:, 0], out[:, 1])


def threshold_from_prespikes(P: np.ndarray, alpha: np.ndarray, v_pre: float) -> np.ndarray:
    """V_th[t] = v_pre + sum_k alpha_k P[t - k], zero-padded on the left."""
    V = np.full(P.shape, v_pre, dtype=P.dtype)
    L = P.shape[-1]
    for k, a in enumerate(np.asarray(alpha, dtype=P.dtype), start=1):
        if k >= L:
            break
        V[..., k:] += a * P[..., : L - k]
    return V


def parallel_threshold(H, s: SomaParams) -> tuple[RealSequence, SpikeTrain]:
    h = H.values if isinstance(H, RealSequence) else np.asarray(H)
    P = (h >= s.v_pre).astype(h.dtype)
    V = threshold_from_prespikes(P, s.alpha, s.v_pre)
    S = (h >= V).astype(h.dtype)
    return RealSequence(V), SpikeTrain(S)


def drf_parallel_forward(input, p: DendriticParams, s: SomaParams, grid: TimeGrid, plan: TransformPlan | None = None, threads: int = 1) -> DRFTrace:
    seq = input if isinstance(input, RealSequence) else RealSequence(input)
    if seq.length != grid.length:
        raise ShapeError(f"input has {seq.length} steps, grid has {grid.length}")
    plan = plan or TransformPlan(grid.length)
    kernel = build_kernel(p, grid, plan, seq.values.dtype)
    states = fft_causal_conv(seq, kernel, plan, threads)
    c = np.broadcast_to(s.c, p.tau.shape)
    if c.ndim == 1:
        c = c[None]
    H = np.einsum("bjil,ji->bjl", states.real, c.astype(states.real.dtype))
    V, S = parallel_threshold(H, s)
    return DRFTrace(states, RealSequence(H), V, S)


class KernelCache:
    """Kernel spectra keyed on a parameter version counter."""

    def __init__(self):
        self._store: dict = {}

    def get(self, key, version: int, build):
        hit = self._store.get(key)
        if hit is not None and hit[0] == version:
            return hit[1]
        value = build()
        self._store[key] = (version, value)
        return value

    def clear(self):
        self._store.clear()
