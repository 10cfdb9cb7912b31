import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drfnet import fft


def naive_dft(x, inverse=False):
    n = x.shape[-1]
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    # reduce k*k mod n in integers so the oracle's phases stay exact
    W = np.exp(sign * 2j * np.pi * (np.outer(k, k) % n) / n)
    out = x @ W.T
    return out / n if inverse else out


@pytest.mark.parametrize("n", [1, 2, 4, 8, 16, 64, 256, 1024, 4096])
def test_fft_matches_naive_dft(n):
    rng = np.random.default_rng(n)
    x = rng.normal(size=(3, n)) + 1j * rng.normal(size=(3, n))
    assert np.max(np.abs(fft.fft(x) - naive_dft(x))) < 1e-10


@pytest.mark.parametrize("n", [2, 8, 512, 4096])
def test_inverse_matches_naive_and_round_trips(n):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(2, n)) + 1j * rng.normal(size=(2, n))
    assert np.max(np.abs(fft.ifft(X) - naive_dft(X, inverse=True))) < 1e-10
    assert np.max(np.abs(fft.fft(fft.ifft(X)) - X)) < 1e-10


@pytest.mark.parametrize("m", [2, 4, 16, 1024, 4096])
def test_rfft_and_irfft(m):
    rng = np.random.default_rng(m)
    x = rng.normal(size=(4, m))
    X = fft.rfft(x, m)
    assert X.shape == (4, m // 2 + 1)
    assert np.max(np.abs(X - naive_dft(x)[:, : m // 2 + 1])) < 1e-10
    assert np.max(np.abs(fft.irfft(X, m) - x)) < 1e-12


def test_rfft_zero_pads_short_input():
    x = np.arange(5.0)
    X = fft.rfft(x, 16)
    padded = np.zeros(16)
    padded[:5] = x
    assert np.max(np.abs(X - naive_dft(padded)[:9])) < 1e-12


def test_non_power_of_two_rejected():
    with pytest.raises(ValueError):
        fft.fft(np.ones(12, dtype=complex))


def test_next_pow2():
    assert [fft.next_pow2(v) for v in (1, 2, 3, 5, 1023, 1024, 1025)] == [1, 2, 4, 8, 1024, 1024, 2048]
    assert fft.is_pow2(4096) and not fft.is_pow2(0) and not fft.is_pow2(6)


def test_twiddle_tables_are_shared_and_readonly():
    a = fft._twiddles(1024, "complex128")
    b = fft._twiddles(1024, "complex128")
    assert a is b
    assert len(a) == 10
    assert all(not w.flags.writeable for w in a)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 8), st.integers(0, 2**32 - 1))
def test_linearity_property(log_n, seed):
    n = 2**log_n
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, n)) + 1j * rng.normal(size=(2, n))
    a, b = rng.normal(size=2)
    lhs = fft.fft(a * x + b * y)
    rhs = a * fft.fft(x) + b * fft.fft(y)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * max(1.0, np.max(np.abs(rhs)))


def test_parseval():
    rng = np.random.default_rng(7)
    x = rng.normal(size=2048) + 1j * rng.normal(size=2048)
    X = fft.fft(x)
    assert np.isclose(np.sum(np.abs(x) ** 2), np.sum(np.abs(X) ** 2) / 2048, rtol=1e-12)


def test_single_precision_path():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 1024)).astype(np.float32)
    X = fft.rfft(x, 1024)
    assert X.dtype == np.complex64
    assert np.max(np.abs(fft.irfft(X, 1024) - x)) < 1e-4
