"""FFT, periodic Daubechies DWT, and a direct circular convolution.

All transforms act on the last axis (or the last two axes for the 2-D
variants) and broadcast over any leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cache
from math import comb

import numpy as np

from .exceptions import (
    DimensionMismatch,
    InconsistentPyramid,
    NonPowerOfTwoLength,
    TooManyLevels,
)

WAVELET_FAMILIES = ("haar", "db1", "db2", "db3", "db4", "db5", "db6")
DEFAULT_WAVELET = "db4"


def is_power_of_two(n):
    return n >= 1 and (n & (n - 1)) == 0


# -- FFT -------------------------------------------------------------------------


def fft(x, inverse=False, axis=-1):
    """Complex FFT along ``axis`` for power-of-two lengths.

    The inverse carries the ``1/n`` normalization. Backed by numpy's
    pocketfft; :func:`dft_naive` is the independent reference.
    """
    x = np.asarray(x)
    n = x.shape[axis]
    if not is_power_of_two(n):
        raise NonPowerOfTwoLength(f"FFT length {n} is not a power of two")
    return np.fft.ifft(x, axis=axis) if inverse else np.fft.fft(x, axis=axis)


def ifft(x, axis=-1):
    return fft(x, inverse=True, axis=axis)


def fft2(x, inverse=False):
    """Separable 2-D FFT over the last two axes."""
    return fft(fft(x, inverse, axis=-1), inverse, axis=-2)


def dft_naive(x, inverse=False):
    """O(n^2) direct DFT along the last axis; reference for :func:`fft`."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    W = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
    y = x @ W.T
    return y / n if inverse else y


def circular_convolve(x, h):
    """``y[t] = sum_tau h[tau] x[(t - tau) mod n]`` by direct summation."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if x.shape[-1] != h.shape[-1]:
        raise DimensionMismatch(f"lengths differ: {x.shape[-1]} vs {h.shape[-1]}")
    n = x.shape[-1]
    idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    return np.einsum("...tk,...k->...t", x[..., idx], h)


# -- wavelet filters -----------------------------------------------------------------


def _order(family):
    family = family.lower()
    if family == "haar":
        return 1
    if family.startswith("db") and family[2:].isdigit():
        k = int(family[2:])
        if 1 <= k <= 6:
            return k
    raise ValueError(f"unsupported wavelet family {family!r}; choose from {WAVELET_FAMILIES}")


@cache
def _lowpass(order):
    if order == 1:
        return np.array([1.0, 1.0]) / np.sqrt(2.0)
    # spectral factorization of the Daubechies half-band polynomial
    p = [comb(order - 1 + k, k) for k in range(order)]
    y_roots = np.roots(p[::-1])
    z_roots = []
    for y in y_roots:
        pair = np.roots([1.0, -(2.0 - 4.0 * y), 1.0])
        z_roots.append(pair[np.argmin(np.abs(pair))])
    roots = np.concatenate([-np.ones(order), np.array(z_roots)])
    h = np.real(np.poly(roots))[::-1]
    h = h * (np.sqrt(2.0) / h.sum())
    # polish orthonormality lost to root-finding round-off
    return _polish(h)


def _polish(h, iters=3):
    """Newton refinement of the orthonormality conditions sum h_n h_{n+2k} = delta_k."""
    F = len(h)
    half = F // 2
    for _ in range(iters):
        res, rows = [], []
        for k in range(half):
            res.append(np.dot(h[: F - 2 * k], h[2 * k :]) - (1.0 if k == 0 else 0.0))
            row = np.zeros(F)
            row[: F - 2 * k] += h[2 * k :]
            row[2 * k :] += h[: F - 2 * k]
            rows.append(row)
        res.append(h.sum() - np.sqrt(2.0))
        rows.append(np.ones(F))
        J = np.array(rows)
        step = np.linalg.lstsq(J, np.array(res), rcond=None)[0]
        h = h - step
    return h


def wavelet_filters(family=DEFAULT_WAVELET):
    """Orthonormal analysis filters ``(lowpass, highpass)`` for ``family``.

    The highpass is the quadrature mirror ``g[n] = (-1)^n h[F-1-n]``.
    """
    h = _lowpass(_order(family)).copy()
    g = h[::-1] * (-1.0) ** np.arange(len(h))
    return h, g


def filter_length(family):
    return 2 * _order(family)


def max_levels(n, family):
    """Deepest decomposition such that every level's input has length >= filter."""
    F = filter_length(family)
    J = 0
    while n % 2 == 0 and n >= F and n >= 2:
        J += 1
        n //= 2
    return J


# -- 1-D DWT -------------------------------------------------------------------------


@dataclass
class WaveletPyramid:
    """Periodic DWT coefficients; ``details`` run coarse to fine."""

    approx: np.ndarray
    details: list = field(default_factory=list)
    family: str = DEFAULT_WAVELET
    original_length: int = 0

    @property
    def levels(self):
        return len(self.details)

    def subbands(self):
        """Approximation followed by details, coarse to fine."""
        return [self.approx, *self.details]


def analysis_step(x, h, g):
    """One periodic analysis stage along the last axis.

    ``a[k] = sum_t h[t] x[(2k + t) mod L]`` and likewise ``d`` with ``g``.
    """
    F = len(h)
    S = F // 2 - 1
    half = x.shape[-1] // 2
    even, odd = x[..., 0::2], x[..., 1::2]
    if S:
        even = np.concatenate([even, even[..., :S]], axis=-1)
        odd = np.concatenate([odd, odd[..., :S]], axis=-1)
    a = np.zeros(x.shape[:-1] + (half,))
    d = np.zeros_like(a)
    for j in range(S + 1):
        e, o = even[..., j : j + half], odd[..., j : j + half]
        a += h[2 * j] * e + h[2 * j + 1] * o
        d += g[2 * j] * e + g[2 * j + 1] * o
    return a, d


def synthesis_step(a, d, h, g):
    """Transpose of :func:`analysis_step`; its inverse for orthonormal filters."""
    F = len(h)
    S = F // 2 - 1
    half = a.shape[-1]
    if S:
        a = np.concatenate([a[..., -S:], a], axis=-1)
        d = np.concatenate([d[..., -S:], d], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * half,))
    even = np.zeros(a.shape[:-1] + (half,))
    odd = np.zeros_like(even)
    for j in range(S + 1):
        sa, sd = a[..., S - j : S - j + half], d[..., S - j : S - j + half]
        even += h[2 * j] * sa + g[2 * j] * sd
        odd += h[2 * j + 1] * sa + g[2 * j + 1] * sd
    out[..., 0::2] = even
    out[..., 1::2] = odd
    return out


def _check_levels(n, family, levels):
    if levels < 1:
        raise TooManyLevels("need at least one decomposition level")
    F = filter_length(family)
    m = n
    for j in range(levels):
        if m % 2 or m < F:
            raise TooManyLevels(
                f"level {j + 1} input length {m} is odd or shorter than filter length {F}"
            )
        m //= 2


def dwt_forward(x, family=DEFAULT_WAVELET, levels=1):
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    _check_levels(n, family, levels)
    h, g = wavelet_filters(family)
    details = []
    a = x
    for _ in range(levels):
        a, d = analysis_step(a, h, g)
        details.append(d)
    return WaveletPyramid(a, details[::-1], family, n)


def dwt_inverse(p):
    h, g = wavelet_filters(p.family)
    a = np.asarray(p.approx, dtype=np.float64)
    for d in p.details:
        d = np.asarray(d, dtype=np.float64)
        if d.shape[-1] != a.shape[-1]:
            raise InconsistentPyramid(
                f"detail length {d.shape[-1]} does not match approximation length {a.shape[-1]}"
            )
        a = synthesis_step(a, d, h, g)
    if p.original_length and a.shape[-1] != p.original_length:
        raise InconsistentPyramid(
            f"reconstructed length {a.shape[-1]} != recorded {p.original_length}"
        )
    return a


def subband_lengths(n, levels):
    """Lengths of the approximation and detail subbands, coarse to fine."""
    return [n >> levels] + [n >> (levels - j) for j in range(levels)]


# -- 2-D DWT -------------------------------------------------------------------------


@dataclass
class WaveletPyramid2D:
    """Separable periodic 2-D DWT; each detail level is ``(LH, HL, HH)``."""

    approx: np.ndarray
    details: list = field(default_factory=list)
    family: str = DEFAULT_WAVELET
    original_shape: tuple = ()

    @property
    def levels(self):
        return len(self.details)


def dwt2_forward(x, family=DEFAULT_WAVELET, levels=1):
    x = np.asarray(x, dtype=np.float64)
    n0, n1 = x.shape[-2:]
    _check_levels(n0, family, levels)
    _check_levels(n1, family, levels)
    h, g = wavelet_filters(family)
    details = []
    a = x
    for _ in range(levels):
        lo, hi = analysis_step(a, h, g)
        lo = np.swapaxes(lo, -1, -2)
        hi = np.swapaxes(hi, -1, -2)
        ll, lh = analysis_step(lo, h, g)
        hl, hh = analysis_step(hi, h, g)
        a = np.swapaxes(ll, -1, -2)
        details.append(tuple(np.swapaxes(c, -1, -2) for c in (lh, hl, hh)))
    return WaveletPyramid2D(a, details[::-1], family, (n0, n1))


def dwt2_inverse(p):
    h, g = wavelet_filters(p.family)
    a = np.asarray(p.approx, dtype=np.float64)
    for lh, hl, hh in p.details:
        if lh.shape[-2:] != a.shape[-2:]:
            raise InconsistentPyramid("detail subband shape does not match approximation")
        lo = synthesis_step(np.swapaxes(a, -1, -2), np.swapaxes(lh, -1, -2), h, g)
        hi = synthesis_step(np.swapaxes(hl, -1, -2), np.swapaxes(hh, -1, -2), h, g)
        a = synthesis_step(np.swapaxes(lo, -1, -2), np.swapaxes(hi, -1, -2), h, g)
    if p.original_shape and a.shape[-2:] != tuple(p.original_shape):
        raise InconsistentPyramid("reconstructed shape does not match recorded shape")
    return a
