"""Dense and banded linear algebra used by the kernel and variational code.

Dense matrices are plain row-major ``float64`` arrays. Banded lower matrices
use a compact ``(n, b + 1)`` layout where ``band[i, k]`` holds entry
``(i, i - k)``; entries with ``i - k < 0`` are stored as zero.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.linalg
import scipy.sparse

from .exceptions import DimensionMismatch, NotPositiveDefinite

logger = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-6
MAX_JITTER = 1e-2


def _as_square(A):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {A.shape}")
    return A


def cholesky(A, jitter=0.0):
    """Lower Cholesky factor of ``A + jitter * I``.

    Raises NotPositiveDefinite when a pivot is non-positive.
    """
    A = _as_square(A)
    scale = max(np.max(np.abs(A)), 1.0)
    if np.max(np.abs(A - A.T)) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    if jitter:
        A = A + jitter * np.eye(A.shape[0])
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None


def jitter_schedule(mean_diag, jitter=DEFAULT_JITTER, max_jitter=MAX_JITTER):
    """Absolute jitter values tried in order: ``jitter`` then x10 steps up to ``max_jitter``.

    Both bounds are relative to ``mean_diag``.
    """
    levels = [jitter]
    j = max(jitter, DEFAULT_JITTER) * 10 if jitter else DEFAULT_JITTER
    while j <= max_jitter * (1 + 1e-12):
        levels.append(j)
        j *= 10
    return [lvl * mean_diag for lvl in levels]


def robust_cholesky(A, jitter=DEFAULT_JITTER, max_jitter=MAX_JITTER):
    """Cholesky with escalating diagonal jitter.

    Returns ``(L, absolute_jitter)``.
    """
    A = _as_square(A)
    mean_diag = float(np.mean(np.diag(A))) or 1.0
    last = None
    for i, jit in enumerate(jitter_schedule(abs(mean_diag), jitter, max_jitter)):
        try:
            L = cholesky(A, jit)
        except NotPositiveDefinite as exc:
            last = exc
            continue
        if i > 0:
            logger.info("cholesky needed escalated jitter %.3g", jit)
        return L, jit
    raise NotPositiveDefinite(f"not positive definite after jitter {max_jitter:g}: {last}")


def tri_solve(L, b, transposed=False):
    """Solve ``L x = b`` (or ``L^T x = b``) for lower-triangular ``L``."""
    L = _as_square(L)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != L.shape[0]:
        raise DimensionMismatch(f"rhs has {b.shape[0]} rows, factor has {L.shape[0]}")
    if np.any(np.diag(L) == 0):
        raise np.linalg.LinAlgError("singular triangular factor")
    return scipy.linalg.solve_triangular(L, b, lower=True, trans=1 if transposed else 0)


def _apply(B, V):
    """``V @ B.T`` for dense or scipy-sparse ``B``."""
    if scipy.sparse.issparse(B):
        return (B @ V.T).T
    return V @ np.asarray(B).T


def kron_matvec(A, B, v):
    """``(A kron B) v`` without forming the Kronecker product.

    With row-major vectorization ``v = vec(V)``, ``V`` of shape ``(n, m)``,
    the product is ``vec(A V B^T)``.
    """
    A = np.asarray(A, dtype=np.float64)
    n, m = A.shape[0], B.shape[0]
    v = np.asarray(v, dtype=np.float64)
    if A.shape[1] != n or B.shape[1] != m:
        raise DimensionMismatch("kron_matvec needs square factors")
    if v.shape[0] != n * m:
        raise DimensionMismatch(f"vector length {v.shape[0]} != {n} * {m}")
    V = v.reshape(n, m)
    return (A @ _apply(B, V)).reshape(-1)


def kron_solve(La, Lb, v):
    """Solve ``(La La^T kron Lb Lb^T) x = v`` given both Cholesky factors.

    ``Lb`` may be a dense lower factor or a banded one (2-D array with fewer
    columns than rows is *not* inferred; pass a :class:`BandedFactor`).
    """
    n = La.shape[0]
    m = Lb.shape[0]
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != n * m:
        raise DimensionMismatch(f"vector length {v.shape[0]} != {n} * {m}")
    V = v.reshape(n, m)
    # A^{-1} V B^{-T}: left solve on rows, right solve on columns
    X = scipy.linalg.cho_solve((La, True), V)
    if isinstance(Lb, BandedFactor):
        X = Lb.solve(X.T).T
    else:
        X = scipy.linalg.cho_solve((Lb, True), X.T).T
    return X.reshape(-1)


# -- banded lower storage ----------------------------------------------------


def band_from_dense(A, b):
    """Lower band of ``A`` with half-bandwidth ``b`` in compact storage."""
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    out = np.zeros((n, b + 1))
    for k in range(min(b, n - 1) + 1):
        out[k:, k] = np.diagonal(A, -k)
    return out


def band_to_dense(band, symmetric=False):
    n, w = band.shape
    A = np.zeros((n, n))
    for k in range(min(w - 1, n - 1) + 1):
        idx = np.arange(k, n)
        A[idx, idx - k] = band[k:, k]
        if symmetric and k:
            A[idx - k, idx] = band[k:, k]
    return A


def band_matvec(band, x, transpose=False):
    """``L x`` (or ``L^T x``) along the last axis of ``x`` for banded lower ``L``."""
    n, w = band.shape
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != n:
        raise DimensionMismatch(f"vector length {x.shape[-1]} != {n}")
    y = np.zeros(np.broadcast_shapes(x.shape, (n,)))
    for k in range(min(w - 1, n - 1) + 1):
        if transpose:
            y[..., : n - k] += band[k:, k] * x[..., k:]
        else:
            y[..., k:] += band[k:, k] * x[..., : n - k]
    return y


def band_cholesky(band):
    """Banded Cholesky in compact storage; raises NotPositiveDefinite."""
    n, w = band.shape
    ab = np.zeros((w, n))
    for k in range(w):
        ab[k, : n - k] = band[k:, k]
    try:
        lab = scipy.linalg.cholesky_banded(ab, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    out = np.zeros_like(band)
    for k in range(w):
        out[k:, k] = lab[k, : n - k]
    return out


def band_cholesky_vjp(L, Lbar):
    """Reverse-mode derivative of :func:`band_cholesky`.

    Given the factor ``L`` and the cotangent ``Lbar`` (both banded), returns
    the cotangent of the lower band of the input. The input is read only on
    its lower band, so a symmetric entry's gradient is its lower entry.
    Cost is O(n b^2).
    """
    n, w = L.shape
    b = w - 1
    Lbar = Lbar.copy()
    Abar = np.zeros_like(L)
    for i in range(n - 1, -1, -1):
        lo = max(0, i - b)
        p = i - lo  # window width
        lii = L[i, 0]
        sbar = Lbar[i, 0] / (2.0 * lii)
        Abar[i, 0] += sbar
        if p == 0:
            continue
        # row i of L restricted to the window, in column order lo..i-1
        r = L[i, p:0:-1]
        rbar = Lbar[i, p:0:-1] - 2.0 * sbar * r
        W = _window(L, lo, i)
        abar = scipy.linalg.solve_triangular(W, rbar, lower=True, trans=1)
        Abar[i, p:0:-1] += abar
        # gL_window -= tril(abar r^T)
        G = np.tril(np.outer(abar, r))
        _scatter_window(Lbar, lo, i, -G)
    return Abar


def _window(band, lo, hi):
    """Dense lower block ``L[lo:hi, lo:hi]`` from compact storage."""
    p = hi - lo
    W = np.zeros((p, p))
    for k in range(min(p, band.shape[1])):
        idx = np.arange(k, p)
        W[idx, idx - k] = band[lo + k : hi, k]
    return W


def _scatter_window(band, lo, hi, G):
    p = hi - lo
    for k in range(min(p, band.shape[1])):
        idx = np.arange(k, p)
        band[lo + k : hi, k] += G[idx, idx - k]


class BandedFactor:
    """Cholesky factor of a symmetric banded matrix, compact lower storage."""

    def __init__(self, band):
        self.band = np.asarray(band, dtype=np.float64)

    @classmethod
    def factor(cls, band):
        return cls(band_cholesky(band))

    @property
    def shape(self):
        n = self.band.shape[0]
        return (n, n)

    @property
    def bandwidth(self):
        return self.band.shape[1] - 1

    def matvec(self, x, transpose=False):
        return band_matvec(self.band, x, transpose)

    def solve(self, B):
        """Solve ``(L L^T) X = B`` column-wise."""
        n, w = self.band.shape
        ab = np.zeros((w, n))
        for k in range(w):
            ab[k, : n - k] = self.band[k:, k]
        return scipy.linalg.cho_solve_banded((ab, True), B)

    def logdet(self):
        return 2.0 * float(np.sum(np.log(self.band[:, 0])))

    def to_dense(self):
        return band_to_dense(self.band)
