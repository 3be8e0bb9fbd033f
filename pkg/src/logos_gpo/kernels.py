"""Stationary base kernels, the KNN-sparse spatial kernel, and the feature kernel."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

from . import autodiff as ad
from .exceptions import DimensionMismatch, InvalidNeighborCount, NotPositiveDefinite
from .linalg import BandedFactor, band_from_dense, jitter_schedule, kron_solve, robust_cholesky

KERNEL_FAMILIES = ("rbf", "matern52")
_SQRT5 = np.sqrt(5.0)


@dataclass
class KernelParams:
    """Stationary kernel hyperparameters, stored as logs."""

    family: str = "rbf"
    log_lengthscale: float = 0.0
    log_variance: float = 0.0

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")

    @classmethod
    def create(cls, family="rbf", lengthscale=1.0, variance=1.0):
        if lengthscale <= 0 or variance <= 0:
            raise ValueError("lengthscale and variance must be positive")
        return cls(family, float(np.log(lengthscale)), float(np.log(variance)))

    @property
    def lengthscale(self):
        return float(np.exp(self.log_lengthscale))

    @property
    def variance(self):
        return float(np.exp(self.log_variance))


def _kernel_and_grads(sqdist, lengthscale, variance, family):
    """Kernel values and derivatives w.r.t. squared distance and log-lengthscale."""
    if family == "rbf":
        k = variance * np.exp(-0.5 * sqdist / lengthscale**2)
        dk_ds = -0.5 * k / lengthscale**2
        dk_dlogl = k * sqdist / lengthscale**2
        return k, dk_ds, dk_dlogl
    a = _SQRT5 * np.sqrt(np.maximum(sqdist, 0.0)) / lengthscale
    e = np.exp(-a)
    k = variance * (1.0 + a + a * a / 3.0) * e
    dk_ds = -variance * (1.0 + a) * e * 5.0 / (6.0 * lengthscale**2)
    dk_dlogl = variance * (a * a / 3.0) * (1.0 + a) * e
    return k, dk_ds, dk_dlogl


def stationary_kernel(sqdist, log_lengthscale, log_variance, family="rbf"):
    """Kernel values from squared distances, differentiable in all three inputs."""
    sqdist = ad.as_tensor(sqdist)
    log_l = ad.as_tensor(log_lengthscale)
    log_v = ad.as_tensor(log_variance)
    k, dk_ds, dk_dlogl = _kernel_and_grads(
        sqdist.data, float(np.exp(log_l.data)), float(np.exp(log_v.data)), family
    )

    def vjp(g):
        return g * dk_ds, np.sum(g * dk_dlogl), np.sum(g * k)

    return ad.apply(k, (sqdist, log_l, log_v), vjp)


def base_kernel_eval(xi, xj, p):
    xi = np.atleast_1d(np.asarray(xi, dtype=np.float64))
    xj = np.atleast_1d(np.asarray(xj, dtype=np.float64))
    if xi.shape != xj.shape:
        raise DimensionMismatch("points must have the same dimension")
    s = _pair_sqdist(xi, xj)
    return float(_kernel_and_grads(s, p.lengthscale, p.variance, p.family)[0])


def _pair_sqdist(P, Q):
    return np.sum((P - Q) ** 2, axis=-1)


def sqdist_matrix(A, B):
    """Pairwise squared Euclidean distances between rows (elementwise differences)."""
    A = ad.as_tensor(A)
    B = ad.as_tensor(B)
    if A.shape[-1] != B.shape[-1]:
        raise DimensionMismatch(f"latent dims differ: {A.shape[-1]} vs {B.shape[-1]}")
    diff = ad.reshape(A, (A.shape[0], 1, A.shape[1])) - ad.reshape(B, (1, B.shape[0], B.shape[1]))
    return ad.tsum(ad.square(diff), axis=-1)


def kernel_matrix(X, Y, p):
    """Dense ``k(X_i, Y_j)`` for point sets of shape ``(n, dim)``."""
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    Y = np.asarray(Y, dtype=np.float64).reshape(len(Y), -1)
    if X.shape[1] != Y.shape[1]:
        raise DimensionMismatch("point sets have different dimensions")
    s = _pair_sqdist(X[:, None, :], Y[None, :, :])
    return _kernel_and_grads(s, p.lengthscale, p.variance, p.family)[0]


def build_feature_kernel(HA, HB, p):
    """Feature-space kernel between embedded function batches."""
    HA = np.atleast_2d(np.asarray(HA, dtype=np.float64))
    HB = np.atleast_2d(np.asarray(HB, dtype=np.float64))
    if HA.shape[1] != HB.shape[1]:
        raise DimensionMismatch(f"latent dims differ: {HA.shape[1]} vs {HB.shape[1]}")
    return kernel_matrix(HA, HB, p)


def feature_kernel(HA, HB, log_lengthscale, log_variance, family="rbf"):
    """Differentiable feature kernel (embeddings and hyperparameters)."""
    return stationary_kernel(sqdist_matrix(HA, HB), log_lengthscale, log_variance, family)


# -- KNN-sparse spatial kernel -------------------------------------------------------


@dataclass
class SparseSpatialKernel:
    """KNN-truncated spatial covariance in CSR form with a symmetric pattern."""

    dim: int
    neighbor_count: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    sqdist: np.ndarray
    params: KernelParams
    _layout: tuple = field(default=None, repr=False)

    @property
    def nnz(self):
        return int(self.indices.size)

    def to_csr(self):
        return scipy.sparse.csr_matrix((self.values, self.indices, self.indptr), shape=(self.dim, self.dim))

    def to_dense(self):
        return self.to_csr().toarray()

    @property
    def rows(self):
        return np.repeat(np.arange(self.dim), np.diff(self.indptr))

    @property
    def bandwidth(self):
        return int(np.max(np.abs(self.rows - self.indices)))

    def band_layout(self):
        """Positions of the lower-triangle entries in compact band storage.

        Returns ``(entry_index, row, offset)`` arrays for entries with
        ``col <= row``; ``offset = row - col``.
        """
        if self._layout is None:
            rows = self.rows
            lower = np.nonzero(self.indices <= rows)[0]
            self._layout = (lower, rows[lower], rows[lower] - self.indices[lower])
        return self._layout

    def with_params(self, params):
        """Same pattern, values re-evaluated under new hyperparameters."""
        values = _kernel_and_grads(self.sqdist, params.lengthscale, params.variance, params.family)[0]
        return SparseSpatialKernel(
            self.dim, self.neighbor_count, self.indptr, self.indices, values, self.sqdist, params, self._layout
        )

    def band(self, log_lengthscale=None, log_variance=None, jitter=0.0):
        """Lower band of the kernel as a differentiable ``(d, b + 1)`` tensor.

        With no hyperparameters given the stored ones are used.
        """
        if log_lengthscale is None:
            log_lengthscale = self.params.log_lengthscale
        if log_variance is None:
            log_variance = self.params.log_variance
        entry, rows, offsets = self.band_layout()
        vals = stationary_kernel(self.sqdist[entry], log_lengthscale, log_variance, self.params.family)
        b = self.bandwidth
        shape = (self.dim, b + 1)

        def vjp(g):
            return (g[rows, offsets],)

        out = np.zeros(shape)
        out[rows, offsets] = vals.data
        if jitter:
            out[:, 0] += jitter
        return ad.apply(out, (vals,), vjp)


def _knn_indices(points, K, chunk=512):
    """Indices of the K nearest points per row; ties go to the lowest index."""
    d = len(points)
    out = np.empty((d, K), dtype=np.int64)
    for start in range(0, d, chunk):
        stop = min(start + chunk, d)
        s = _pair_sqdist(points[start:stop, None, :], points[None, :, :])
        out[start:stop] = np.argsort(s, axis=1, kind="stable")[:, :K]
    return out


def build_knn_sparse_kernel(grid, K, params):
    """KNN-sparse spatial kernel on ``grid``.

    Entry ``(i, j)`` is kept when ``j`` is among the ``K`` nearest points of
    ``i`` or vice versa (union symmetrization); the point itself is always
    its own nearest neighbour. Distances are Euclidean in the grid's
    coordinates (no periodic wrap).
    """
    points = grid.points() if hasattr(grid, "points") else np.asarray(grid, dtype=np.float64).reshape(-1, 1)
    d = len(points)
    if not 1 <= K <= d:
        raise InvalidNeighborCount(f"neighbor count {K} outside [1, {d}]")
    nbrs = _knn_indices(points, K)
    rows = np.repeat(np.arange(d), K)
    pattern = scipy.sparse.csr_matrix((np.ones(d * K), (rows, nbrs.reshape(-1))), shape=(d, d))
    pattern = ((pattern + pattern.T) > 0).tocsr()
    pattern.sort_indices()
    indptr = pattern.indptr.astype(np.int64)
    indices = pattern.indices.astype(np.int64)
    r = np.repeat(np.arange(d), np.diff(indptr))
    sq = _pair_sqdist(points[r], points[indices])
    values = _kernel_and_grads(sq, params.lengthscale, params.variance, params.family)[0]
    return SparseSpatialKernel(d, K, indptr, indices, values, sq, params)


# -- Kronecker composition ----------------------------------------------------------


@dataclass
class KroneckerKernel:
    """``feature_block kron spatial_block``, never materialized."""

    feature_block: np.ndarray
    spatial_block: object  # dense ndarray or SparseSpatialKernel

    @property
    def shape(self):
        n = self.feature_block.shape[0] * self.spatial_block.shape[0] if not isinstance(
            self.spatial_block, SparseSpatialKernel
        ) else self.feature_block.shape[0] * self.spatial_block.dim
        return (n, n)

    def to_dense(self):
        S = self.spatial_block.to_dense() if isinstance(self.spatial_block, SparseSpatialKernel) else self.spatial_block
        return np.kron(self.feature_block, S)


def factor_spatial(spatial, jitter=0.0):
    """Cholesky factor of a spatial block; banded when the block is KNN-sparse."""
    if isinstance(spatial, SparseSpatialKernel):
        band = spatial.band().data
        mean_diag = float(np.mean(band[:, 0]))
        for jit in jitter_schedule(mean_diag, jitter) if jitter else [0.0]:
            try:
                b = band.copy()
                b[:, 0] += jit
                return BandedFactor.factor(b)
            except NotPositiveDefinite:
                continue
        raise NotPositiveDefinite("spatial kernel is not positive definite")
    return robust_cholesky(np.asarray(spatial, dtype=np.float64), jitter)[0] if jitter else np.linalg.cholesky(spatial)


def kron_kernel_solve(kk, v, jitter=0.0):
    """Solve ``(K_a kron K_x) x = v`` with per-factor jitter and per-factor factorizations."""
    n = kk.feature_block.shape[0]
    d = kk.spatial_block.dim if isinstance(kk.spatial_block, SparseSpatialKernel) else kk.spatial_block.shape[0]
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != n * d:
        raise DimensionMismatch(f"vector length {v.shape[0]} != {n} * {d}")
    La = robust_cholesky(kk.feature_block, jitter)[0] if jitter else np.linalg.cholesky(kk.feature_block)
    Lx = factor_spatial(kk.spatial_block, jitter)
    return kron_solve(La, Lx, v)


def dense_band(spatial):
    """Compact lower band of a dense symmetric spatial matrix (full bandwidth)."""
    spatial = np.asarray(spatial, dtype=np.float64)
    return band_from_dense(spatial, spatial.shape[0] - 1)
