"""Sparse variational GP over (function, location) pairs with a Kronecker prior.

The prior covariance of the latent field is ``K_a kron K_x``: ``K_a`` compares
embedded input functions, ``K_x`` is the (jittered) spatial kernel on the
grid. Inducing variables sit at ``M`` inducing functions on the same grid, so
``K_ZZ = K_a^{ZZ} kron K_x`` and the cross-covariance with a sample ``i`` is
``k_a(Z, a_i) kron K_x``.

The variational posterior is whitened: ``v = m0(Z) + (L_a kron L_x) u`` with
``q(u) = N(mu_u, Sigma_u)``. ``Sigma_u`` is either ``P kron diag(s^2)`` with
``P = L_P L_P^T`` (the default, cheap) or an unstructured ``L_u L_u^T`` for
small instances. With ``beta_i = L_a^{-1} k_a(Z, a_i)`` the marginals of
``q(f_i)`` are

    mean_i = m0(a_i) + L_x U^T beta_i
    var_ij = (k_a(a_i, a_i) - |beta_i|^2) K_x[j, j] + [L_x Sigma_u-term]_jj

All functions work on :class:`~logos_gpo.autodiff.Tensor` leaves so the ELBO
can be differentiated with respect to every parameter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .exceptions import DimensionMismatch, InstanceTooLarge, NotPositiveDefinite
from .kernels import KernelParams, SparseSpatialKernel, feature_kernel
from .linalg import DEFAULT_JITTER, band_from_dense, band_to_dense, jitter_schedule

logger = logging.getLogger(__name__)

COVARIANCE_FORMS = ("kron", "full")
EXACT_GP_MAX_SIZE = 512


@dataclass
class VariationalState:
    """Inducing functions, whitened ``q(u)``, noise and kernel hyperparameters."""

    Z: np.ndarray
    q_mean: np.ndarray
    q_feature_chol: np.ndarray = None
    q_spatial_log_scale: np.ndarray = None
    q_full_chol: np.ndarray = None
    log_noise: float = np.log(1e-2)
    feature_params: KernelParams = field(default_factory=KernelParams)
    spatial_params: KernelParams = field(default_factory=KernelParams)
    neighbor_count: int = 8

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=np.float64))
        self.q_mean = np.asarray(self.q_mean, dtype=np.float64).reshape(self.Z.shape[0], -1)
        if self.q_full_chol is None and self.q_feature_chol is None:
            raise ValueError("state needs either a Kronecker or a full covariance factor")

    @property
    def covariance_form(self):
        return "full" if self.q_full_chol is not None else "kron"

    @property
    def num_inducing(self):
        return self.Z.shape[0]

    @property
    def dim(self):
        return self.q_mean.shape[1]

    @property
    def noise_var(self):
        return float(np.exp(self.log_noise))

    @classmethod
    def prior(cls, Z, dim, noise_var=1e-2, feature_params=None, spatial_params=None,
              neighbor_count=8, covariance_form="kron"):
        """State with ``q(v)`` equal to the prior ``N(m0(Z), K_ZZ)``."""
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        M = Z.shape[0]
        kwargs = dict(
            Z=Z,
            q_mean=np.zeros((M, dim)),
            log_noise=float(np.log(noise_var)),
            feature_params=feature_params or KernelParams(),
            spatial_params=spatial_params or KernelParams(),
            neighbor_count=neighbor_count,
        )
        if covariance_form == "full":
            return cls(q_full_chol=np.eye(M * dim), **kwargs)
        if covariance_form != "kron":
            raise ValueError(f"covariance_form must be one of {COVARIANCE_FORMS}")
        return cls(q_feature_chol=np.eye(M), q_spatial_log_scale=np.zeros(dim), **kwargs)

    def variational_arrays(self):
        """Trainable variational arrays by name (hyperparameters excluded)."""
        out = {"q_mean": self.q_mean}
        if self.covariance_form == "full":
            out["q_full_chol"] = self.q_full_chol
        else:
            out["q_feature_chol"] = self.q_feature_chol
            out["q_spatial_log_scale"] = self.q_spatial_log_scale
        return out

    def copy(self):
        return replace(
            self,
            Z=self.Z.copy(),
            q_mean=self.q_mean.copy(),
            q_feature_chol=None if self.q_feature_chol is None else self.q_feature_chol.copy(),
            q_spatial_log_scale=None if self.q_spatial_log_scale is None else self.q_spatial_log_scale.copy(),
            q_full_chol=None if self.q_full_chol is None else self.q_full_chol.copy(),
        )


@dataclass
class StateTensors:
    """Graph leaves for one evaluation of the objective."""

    q_mean: ad.Tensor
    q_feature_chol: ad.Tensor = None
    q_spatial_log_scale: ad.Tensor = None
    q_full_chol: ad.Tensor = None
    log_noise: ad.Tensor = None
    feature_log_lengthscale: ad.Tensor = None
    feature_log_variance: ad.Tensor = None
    spatial_log_lengthscale: ad.Tensor = None
    spatial_log_variance: ad.Tensor = None
    feature_family: str = "rbf"

    @classmethod
    def from_state(cls, state, requires_grad=False):
        make = ad.parameter if requires_grad else ad.Tensor

        def opt(x):
            return None if x is None else make(x)

        return cls(
            q_mean=make(state.q_mean),
            q_feature_chol=opt(state.q_feature_chol),
            q_spatial_log_scale=opt(state.q_spatial_log_scale),
            q_full_chol=opt(state.q_full_chol),
            log_noise=make(state.log_noise),
            feature_log_lengthscale=make(state.feature_params.log_lengthscale),
            feature_log_variance=make(state.feature_params.log_variance),
            spatial_log_lengthscale=make(state.spatial_params.log_lengthscale),
            spatial_log_variance=make(state.spatial_params.log_variance),
            feature_family=state.feature_params.family,
        )

    def leaves(self):
        return {k: v for k, v in vars(self).items() if isinstance(v, ad.Tensor)}


# -- blocks ---------------------------------------------------------------------------


@dataclass
class Blocks:
    """Per-factor kernel blocks for one batch; the Kronecker products stay implicit."""

    K_zz: ad.Tensor  # M x M feature block at the inducing functions
    K_za: ad.Tensor  # M x B
    k_aa: ad.Tensor  # B, diagonal of the feature block at the batch
    L_a: ad.Tensor
    beta: ad.Tensor  # L_a^{-1} K_za
    L_x: ad.Tensor  # banded Cholesky of the spatial block, compact lower storage
    spatial_diag: ad.Tensor
    feature_jitter: float
    spatial_jitter: float


def _scaled_jitter(log_variance, shape, where):
    """Jitter pattern ``where`` (a 0/1 array) scaled by the kernel variance.

    Jitter levels are relative to the variance, so the added diagonal moves
    with ``log_variance`` and has to stay in the graph.
    """
    return ad.exp(log_variance) * np.broadcast_to(where, shape)


def _chol_with_jitter(K, jitter, what, log_variance):
    scale = float(np.exp(ad.value(log_variance)))
    eye = np.eye(K.shape[0])
    for i, jit in enumerate(jitter_schedule(scale, jitter)):
        Kj = K + (jit / scale) * _scaled_jitter(log_variance, K.shape, eye) if jit else K
        try:
            L = ad.cholesky(Kj)
        except NotPositiveDefinite:
            continue
        if i:
            logger.info("%s block needed jitter %.3g", what, jit)
        return L, jit
    raise NotPositiveDefinite(f"{what} block is not positive definite after maximum jitter")


def _band_chol_with_jitter(band_fn, scale, jitter):
    for i, jit in enumerate(jitter_schedule(scale, jitter)):
        try:
            return ad.band_cholesky(band_fn(jit)), jit
        except NotPositiveDefinite:
            continue
    raise NotPositiveDefinite("spatial kernel is not positive definite after maximum jitter")


def spatial_factor(spatial, log_lengthscale, log_variance, jitter=DEFAULT_JITTER):
    """Banded Cholesky of the spatial block and the jitter it needed.

    ``spatial`` is a :class:`SparseSpatialKernel` (differentiable in its
    hyperparameters) or a fixed dense matrix.
    """
    if isinstance(spatial, SparseSpatialKernel):
        scale = float(np.exp(ad.value(log_variance)))
        diag = np.zeros((spatial.dim, spatial.bandwidth + 1))
        diag[:, 0] = 1.0

        def jittered(jit):
            band = spatial.band(log_lengthscale, log_variance)
            return band + (jit / scale) * _scaled_jitter(log_variance, diag.shape, diag) if jit else band

        return _band_chol_with_jitter(jittered, scale, jitter)
    spatial = np.asarray(spatial, dtype=np.float64)
    band = band_from_dense(spatial, spatial.shape[0] - 1)
    scale = float(np.mean(np.diag(spatial))) or 1.0

    def jittered(jit):
        b = band.copy()
        b[:, 0] += jit
        return ad.Tensor(b)

    return _band_chol_with_jitter(jittered, scale, jitter)


def build_blocks(HZ, HA, tensors, spatial, jitter=DEFAULT_JITTER, spatial_chol=None):
    """Kernel blocks for embedded inducing functions ``HZ`` and batch ``HA``.

    ``spatial_chol`` lets a caller reuse a spatial factor computed once for
    several batches (prediction); training recomputes it every step because
    its hyperparameters move.
    """
    HZ, HA = ad.as_tensor(HZ), ad.as_tensor(HA)
    if HZ.shape[-1] != HA.shape[-1]:
        raise DimensionMismatch("inducing and batch embeddings differ in latent dimension")
    fam = tensors.feature_family
    ll, lv = tensors.feature_log_lengthscale, tensors.feature_log_variance
    K_zz = feature_kernel(HZ, HZ, ll, lv, fam)
    K_zz = 0.5 * (K_zz + ad.transpose(K_zz))
    K_za = feature_kernel(HZ, HA, ll, lv, fam)
    k_aa = ad.broadcast_to(ad.exp(lv), (HA.shape[0],))
    L_a, fj = _chol_with_jitter(K_zz, jitter, "feature", lv)
    beta = ad.tri_solve(L_a, K_za)
    if spatial_chol is None:
        L_x, sj = spatial_factor(spatial, tensors.spatial_log_lengthscale, tensors.spatial_log_variance, jitter)
    else:
        L_x, sj = spatial_chol
    spatial_diag = ad.tsum(ad.square(L_x), axis=1)
    return Blocks(K_zz, K_za, k_aa, L_a, beta, L_x, spatial_diag, fj, sj)


# -- moments and objective ---------------------------------------------------------------


def conditional_moments(blocks, tensors, mean_batch):
    """Mean and marginal variance of ``q(f_i)`` for each batch row, both ``(B, d)``."""
    beta = blocks.beta
    M, B = beta.shape
    d = blocks.L_x.shape[0]
    mean_batch = ad.as_tensor(mean_batch)
    if mean_batch.shape != (B, d):
        raise DimensionMismatch(f"batch mean has shape {mean_batch.shape}, expected {(B, d)}")
    betaT = ad.transpose(beta)
    mean = mean_batch + ad.band_matvec(blocks.L_x, ad.matmul(betaT, tensors.q_mean))
    prior_gap = blocks.k_aa - ad.tsum(ad.square(beta), axis=0)
    var = ad.reshape(prior_gap, (B, 1)) * ad.reshape(blocks.spatial_diag, (1, d))
    if tensors.q_full_chol is not None:
        Lu = ad.reshape(ad.tril(tensors.q_full_chol), (M, d, M * d))
        R = ad.einsum("bm,mjc->bcj", betaT, Lu)
        LR = ad.band_matvec(blocks.L_x, R)
        var = var + ad.tsum(ad.square(LR), axis=1)
    else:
        Lp = ad.tril(tensors.q_feature_chol)
        q = ad.tsum(ad.square(ad.matmul(betaT, Lp)), axis=1)
        s2 = ad.exp(2.0 * tensors.q_spatial_log_scale)
        r = ad.band_matvec(ad.square(blocks.L_x), s2)
        var = var + ad.reshape(q, (B, 1)) * ad.reshape(r, (1, d))
    return mean, var


def kl_divergence(tensors):
    """``KL(q(u) || N(0, I))``, equal to ``KL(q(v) || p(v))`` by whitening."""
    u = tensors.q_mean
    M, d = u.shape
    if tensors.q_full_chol is not None:
        L = ad.tril(tensors.q_full_chol)
        trace = ad.tsum(ad.square(L))
        logdet = ad.logdet_from_cholesky_diag(ad.diagonal(L))
    else:
        Lp = ad.tril(tensors.q_feature_chol)
        s2 = ad.exp(2.0 * tensors.q_spatial_log_scale)
        trace = ad.tsum(ad.square(Lp)) * ad.tsum(s2)
        logdet = d * ad.logdet_from_cholesky_diag(ad.diagonal(Lp)) + M * ad.tsum(2.0 * tensors.q_spatial_log_scale)
    return 0.5 * (trace + ad.tsum(ad.square(u)) - M * d - logdet)


def expected_log_likelihood(y, mean, var, log_noise):
    """Per-sample ``E_q[log N(y | f, noise)]`` summed over grid points, shape ``(B,)``."""
    y = np.asarray(y, dtype=np.float64)
    log_noise = ad.as_tensor(log_noise)
    noise = ad.exp(log_noise)
    d = y.shape[1]
    resid = ad.square(ad.as_tensor(y) - mean) + var
    return -0.5 * d * (np.log(2.0 * np.pi) + log_noise) - 0.5 * ad.tsum(resid, axis=1) / noise


@dataclass
class ElboTerms:
    elbo: ad.Tensor
    data_term: ad.Tensor
    kl: ad.Tensor
    mean: ad.Tensor
    var: ad.Tensor


def elbo(y, blocks, tensors, mean_batch, n_total):
    """``(N / B) * sum_i E_q[log p(y_i | f_i)] - KL`` for one minibatch."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] < 1:
        raise ValueError("empty batch")
    mean, var = conditional_moments(blocks, tensors, mean_batch)
    data = ad.tsum(expected_log_likelihood(y, mean, var, tensors.log_noise)) * (n_total / y.shape[0])
    kl = kl_divergence(tensors)
    return ElboTerms(data - kl, data, kl, mean, var)


# -- prediction ---------------------------------------------------------------------------


@dataclass
class PredictiveMoments:
    mean: np.ndarray
    variance: np.ndarray
    clamped: int = 0
    worst_negative: float = 0.0


def clamp_variance(var, jitter=0.0):
    """Clamp negative variances at zero; violations beyond ``-1e-10`` are logged."""
    var = np.array(var, dtype=np.float64)
    worst = float(min(var.min(), 0.0)) if var.size else 0.0
    neg = var < 0
    if worst < -1e-10:
        logger.warning("predictive variance as low as %.3g clamped (jitter %.3g)", worst, jitter)
    var[neg] = 0.0
    return var, int(neg.sum()), worst


def predictive(HZ, H_star, state, spatial, mean_star, include_noise=False,
               jitter=DEFAULT_JITTER, spatial_chol=None):
    """Predictive mean and marginal variance at embedded test functions ``H_star``."""
    tensors = StateTensors.from_state(state)
    blocks = build_blocks(HZ, H_star, tensors, spatial, jitter, spatial_chol)
    mean, var = conditional_moments(blocks, tensors, mean_star)
    v = var.data + (state.noise_var if include_noise else 0.0)
    v, n_clamped, worst = clamp_variance(v, blocks.spatial_jitter)
    return PredictiveMoments(mean.data, v, n_clamped, worst)


def unwhitened(state, blocks, mean_z):
    """Report ``m`` and ``S`` of ``q(v)``; dense, so only for small instances."""
    M, d = state.q_mean.shape
    if M * d > EXACT_GP_MAX_SIZE:
        raise InstanceTooLarge(f"dense covariance of size {M * d} requested")
    L = np.kron(blocks.L_a.data, band_to_dense(blocks.L_x.data))
    m = np.asarray(mean_z, dtype=np.float64).reshape(-1) + L @ state.q_mean.reshape(-1)
    if state.covariance_form == "full":
        Lu = np.tril(state.q_full_chol)
    else:
        Lu = np.kron(np.tril(state.q_feature_chol), np.diag(np.exp(state.q_spatial_log_scale)))
    LS = L @ Lu
    return m, LS @ LS.T


def whiten(m, S, mean_z, L_a, L_x_dense):
    """Whitened ``(mu_u, L_u)`` for a given unwhitened ``q(v) = N(m, S)``."""
    L = np.kron(L_a, L_x_dense)
    shifted = np.asarray(m, dtype=np.float64).reshape(-1) - np.asarray(mean_z).reshape(-1)
    u = scipy.linalg.solve_triangular(L, shifted, lower=True)
    Li_S = scipy.linalg.solve_triangular(L, S, lower=True)
    Sigma_u = scipy.linalg.solve_triangular(L, Li_S.T, lower=True)
    Sigma_u = 0.5 * (Sigma_u + Sigma_u.T)
    w, V = np.linalg.eigh(Sigma_u)
    w = np.maximum(w, 0.0)
    # a PSD square root factored to triangular form via QR keeps zero modes safe
    R = np.linalg.qr((V * np.sqrt(w)).T, mode="r")
    Lu = R.T
    signs = np.sign(np.diag(Lu))
    signs[signs == 0] = 1.0
    return u, Lu * signs


# -- exact reference -----------------------------------------------------------------------


@dataclass
class ExactPosterior:
    mean: np.ndarray
    variance: np.ndarray
    log_marginal_likelihood: float


def exact_gp_reference(K_a_train, K_a_cross, k_a_test, K_x, y, mean_train, mean_test, noise_var):
    """Dense GP regression with ``K = K_a kron K_x + noise I``.

    ``K_a_cross`` is ``N x T`` and ``k_a_test`` the ``T`` test self-covariances.
    Returns latent (noise-free) marginal variances.
    """
    K_a_train = np.asarray(K_a_train, dtype=np.float64)
    K_x = np.asarray(K_x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    N, d = y.shape
    if N * d > EXACT_GP_MAX_SIZE:
        raise InstanceTooLarge(f"N * d = {N * d} exceeds {EXACT_GP_MAX_SIZE}")
    K = np.kron(K_a_train, K_x) + noise_var * np.eye(N * d)
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    r = (y - np.asarray(mean_train)).reshape(-1)
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, r))
    lml = -0.5 * r @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * N * d * np.log(2.0 * np.pi)
    K_cross = np.kron(np.asarray(K_a_cross, dtype=np.float64), K_x)  # Nd x Td
    T = K_cross.shape[1] // d
    mean = np.asarray(mean_test).reshape(-1) + K_cross.T @ alpha
    V = np.linalg.solve(L, K_cross)
    prior = np.kron(np.asarray(k_a_test, dtype=np.float64), np.diag(K_x))
    var = prior - np.sum(V * V, axis=0)
    return ExactPosterior(mean.reshape(T, d), var.reshape(T, d), float(lml))
