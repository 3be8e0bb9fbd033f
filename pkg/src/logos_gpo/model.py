"""The assembled operator model: mean network, embedding network and variational GP."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import NotPositiveDefinite, ShapeMismatch
from .kernels import KernelParams
from .linalg import band_cholesky
from .svgp import (
    PredictiveMoments,
    StateTensors,
    build_blocks,
    clamp_variance,
    conditional_moments,
    elbo,
    spatial_factor,
)
from .wno import WaveletNeuralOperator, wno_forward

logger = logging.getLogger(__name__)

HYPER_NAMES = (
    "feature_log_lengthscale",
    "feature_log_variance",
    "spatial_log_lengthscale",
    "spatial_log_variance",
)


@dataclass
class Normalizer:
    """Global affine scaling of input and output fields."""

    a_mean: float = 0.0
    a_std: float = 1.0
    y_mean: float = 0.0
    y_std: float = 1.0

    @classmethod
    def fit(cls, a, y):
        a_std = float(np.std(a)) or 1.0
        y_std = float(np.std(y)) or 1.0
        return cls(float(np.mean(a)), a_std, float(np.mean(y)), y_std)

    def inputs(self, a):
        return (np.asarray(a, dtype=np.float64) - self.a_mean) / self.a_std

    def outputs(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def to_dict(self):
        return dict(vars(self))


def max_stable_lengthscale(spatial, lo=1e-4, hi=10.0, iters=40):
    """Largest lengthscale for which the truncated spatial kernel factors without jitter.

    The result is found by bisection in log space. Truncating a smooth kernel to
    a few neighbours stops being positive definite once the lengthscale is a
    small multiple of the grid spacing.
    """

    def ok(ell):
        p = KernelParams(spatial.params.family, float(np.log(ell)), 0.0)
        try:
            band_cholesky(spatial.band(p.log_lengthscale, 0.0).data)
        except NotPositiveDefinite:
            return False
        return True

    if ok(hi):
        return hi
    if not ok(lo):
        raise NotPositiveDefinite("truncated spatial kernel is indefinite even at tiny lengthscales")
    a, b = np.log(lo), np.log(hi)
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if ok(np.exp(mid)):
            a = mid
        else:
            b = mid
    return float(np.exp(a))


class LogosModel:
    """Parameters of the full model and the maps that use them.

    The trainable parameters form a flat dictionary (see :meth:`parameters`)
    with names prefixed by group: ``mean/``, ``embed/``, then ``Z``, the
    variational arrays, kernel log-hyperparameters and ``log_noise``.
    """

    def __init__(self, grid, mean_net, embed_net, state, spatial, normalizer,
                 jitter=1e-6, max_spatial_lengthscale=None):
        self.grid = grid
        self.mean_net = mean_net
        self.embed_net = embed_net
        self.state = state
        self.spatial = spatial
        self.normalizer = normalizer
        self.jitter = jitter
        self.max_spatial_lengthscale = max_spatial_lengthscale

    @property
    def dim(self):
        return self.grid.size

    # -- parameter views -------------------------------------------------------------

    def parameters(self):
        p = {f"mean/{k}": v for k, v in self.mean_net.params.items()}
        p.update({f"embed/{k}": v for k, v in self.embed_net.params.items()})
        p["Z"] = self.state.Z
        p.update(self.state.variational_arrays())
        p["feature_log_lengthscale"] = np.array(self.state.feature_params.log_lengthscale)
        p["feature_log_variance"] = np.array(self.state.feature_params.log_variance)
        p["spatial_log_lengthscale"] = np.array(self.state.spatial_params.log_lengthscale)
        p["spatial_log_variance"] = np.array(self.state.spatial_params.log_variance)
        p["log_noise"] = np.array(self.state.log_noise)
        return p

    def set_parameters(self, p):
        for k, v in p.items():
            v = np.asarray(v, dtype=np.float64)
            if k.startswith("mean/"):
                self.mean_net.params[k[5:]] = v
            elif k.startswith("embed/"):
                self.embed_net.params[k[6:]] = v
            elif k in ("Z", "q_mean", "q_feature_chol", "q_spatial_log_scale", "q_full_chol"):
                setattr(self.state, k, v)
            elif k == "log_noise":
                self.state.log_noise = float(v)
            elif k in HYPER_NAMES:
                which, attr = k.split("_", 1)
                params = getattr(self.state, f"{which}_params")
                setattr(params, attr, float(v))
            else:
                raise KeyError(f"unknown parameter {k!r}")

    @staticmethod
    def group_of(name):
        if name.startswith("mean/"):
            return "mean_net"
        if name.startswith("embed/"):
            return "embed_net"
        if name.startswith("q_"):
            return "variational"
        if name in HYPER_NAMES:
            return "hyperparameters"
        return {"Z": "inducing", "log_noise": "noise"}[name]

    def clamp_hyperparameters(self):
        if self.max_spatial_lengthscale is not None:
            cap = float(np.log(self.max_spatial_lengthscale))
            sp = self.state.spatial_params
            sp.log_lengthscale = min(sp.log_lengthscale, cap)

    # -- objective -------------------------------------------------------------------

    def _check_fields(self, a):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if a.shape[1] != self.dim:
            raise ShapeMismatch(f"fields have {a.shape[1]} points, model grid has {self.dim}")
        return a

    def objective(self, a, y, n_total, with_grad=True):
        """Negative ELBO per observation on a normalized batch, and its gradients.

        Returns ``(loss, terms, grads)``; ``grads`` maps parameter names to
        arrays (``None`` when ``with_grad`` is false).
        """
        a = self._check_fields(a)
        y = np.asarray(y, dtype=np.float64)
        params = self.parameters()
        leaves = {k: (ad.parameter(v, k) if with_grad else ad.Tensor(v)) for k, v in params.items()}
        mean_p = {k[5:]: t for k, t in leaves.items() if k.startswith("mean/")}
        embed_p = {k[6:]: t for k, t in leaves.items() if k.startswith("embed/")}
        tensors = StateTensors(
            q_mean=leaves["q_mean"],
            q_feature_chol=leaves.get("q_feature_chol"),
            q_spatial_log_scale=leaves.get("q_spatial_log_scale"),
            q_full_chol=leaves.get("q_full_chol"),
            log_noise=leaves["log_noise"],
            feature_log_lengthscale=leaves["feature_log_lengthscale"],
            feature_log_variance=leaves["feature_log_variance"],
            spatial_log_lengthscale=leaves["spatial_log_lengthscale"],
            spatial_log_variance=leaves["spatial_log_variance"],
            feature_family=self.state.feature_params.family,
        )
        M = self.state.num_inducing
        m0 = wno_forward(ad.Tensor(a), self.grid, mean_p, self.mean_net.config)
        H = wno_forward(ad.concatenate([leaves["Z"], ad.Tensor(a)], axis=0), self.grid, embed_p, self.embed_net.config)
        HZ, HA = H[:M], H[M:]
        blocks = build_blocks(HZ, HA, tensors, self.spatial, self.jitter)
        terms = elbo(y, blocks, tensors, m0, n_total)
        loss = terms.elbo * (-1.0 / (n_total * self.dim))
        grads = None
        if with_grad:
            loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
        return float(loss.data), terms, grads

    # -- prediction ------------------------------------------------------------------

    def embed(self, a_norm):
        return wno_forward(ad.Tensor(a_norm), self.grid, self.embed_net.params, self.embed_net.config).data

    def predict(self, a, include_noise=True, batch_size=64):
        """Predictive mean and marginal variance in original units, ``(n, d)`` each."""
        a = self._check_fields(a)
        norm = self.normalizer
        tensors = StateTensors.from_state(self.state)
        HZ = self.embed(self.state.Z)
        chol = spatial_factor(self.spatial, tensors.spatial_log_lengthscale, tensors.spatial_log_variance, self.jitter)
        means, variances = [], []
        clamped, worst = 0, 0.0
        for start in range(0, len(a), batch_size):
            an = norm.inputs(a[start : start + batch_size])
            m0 = wno_forward(ad.Tensor(an), self.grid, self.mean_net.params, self.mean_net.config).data
            blocks = build_blocks(HZ, self.embed(an), tensors, self.spatial, self.jitter, spatial_chol=chol)
            mean, var = conditional_moments(blocks, tensors, m0)
            v = var.data + (self.state.noise_var if include_noise else 0.0)
            v, c, w = clamp_variance(v, blocks.spatial_jitter)
            clamped += c
            worst = min(worst, w)
            means.append(mean.data * norm.y_std + norm.y_mean)
            variances.append(v * norm.y_std**2)
        return PredictiveMoments(np.concatenate(means), np.concatenate(variances), clamped, worst)

    def copy(self):
        other = LogosModel(
            self.grid,
            WaveletNeuralOperator(self.mean_net.config, {k: v.copy() for k, v in self.mean_net.params.items()}),
            WaveletNeuralOperator(self.embed_net.config, {k: v.copy() for k, v in self.embed_net.params.items()}),
            self.state.copy(),
            self.spatial,
            Normalizer(**self.normalizer.to_dict()),
            self.jitter,
            self.max_spatial_lengthscale,
        )
        other.state.feature_params = KernelParams(**vars(self.state.feature_params))
        other.state.spatial_params = KernelParams(**vars(self.state.spatial_params))
        return other
