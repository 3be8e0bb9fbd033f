"""scikit-learn compatible wrapper around the training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .grid import Grid
from .train import TrainConfig, train


class LoGoSGPORegressor(RegressorMixin, BaseEstimator):
    """Operator regressor mapping discretized input fields to output fields.

    ``X`` and ``y`` are ``(n_samples, n_points)`` arrays sampled on a uniform
    periodic grid over ``[0, 1)`` whose size is a power of two.
    ``predict(X, return_std=True)`` also returns predictive standard
    deviations, observation noise included.
    """

    def __init__(self, epochs=100, batch_size=32, learning_rate=8e-3, weight_decay=1e-4, levels=3,
                 width=16, layers=3, latent_dim=32, inducing=64, neighbors=8, jitter=1e-6,
                 feature_kernel="rbf", spatial_kernel="rbf", random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.levels = levels
        self.width = width
        self.layers = layers
        self.latent_dim = latent_dim
        self.inducing = inducing
        self.neighbors = neighbors
        self.jitter = jitter
        self.feature_kernel = feature_kernel
        self.spatial_kernel = spatial_kernel
        self.random_state = random_state

    def _config(self, n):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=min(self.batch_size, n),
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            levels=self.levels,
            width=self.width,
            layers=self.layers,
            latent_dim=self.latent_dim,
            inducing=self.inducing,
            neighbors=self.neighbors,
            jitter=self.jitter,
            feature_kernel=self.feature_kernel,
            spatial_kernel=self.spatial_kernel,
            seed=0 if self.random_state is None else int(self.random_state),
        )

    def fit(self, X, y):
        X, y = validate_data(self, X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        y = np.asarray(y).reshape(len(y), -1)
        if y.shape != X.shape:
            raise ValueError(f"y must have the shape of X, got {y.shape} and {X.shape}")
        result = train(Grid.uniform(X.shape[1]), X, y, self._config(len(X)))
        self.model_ = result.model
        self.history_ = result.history
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        pm = self.model_.predict(X, include_noise=True)
        if return_std:
            return pm.mean, np.sqrt(pm.variance)
        return pm.mean
