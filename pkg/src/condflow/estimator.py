"""Estimator facade: fit/predict/sample/score over image-shaped arrays.

Follows the scikit-learn conventions: constructor arguments are stored
verbatim (so get_params/set_params/clone work), fitting learns attributes
with trailing underscores, and predicting before fitting raises
NotFittedError. Inputs are stacks of (h, w, c) images rather than flat
feature matrices, so validation is done here instead of check_array.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import inference
from .model import FlowConfig, FlowModel
from .training import ArrayDataset, TrainConfig, train_loop


def _as_image_stack(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim == 3:                      # (n, h, w) -> single channel
        out = out[:, :, :, None]
    if out.ndim != 4:
        raise ValueError(f"{name} must be (n, h, w, c) or (n, h, w), "
                         f"got shape {out.shape}")
    if out.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    return out


class ConditionalGlow(BaseEstimator):
    """Conditional flow p(y|x) over image-shaped targets.

    Parameters mirror the run-configuration keys: architecture (levels,
    steps, widths), preprocessing (bins for discrete targets, else an
    affine normalization), optimizer settings, and prediction behavior.
    """

    def __init__(self, levels: int = 2, steps: int = 2, n_c: int = 8,
                 n_w: int = 32, coupling_channels: int = 64,
                 feature_channels: int = 16, bins: Optional[int] = None,
                 norm_scale: float = 1.0, norm_shift: float = 0.0,
                 x_scale: float = 1.0, lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, batch: int = 2, iters: int = 200,
                 seed: int = 0, mode: str = "sample-mean", m: int = 10,
                 temperature: float = 1.0, predict_steps: int = 200,
                 step_size: float = 0.1):
        self.levels = levels
        self.steps = steps
        self.n_c = n_c
        self.n_w = n_w
        self.coupling_channels = coupling_channels
        self.feature_channels = feature_channels
        self.bins = bins
        self.norm_scale = norm_scale
        self.norm_shift = norm_shift
        self.x_scale = x_scale
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch = batch
        self.iters = iters
        self.seed = seed
        self.mode = mode
        self.m = m
        self.temperature = temperature
        self.predict_steps = predict_steps
        self.step_size = step_size

    # -- scikit-learn protocol ---------------------------------------------

    def fit(self, X, y):
        X = _as_image_stack(X, "X")
        y = _as_image_stack(y, "y")
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs vs {y.shape[0]} targets")
        config = FlowConfig(
            y_shape=y.shape[1:], x_shape=X.shape[1:],
            levels=self.levels, steps=self.steps, n_c=self.n_c, n_w=self.n_w,
            coupling_channels=self.coupling_channels,
            feature_channels=self.feature_channels, bins=self.bins,
            norm_scale=self.norm_scale, norm_shift=self.norm_shift,
            x_scale=self.x_scale,
        )
        config.validate()
        model = FlowModel(config, seed=self.seed)
        tc = TrainConfig(iters=self.iters, lr=self.lr, beta1=self.beta1,
                         beta2=self.beta2, batch=self.batch, seed=self.seed)
        dataset = ArrayDataset(X, y, bins=self.bins)
        self.curve_ = train_loop(model, dataset, tc)
        self.model_ = model
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _fitted_model(self) -> FlowModel:
        if not hasattr(self, "model_"):
            raise NotFittedError("this ConditionalGlow instance is not fitted; "
                                 "call fit first")
        return self.model_

    def _prediction_config(self) -> inference.PredictionConfig:
        cfg = inference.PredictionConfig(
            mode=self.mode, m=self.m, temperature=self.temperature,
            steps=self.predict_steps, step_size=self.step_size)
        cfg.validate()
        return cfg

    def predict(self, X, random_state: Optional[int] = None) -> np.ndarray:
        """Per-example prediction in original target units."""
        model = self._fitted_model()
        cfg = self._prediction_config()
        X = _as_image_stack(X, "X")
        rng = np.random.default_rng(self.seed if random_state is None
                                    else random_state)
        return np.stack([inference.predict(model, X[i], cfg, rng).y_star
                         for i in range(X.shape[0])])

    def sample(self, X, n_samples: int = 1,
               temperature: Optional[float] = None,
               random_state: Optional[int] = None) -> np.ndarray:
        """Conditional draws, shaped (n, n_samples) + target shape."""
        model = self._fitted_model()
        X = _as_image_stack(X, "X")
        if n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        temp = self.temperature if temperature is None else temperature
        rng = np.random.default_rng(self.seed if random_state is None
                                    else random_state)
        return np.stack([
            np.stack([inference.sample(model, X[i], rng, temperature=temp)
                      for _ in range(n_samples)])
            for i in range(X.shape[0])
        ])

    def log_likelihood(self, X, y) -> np.ndarray:
        """Per-example log p(y|x) in nats. Discrete targets are scored at
        their dequantization-cell centers, which keeps the value
        deterministic."""
        model = self._fitted_model()
        X = _as_image_stack(X, "X")
        y = _as_image_stack(y, "y")
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs vs {y.shape[0]} targets")
        vals = np.empty(X.shape[0])
        for i in range(X.shape[0]):
            if model.config.bins is not None:
                y_cont = (y[i] + 0.5) / model.config.bins - 0.5
            else:
                y_cont = model.normalize(y[i])
            vals[i] = inference.log_likelihood_of(model, X[i], y_cont)
        return vals

    def score(self, X, y) -> float:
        """Mean log-likelihood per target dimension (higher is better)."""
        model = self._fitted_model()
        return float(self.log_likelihood(X, y).mean() / model.y_dim)
