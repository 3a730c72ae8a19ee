"""scikit-learn style wrappers around the training, masking and probing code."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import masking, training
from .evalkit import LinearProbe, extract_features, mpjpe_frames
from .model import ModelConfig, ModelParams, predict_future
from .diffcore import no_grad
from .validation import check_motion, check_motion_batch

__all__ = ["LinearProbe", "MotionForecaster", "VelocityMasker"]


class MotionForecaster(RegressorMixin, TransformerMixin, BaseEstimator):
    """Pretrain (optional) then finetune a forecaster on (B, T, J, K) -> (B, L, J, K) arrays.

    ``transform`` returns pooled penultimate features, ``score`` the negative
    mean per-joint position error over all future frames.
    """

    def __init__(self, channels=128, heads=8, head_dim=32, pme_layers=3, fmp_layers=3,
                 fusion="cross_attention", layout="sequential", pmg_qkv="shared",
                 pretrain_mode="mask", pretrain_steps=3000, finetune_steps=3000,
                 mask_rate=0.75, mask_strategy="velocity", alpha=1.0, lr=5e-4, batch=24,
                 grad_clip=0.0, seed=0):
        self.channels = channels
        self.heads = heads
        self.head_dim = head_dim
        self.pme_layers = pme_layers
        self.fmp_layers = fmp_layers
        self.fusion = fusion
        self.layout = layout
        self.pmg_qkv = pmg_qkv
        self.pretrain_mode = pretrain_mode
        self.pretrain_steps = pretrain_steps
        self.finetune_steps = finetune_steps
        self.mask_rate = mask_rate
        self.mask_strategy = mask_strategy
        self.alpha = alpha
        self.lr = lr
        self.batch = batch
        self.grad_clip = grad_clip
        self.seed = seed

    def _train_config(self, steps) -> training.TrainConfig:
        return training.TrainConfig(steps=steps, batch=self.batch, lr=self.lr, alpha=self.alpha,
                                    mask_rate=self.mask_rate, mask_strategy=self.mask_strategy,
                                    pretrain_mode=self.pretrain_mode, grad_clip=self.grad_clip,
                                    seed=self.seed)

    def fit(self, X, y):
        X, y = check_motion_batch(X, y)
        cfg = ModelConfig(channels=self.channels, heads=self.heads, head_dim=self.head_dim,
                          pme_layers=self.pme_layers, fmp_layers=self.fmp_layers,
                          past_frames=X.shape[1], future_frames=y.shape[1], joints=X.shape[2],
                          coords=X.shape[3], fusion=self.fusion, layout=self.layout, pmg_qkv=self.pmg_qkv)
        self.params_ = ModelParams.init(cfg, seed=self.seed)
        self.pretrain_losses_, _ = training.run_stage(
            "pretrain", self.params_, X, y, self._train_config(self.pretrain_steps))
        self.finetune_losses_, _ = training.run_stage(
            "finetune", self.params_, X, y, self._train_config(self.finetune_steps))
        self.n_features_in_ = X.shape[1] * X.shape[2] * X.shape[3]
        return self

    def _past(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_motion(X, "X")
        if X.ndim == 3:
            X = X[None]
        cfg = self.params_.config
        if X.shape[1:] != (cfg.past_frames, cfg.joints, cfg.coords):
            raise ValueError(f"expected past windows of shape (B, {cfg.past_frames}, {cfg.joints}, "
                             f"{cfg.coords}), got {X.shape}")
        return X

    def predict(self, X):
        X = self._past(X)
        with no_grad():
            return predict_future(X, self.params_).data.astype(np.float64)

    def transform(self, X):
        return extract_features(self.params_, self._past(X))

    def score(self, X, y, sample_weight=None):
        err = mpjpe_frames(self.predict(X), check_motion(y, "y")).mean(axis=1)
        return -float(np.average(err, weights=sample_weight))


class VelocityMasker(TransformerMixin, BaseEstimator):
    """Hide the fastest-moving (frame, joint) positions of each sequence in a batch."""

    def __init__(self, rate=0.75, strategy="velocity", invert=False, seed=0):
        self.rate = rate
        self.strategy = strategy
        self.invert = invert
        self.seed = seed

    def fit(self, X, y=None):
        X = check_motion(X, "X")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"rate must lie in [0, 1], got {self.rate}")
        if self.strategy not in masking.STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        self.n_features_in_ = int(np.prod(X.shape[-3:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        arr = check_motion(X, "X")
        batch = arr[None] if arr.ndim == 3 else arr
        out = np.empty_like(batch)
        self.plans_ = []
        for i, x in enumerate(batch):
            out[i], plan = masking.mask_sequence(x, self.rate, self.strategy, self.seed + i, self.invert)
            self.plans_.append(plan)
        return out[0] if arr.ndim == 3 else out
