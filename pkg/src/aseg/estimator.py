"""scikit-learn style wrapper around the segmentation network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import Tensor, resolve_dtype
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Sample
from .losses import LossWeights
from .metrics import ConfusionCounts, confusion_counts, dice_score
from .model import ModelConfig, ModelParams, forward_logits
from .training import TrainConfig, predict_proba, train
from .validation import check_images, check_masks, check_spatial


class ResUNetSegmenter(BaseEstimator):
    """Binary segmenter: residual U-Net with CBAM + HAL refined skips.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`.
    ``fit`` trains from scratch on (N, H, W) images in [0, 1] and binary
    masks; ``predict`` returns uint8 masks.

    Attributes
    ----------
    params_ : ModelParams
        Weights after the last optimization step.
    best_params_ : ModelParams
        Snapshot with the best validation (or training) Dice.
    history_ : list of EpochRecord
    n_steps_ : int
    """

    def __init__(self, levels=4, base_channels=16, residual=True, use_cbam=True, use_hal=True,
                 hal_levels=None, patch_size=4, attn_dim=None, reduction=2, skip_mode="series",
                 epochs=150, learning_rate=1e-5, batch_size=4, max_steps=None,
                 loss_weights=(1 / 3, 1 / 3, 1 / 3), focal_alpha=0.25, focal_gamma=2.0,
                 threshold=0.5, dtype="float32", random_state=0, eval_train=True):
        self.levels = levels
        self.base_channels = base_channels
        self.residual = residual
        self.use_cbam = use_cbam
        self.use_hal = use_hal
        self.hal_levels = hal_levels
        self.patch_size = patch_size
        self.attn_dim = attn_dim
        self.reduction = reduction
        self.skip_mode = skip_mode
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.loss_weights = loss_weights
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma
        self.threshold = threshold
        self.dtype = dtype
        self.random_state = random_state
        self.eval_train = eval_train

    def _model_config(self, input_size) -> ModelConfig:
        return ModelConfig(
            levels=self.levels, base_channels=self.base_channels, input_size=input_size,
            residual=self.residual, use_cbam=self.use_cbam, use_hal=self.use_hal,
            hal_levels=self.hal_levels, patch_size=self.patch_size, attn_dim=self.attn_dim,
            reduction=self.reduction, skip_mode=self.skip_mode,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate, batch_size=self.batch_size,
            loss_weights=LossWeights(*self.loss_weights), focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma, seed=int(self.random_state or 0), threshold=self.threshold,
            max_steps=self.max_steps, eval_train=self.eval_train,
        )

    @staticmethod
    def _samples(X, y, prefix: str) -> list[Sample]:
        return [Sample(f"{prefix}{i:05d}", X[i, 0].astype(np.float64), y[i, 0]) for i in range(len(X))]

    def fit(self, X, y, X_val=None, y_val=None, log_path=None):
        dt = resolve_dtype(self.dtype)
        X = check_images(X, dt)
        y = check_masks(y, X)
        cfg = self._model_config(X.shape[2:])
        tcfg = self._train_config()
        val = []
        if X_val is not None:
            Xv = check_images(X_val, dt, "X_val")
            check_spatial(Xv, cfg.input_size, "X_val")
            val = self._samples(Xv, check_masks(y_val, Xv, "y_val"), "val")
        params = ModelParams.init(cfg, seed=tcfg.seed, dtype=dt)
        result = train(params, self._samples(X, y, "train"), val, tcfg, log_path=log_path)
        self.params_ = result.params
        self.best_params_ = result.best_params
        self.history_ = result.log
        self.n_steps_ = result.steps
        self.step_losses_ = result.step_losses
        self.adam_state_ = result.adam
        self.input_size_ = cfg.input_size
        return self

    def _checked(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_images(X, self.params_.dtype)
        check_spatial(X, self.input_size_)
        return X

    def decision_function(self, X) -> np.ndarray:
        """Logits, shape (N, H, W)."""
        X = self._checked(X)
        return np.concatenate([
            forward_logits(Tensor(X[i:i + 8]), self.params_, training=False).data
            for i in range(0, len(X), 8)
        ])[:, 0]

    def predict_proba(self, X) -> np.ndarray:
        """Foreground probabilities, shape (N, H, W)."""
        X = self._checked(X)
        return predict_proba(self.params_, X)[:, 0]

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y) -> float:
        """Micro-averaged Dice of ``predict(X)`` against ``y``."""
        pred = self.predict(X)
        truth = check_masks(y, pred[:, None])[:, 0]
        counts = ConfusionCounts()
        for p, g in zip(pred, truth):
            counts = counts + confusion_counts(p, g)
        return dice_score(counts)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(self.params_, path, getattr(self, "adam_state_", None), getattr(self, "n_steps_", 0))

    @classmethod
    def from_checkpoint(cls, path, dtype="float32", **kwargs) -> ResUNetSegmenter:
        ckpt = load_checkpoint(path, dtype)
        c = ckpt.config
        est = cls(levels=c.levels, base_channels=c.base_channels, residual=c.residual, use_cbam=c.use_cbam,
                  use_hal=c.use_hal, hal_levels=c.hal_levels, patch_size=c.patch_size, attn_dim=c.attn_dim,
                  reduction=c.reduction, skip_mode=c.skip_mode, dtype=dtype, **kwargs)
        est.params_ = ckpt.params
        est.best_params_ = ckpt.params
        est.input_size_ = c.input_size
        est.n_steps_ = ckpt.step
        if ckpt.adam is not None:
            est.adam_state_ = ckpt.adam
        return est
