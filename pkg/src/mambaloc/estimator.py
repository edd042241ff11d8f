"""Estimator-style front end: construct with hyperparameters, ``fit`` on
image/mask arrays, ``predict`` binary masks, ``score`` mean pixel F1.
"""

from __future__ import annotations

import inspect

import numpy as np

from .metrics import pixel_scores
from .model import ModelConfig, build
from .tensor import Tensor
from .train import TrainConfig, train_model

VARIANTS = ("default", "tiny", "micro")


def check_image_batch(X) -> np.ndarray:
    """Validate and return images as a float64 (N, H, W, 3) array in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"images must be (N, H, W, 3), got {X.shape}")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_mask_batch(y, images: np.ndarray) -> np.ndarray:
    """Validate masks against an image batch; returns (N, H, W) binary."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2:
        y = y[None]
    if y.ndim == 4 and y.shape[-1] == 1:
        y = y[..., 0]
    if y.shape != images.shape[:3]:
        raise ValueError(f"masks {y.shape} do not match images {images.shape[:3]}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("masks must be binary")
    return y


class ForgeryLocalizer:
    """Per-pixel tamper localizer with a fit/predict interface.

    Constructor arguments are hyperparameters only; ``fit`` builds and
    trains the network, storing it as ``model_`` with the training curve
    in ``history_``.
    """

    def __init__(self, variant: str = "tiny", use_cab: bool = True,
                 epochs: int = 20, batch_size: int = 8, lr: float = 1e-4,
                 weight_decay: float = 0.01, lambda_dice: float = 1.0,
                 lambda_focal: float = 1.0, augment_ops: tuple = (),
                 val_fraction: float = 0.1, threshold: float = 0.5,
                 seed: int = 0):
        self.variant = variant
        self.use_cab = use_cab
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.lambda_dice = lambda_dice
        self.lambda_focal = lambda_focal
        self.augment_ops = augment_ops
        self.val_fraction = val_fraction
        self.threshold = threshold
        self.seed = seed

    @classmethod
    def _param_names(cls):
        return [p for p in inspect.signature(cls.__init__).parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "ForgeryLocalizer":
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"unknown parameter {key!r} for ForgeryLocalizer")
            setattr(self, key, value)
        return self

    def _config(self) -> ModelConfig:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        factory = {"default": ModelConfig, "tiny": ModelConfig.tiny,
                   "micro": ModelConfig.micro}[self.variant]
        return factory(use_cab=self.use_cab)

    def fit(self, X, y, validation=None) -> "ForgeryLocalizer":
        """Train on images X (N, H, W, 3) and masks y (N, H, W).

        ``validation`` may supply an explicit (X_val, y_val) pair;
        otherwise the trailing ``val_fraction`` of the data is held out
        for the plateau schedule.
        """
        X = check_image_batch(X)
        y = check_mask_batch(y, X)
        pairs = [(X[i], y[i]) for i in range(len(X))]
        if validation is not None:
            Xv = check_image_batch(validation[0])
            yv = check_mask_batch(validation[1], Xv)
            train_pairs = pairs
            val_pairs = [(Xv[i], yv[i]) for i in range(len(Xv))]
        else:
            n_val = max(1, int(round(self.val_fraction * len(pairs))))
            if n_val >= len(pairs):
                raise ValueError(f"val_fraction {self.val_fraction} leaves no "
                                 f"training data for {len(pairs)} samples")
            train_pairs = pairs[:-n_val]
            val_pairs = pairs[-n_val:]
        self.model_ = build(self._config(), seed=self.seed)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                          lr=self.lr, weight_decay=self.weight_decay,
                          lambda_dice=self.lambda_dice,
                          lambda_focal=self.lambda_focal,
                          augment_ops=tuple(self.augment_ops))
        self.history_ = train_model(self.model_, train_pairs, val_pairs, cfg,
                                    seed=self.seed, log=lambda line: None)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this ForgeryLocalizer is not fitted; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel tamper probabilities, (N, H, W) in (0, 1)."""
        self._require_fitted()
        X = check_image_batch(X)
        self.model_.eval()
        dtype = next(iter(self.model_.named_parameters()))[1].data.dtype
        out = []
        for start in range(0, len(X), self.batch_size):
            chunk = Tensor(X[start:start + self.batch_size].astype(dtype))
            out.append(self.model_(chunk).data[..., 0].astype(np.float64))
        return np.concatenate(out, axis=0)

    def predict(self, X) -> np.ndarray:
        """Thresholded binary masks, (N, H, W)."""
        return (self.predict_proba(X) >= self.threshold).astype(np.float64)

    def score(self, X, y) -> float:
        """Mean per-image pixel F1 of predictions against masks y."""
        X = check_image_batch(X)
        y = check_mask_batch(y, X)
        probs = self.predict_proba(X)
        return float(np.mean([
            pixel_scores(probs[i], y[i], threshold=self.threshold).f1
            for i in range(len(X))
        ]))
