"""scikit-learn style facade over the training loop and generator."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .losses import DEFAULT_LOCATIONS, DEFAULT_TAU
from .training import TrainConfig, Trainer, UnpairedDataset


def _validate_images(X, name):
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[3] != 3:
        raise ValueError(f"{name} must have shape (n_images, H, W, 3)")
    if X.shape[1] % 16 or X.shape[2] % 16:
        raise ValueError(f"{name} spatial size must be divisible by 16")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return X


class UnpairedDehazer(BaseEstimator, TransformerMixin):
    """Unpaired dehazing model with a fit/transform interface.

    ``fit`` takes two independent image collections — hazy inputs as X and
    clean references as y — both (n, H, W, 3) float arrays in [0, 1].
    ``transform`` maps hazy images to restored ones.
    """

    def __init__(self, variant="T", epochs=5, decay_start_epoch=None,
                 lr=2e-4, batch_size=1, seed=0, tau=DEFAULT_TAU,
                 locations=DEFAULT_LOCATIONS):
        self.variant = variant
        self.epochs = epochs
        self.decay_start_epoch = decay_start_epoch
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.tau = tau
        self.locations = locations

    def _config(self, image_size):
        decay = self.decay_start_epoch
        if decay is None:
            decay = max(1, self.epochs // 2)
        return TrainConfig(
            variant=self.variant, epochs=self.epochs,
            decay_start_epoch=decay, lr=self.lr,
            batch_size=self.batch_size, image_size=image_size,
            seed=self.seed, tau=self.tau, locations=self.locations)

    def fit(self, X, y):
        X = _validate_images(X, "X")
        y = _validate_images(y, "y")
        if X.shape[1:] != y.shape[1:]:
            raise ValueError("hazy and clean images must share one size")
        hazy = [img.transpose(2, 0, 1) * 2.0 - 1.0 for img in X]
        clean = [img.transpose(2, 0, 1) * 2.0 - 1.0 for img in y]
        self.trainer_ = Trainer(self._config(int(X.shape[1])))
        self.trainer_.fit(UnpairedDataset(hazy, clean))
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "trainer_")
        X = _validate_images(X, "X")
        out = np.empty_like(X)
        for i, img in enumerate(X):
            x = (img.transpose(2, 0, 1) * 2.0 - 1.0)[None]
            restored = self.trainer_.restore(x)[0]
            out[i] = ((restored + 1.0) / 2.0).transpose(1, 2, 0)
        return np.clip(out, 0.0, 1.0)
