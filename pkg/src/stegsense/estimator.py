"""scikit-learn style wrapper around the detector."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .losses import LossConfig
from .network import DEFAULT_ACTIVATIONS, DEFAULT_CHANNELS, DEFAULT_POOLS, NetworkConfig, init_model
from .trainer import OptimConfig, TrainState, fit, predict, predict_stego


def check_images(X) -> np.ndarray:
    """Coerce to float64 [N,1,H,W] raw pixel values and reject anything else."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ValueError(f"expected grayscale images shaped [N,H,W] or [N,1,H,W], got {np.shape(X)}")
    if arr.shape[0] == 0:
        raise ValueError("no images given")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain NaN or infinity")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("pixel values must lie in [0, 255]")
    return arr


def check_pair_labels(y, n: int) -> np.ndarray:
    """Labels must alternate cover (0) / stego (1) so that rows 2i and 2i+1 form a pair."""
    labels = np.asarray(y).astype(np.int64).ravel()
    if len(labels) != n:
        raise ValueError(f"{n} images but {len(labels)} labels")
    if n % 2 or np.any(labels[0::2] != 0) or np.any(labels[1::2] != 1):
        raise ValueError("training data must be interleaved cover/stego pairs: y = [0, 1, 0, 1, ...]")
    return labels


class SteganalysisDetector(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Cover (0) versus stego (1) classifier.

    ``fit`` takes images interleaved as [c0, s0, c1, s1, ...] because the
    contrastive term and the batch sampler work on cover/stego pairs.
    ``transform`` returns the pooled feature vectors.
    """

    def __init__(self, block_channels=DEFAULT_CHANNELS, activation_schedule=DEFAULT_ACTIVATIONS,
                 pool_schedule=DEFAULT_POOLS, constraint="ours", use_batch_norm=True, tlu_T=3.0,
                 margin=3.0, lam=0.05, epochs=300, pairs_per_batch=16, lr_scale=1.0,
                 weight_decay=5e-4, converge_window=20, converge_tol=1e-3, random_state=0):
        self.block_channels = block_channels
        self.activation_schedule = activation_schedule
        self.pool_schedule = pool_schedule
        self.constraint = constraint
        self.use_batch_norm = use_batch_norm
        self.tlu_T = tlu_T
        self.margin = margin
        self.lam = lam
        self.epochs = epochs
        self.pairs_per_batch = pairs_per_batch
        self.lr_scale = lr_scale
        self.weight_decay = weight_decay
        self.converge_window = converge_window
        self.converge_tol = converge_tol
        self.random_state = random_state

    def _configs(self):
        net = NetworkConfig(tuple(self.block_channels), 3, tuple(self.pool_schedule),
                            tuple(self.activation_schedule), self.tlu_T, self.use_batch_norm, self.constraint)
        optim = OptimConfig(weight_decay=self.weight_decay, lr_scale=self.lr_scale, epochs=self.epochs,
                            seed=self.random_state, pairs_per_batch=self.pairs_per_batch,
                            converge_window=self.converge_window, converge_tol=self.converge_tol)
        return net, LossConfig(self.margin, self.lam), optim

    def fit(self, X, y, eval_set=None):
        images = check_images(X)
        check_pair_labels(y, len(images))
        net, loss, optim = self._configs()
        covers, stegos = images[0::2, 0], images[1::2, 0]
        if eval_set is not None:
            vx = check_images(eval_set[0])
            check_pair_labels(eval_set[1], len(vx))
            val = (vx[0::2, 0], vx[1::2, 0])
        else:
            val = (covers, stegos)
        self.model_ = init_model(net, self.random_state)
        self.state_ = fit(self.model_, (covers, stegos), val, loss, optim, TrainState(lr_scale=self.lr_scale))
        self.n_iter_ = self.state_.epoch
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        p, _ = predict(self.model_, check_images(X))
        return np.column_stack([1.0 - p, p])

    def decision_function(self, X) -> np.ndarray:
        return self.predict_proba(X)[:, 1]

    def predict(self, X) -> np.ndarray:
        return predict_stego(self.decision_function(X))

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        _, feats = predict(self.model_, check_images(X))
        return feats
