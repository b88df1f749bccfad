"""scikit-learn style wrapper around training and anomaly scoring."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ContractError
from .anomaly_map import SmoothingSpec, anomap, image_score, reconstruct
from .corruption import CorruptionConfig
from .network import conv_autoencoder, dense_autoencoder
from .training import TrainSchedule, train


def _check_images(X, shape=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4 or X.shape[-1] not in (1, 3):
        raise ContractError(f"expected (n, h, w) or (n, h, w, c) images, got {X.shape}")
    if len(X) == 0:
        raise ContractError("no images")
    if not np.all(np.isfinite(X)):
        raise ContractError("images contain non-finite values")
    if shape is not None and X.shape[1:] != tuple(shape):
        raise ContractError(f"images have shape {X.shape[1:]}, fitted on {tuple(shape)}")
    return X


class FilteringAutoencoder(TransformerMixin, BaseEstimator):
    """Reconstruction-based anomaly detector trained on corrupted pairs.

    ``fit`` takes normal images only. ``transform`` returns reconstructions,
    ``anomaly_maps`` the smoothed difference maps and ``anomaly_score`` the
    image scores (higher is more anomalous). ``predict`` follows the outlier
    convention of scikit-learn: -1 for anomalies, 1 for normal images, with
    the threshold set at the ``1 - contamination`` quantile of the training
    scores.

    Parameters
    ----------
    arch : {"dense", "conv"}
    hidden : tuple of int or None
        Dense hidden sizes; None gives d/2, d/4, d/2.
    noise_max : float
        Upper end of the noise level range; 0 disables the shared noise.
    loss : {"fae", "dae", "weighted"}
    delta : {"mse", "ssim", "gms"}
    k, n : int
        Mean filter size and repetitions of the anomaly map.
    random_state : int
    """

    def __init__(self, arch="dense", hidden=(256,), filters=8, depth=3, downsample=0,
                 activation="tanh", final_activation="identity", steps=1000, batch_size=8,
                 lr=1e-4, loss="fae", weight_lambda=0.5, noise_max=0.1, corruption=None,
                 delta="mse", k=7, n=2, reduction="sum", contamination=0.01,
                 random_state=0):
        self.arch = arch
        self.hidden = hidden
        self.filters = filters
        self.depth = depth
        self.downsample = downsample
        self.activation = activation
        self.final_activation = final_activation
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.loss = loss
        self.weight_lambda = weight_lambda
        self.noise_max = noise_max
        self.corruption = corruption
        self.delta = delta
        self.k = k
        self.n = n
        self.reduction = reduction
        self.contamination = contamination
        self.random_state = random_state

    def _network_config(self, shape):
        if self.arch == "dense":
            return dense_autoencoder(shape, self.hidden, self.activation, self.final_activation)
        if self.arch == "conv":
            return conv_autoencoder(shape, self.filters, 3, self.depth, self.activation,
                                    self.final_activation, self.downsample)
        raise ContractError(f"unknown arch {self.arch!r}")

    def fit(self, X, y=None):
        X = _check_images(X)
        if not 0.0 <= self.contamination < 0.5:
            raise ContractError("contamination must lie in [0, 0.5)")
        corruption = (self.corruption or CorruptionConfig()).replace(noise_max=self.noise_max)
        schedule = TrainSchedule(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                                 loss=self.loss, weight_lambda=self.weight_lambda,
                                 log_every=max(1, min(50, self.steps or 1)),
                                 seed=int(self.random_state or 0))
        self.spec_ = SmoothingSpec(self.k, self.n)
        self.params_, self.history_ = train(list(X), self._network_config(X.shape[1:]),
                                            corruption, schedule)
        self.image_shape_ = X.shape[1:]
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.threshold_ = float(np.quantile(self.anomaly_score(X), 1.0 - self.contamination))
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = _check_images(X, self.image_shape_)
        return np.stack([reconstruct(self.params_, x) for x in X])

    def anomaly_maps(self, X):
        check_is_fitted(self, "params_")
        X = _check_images(X, self.image_shape_)
        return np.stack([anomap(x, self.params_, self.delta, self.spec_) for x in X])

    def anomaly_score(self, X):
        return np.array([image_score(m, self.reduction) for m in self.anomaly_maps(X)])

    def score_samples(self, X):
        """Opposite of the anomaly score (higher is more normal)."""
        return -self.anomaly_score(X)

    def decision_function(self, X):
        return self.threshold_ - self.anomaly_score(X)

    def predict(self, X):
        check_is_fitted(self, "threshold_")
        return np.where(self.anomaly_score(X) > self.threshold_, -1, 1)
