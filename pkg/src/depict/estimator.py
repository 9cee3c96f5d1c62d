"""Scikit-learn style front end."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autoencoder as ae
from . import trainer as tr


def _as_images(X, expected=None):
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, C, H, W) or (N, H, W), got {X.shape}")
    if X.min() < -1.0 or X.max() > 1.0:
        raise ValueError("intensities must lie in [-1, 1]; see depict.data.normalize_to_range")
    if expected is not None and tuple(X.shape[1:]) != tuple(expected):
        raise ValueError(f"X has per-sample shape {X.shape[1:]}, model expects {tuple(expected)}")
    return X


class DEPICT(ClusterMixin, TransformerMixin, BaseEstimator):
    """Deep clustering of images.

    ``fit`` trains the autoencoder and softmax head with the chosen
    ``strategy``; ``transform`` returns the clean embedding and ``predict``
    the cluster index of new images. With ``strategy="semi-supervised"``,
    ``y`` holds class indices for labelled samples and ``-1`` elsewhere.

    ``architecture`` is a dataset name from the built-in table, an
    :class:`~depict.autoencoder.ArchitectureSpec`, or ``None`` to pick one
    from the image size.
    """

    def __init__(self, n_clusters=10, strategy="mda", architecture=None, learning_rate=1e-4,
                 dropout_rate=0.1, batch_size=100, warmup_epochs=20, max_epochs=300,
                 convergence_threshold=0.001, head_fit_iters=10, random_state=0):
        self.n_clusters = n_clusters
        self.strategy = strategy
        self.architecture = architecture
        self.learning_rate = learning_rate
        self.dropout_rate = dropout_rate
        self.batch_size = batch_size
        self.warmup_epochs = warmup_epochs
        self.max_epochs = max_epochs
        self.convergence_threshold = convergence_threshold
        self.head_fit_iters = head_fit_iters
        self.random_state = random_state

    def _config(self):
        return tr.TrainConfig(
            learning_rate=self.learning_rate, dropout_rate=self.dropout_rate,
            batch_size=self.batch_size, warmup_epochs=self.warmup_epochs,
            max_epochs=self.max_epochs, convergence_threshold=self.convergence_threshold,
            head_fit_iters=self.head_fit_iters, seed=self.random_state,
        )

    def _arch(self, shape):
        if isinstance(self.architecture, ae.ArchitectureSpec):
            arch = self.architecture
            if arch.embedding_dim != self.n_clusters:
                raise ValueError("architecture embedding_dim must equal n_clusters")
            return arch
        if isinstance(self.architecture, str):
            return ae.arch_for_dataset(self.architecture, self.n_clusters)
        return ae.arch_for_shape(shape, self.n_clusters)

    def fit(self, X, y=None):
        if self.strategy not in tr.STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {tr.STRATEGIES}")
        X = _as_images(X)
        arch = self._arch(X.shape[1:])
        if tuple(X.shape[1:]) != arch.input_shape:
            raise ValueError(f"images of shape {X.shape[1:]} do not fit architecture {arch.input_shape}")
        config = self._config()
        model = ae.DepictModel.initialize(arch, tr.Streams(config.seed).init)
        if self.strategy == "semi-supervised":
            if y is None:
                raise ValueError("semi-supervised fitting needs y with -1 for unlabelled samples")
            y = np.asarray(y, dtype=int)
            if y.shape != (len(X),):
                raise ValueError(f"y must have shape ({len(X)},), got {y.shape}")
            idx = np.flatnonzero(y >= 0)
            state = tr.train_semi_supervised(model, X, idx, y[idx], config)
        elif self.strategy == "embedding-only":
            state, _ = tr.train_embedding_only(model, X, config)
        else:
            train = {"mda": tr.train_mda, "sda": tr.train_sda, "rda": tr.train_rda}[self.strategy]
            state = train(model, X, config)
        self.model_ = model
        self.state_ = state
        self.labels_ = np.asarray(state.labels)
        self.n_iter_ = state.epoch
        self.converged_ = state.converged
        self.history_ = [h.as_dict() for h in state.history]
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return ae.embed(self.model_, _as_images(X, self.model_.arch.input_shape))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return tr.predict_proba(self.model_, _as_images(X, self.model_.arch.input_shape))

    def predict(self, X):
        return tr.hard_assignments(self.predict_proba(X))
