"""scikit-learn estimator wrapper around the training engine.

>>> clf = MultiLevelResNetClassifier(arch="resnet20", epochs=30)   # doctest: +SKIP
>>> clf.fit(X_train, y_train).score(X_test, y_test)                # doctest: +SKIP

``X`` is a batch of RGB images, either ``(n, 3, H, W)`` or flattened
``(n, 3*H*W)`` in CIFAR plane order; uint8 values are scaled to [0, 1],
float values must already lie in [0, 1].
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .builders import build_arch
from .data import Dataset, normalize
from .model import Model
from .trainer import TrainConfig, train_epoch
from .transform import apply_multilevel_transform

__all__ = ["MultiLevelResNetClassifier", "check_images"]


def check_images(X, channels: int = 3) -> np.ndarray:
    """Validate an image batch and return it as float64 (n, C, H, W) in [0, 1]."""
    X = np.asarray(X)
    is_bytes = X.dtype == np.uint8
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim == 2:
        side = int(round(np.sqrt(X.shape[1] / channels)))
        if channels * side * side != X.shape[1]:
            raise ValueError(f"cannot reshape {X.shape[1]} features into {channels} square planes")
        X = X.reshape(len(X), channels, side, side)
    if X.ndim != 4 or X.shape[1] != channels:
        raise ValueError(f"expected images of shape (n, {channels}, H, W), got {X.shape}")
    if is_bytes:
        X = X / 255.0
    elif X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("float images must have values in [0, 1]")
    return X


class MultiLevelResNetClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Residual image classifier with multi-level feature forwarding.

    With ``multilevel=True`` the activation entering every spatially
    reducing block is pooled (``pool_mode``) and fed to the classifier
    next to the usual global-average-pooled features.  ``transform``
    returns exactly that classifier input.

    Training follows step-decayed SGD with momentum: ``lr`` is multiplied by
    ``lr_decay`` every ``lr_step`` epochs.
    """

    def __init__(
        self,
        arch: str = "resnet20",
        width_mult: int = 1,
        combine: str = "add",
        multilevel: bool = True,
        pool_mode: str = "channel_mean",
        epochs: int = 30,
        batch_size: int = 10,
        lr: float = 0.01,
        lr_decay: float = 0.1,
        lr_step: int = 100,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        augment: bool = True,
        normalize: bool = True,
        precision: str = "single",
        random_state: int = 0,
    ):
        self.arch = arch
        self.width_mult = width_mult
        self.combine = combine
        self.multilevel = multilevel
        self.pool_mode = pool_mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_step = lr_step
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.augment = augment
        self.normalize = normalize
        self.precision = precision
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            arch=self.arch, width_mult=self.width_mult, combine=self.combine, transform=self.multilevel,
            pool_mode=self.pool_mode, epochs=self.epochs, batch_size=self.batch_size, lr0=self.lr,
            lr_decay_factor=self.lr_decay, lr_step_epochs=self.lr_step, momentum=self.momentum,
            weight_decay=self.weight_decay, seed=self.random_state, precision=self.precision,
            augment=self.augment, normalize=self.normalize,
        )

    def fit(self, X, y):
        cfg = self._config()
        X = check_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.image_shape_ = X.shape[1:]
        if self.normalize:
            self.mean_ = tuple(X.mean(axis=(0, 2, 3)))
            self.std_ = tuple(np.maximum(X.std(axis=(0, 2, 3)), 1e-8))
        else:
            self.mean_, self.std_ = (0.0,) * 3, (1.0,) * 3
        graph = build_arch(self.arch, len(self.classes_), self.width_mult, self.combine, self.pool_mode,
                           input_size=X.shape[2])
        if self.multilevel and self.arch != "newnet":
            graph = apply_multilevel_transform(graph, self.pool_mode)
        self.model_ = Model(graph, seed=self.random_state, dtype=self.precision)
        ds = Dataset.from_arrays(X, y_idx)
        ds.mean, ds.std = self.mean_, self.std_
        velocities = [np.zeros_like(p.data) for p in self.model_.parameters()]
        rng = np.random.default_rng([self.random_state, 1])
        self.loss_curve_ = []
        for epoch in range(cfg.epochs):
            loss, _ = train_epoch(self.model_, velocities, ds, cfg, rng, epoch)
            self.loss_curve_.append(loss)
        self.model_.eval()
        return self

    def _prepare(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        if X.shape[1:] != self.image_shape_:
            raise ValueError(f"expected images of shape {self.image_shape_}, got {X.shape[1:]}")
        return normalize(X, self.mean_, self.std_).astype(self.model_.dtype)

    def decision_function(self, X) -> np.ndarray:
        x = self._prepare(X)
        return self.model_.predict_logits(x)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X) -> np.ndarray:
        """Concatenated multi-level features fed to the final linear layer."""
        x = self._prepare(X)
        self.model_.eval()
        return np.concatenate([self.model_.features(x[i : i + 256]).data for i in range(0, len(x), 256)])
