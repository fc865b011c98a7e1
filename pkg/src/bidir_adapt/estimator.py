"""scikit-learn style wrapper around the trainer.

>>> clf = BidirectionalAdaptationClassifier(epochs=50, arch="desk")
>>> clf.fit(X_source, y_source, X_target, target_val_idx=idx, y_target_val=y_val)
>>> clf.predict(X_target)
"""

from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from .config import ExperimentConfig, TrainingSchedule
from .datasets import DomainPair
from .inference import combine, select_sigma_from_probs, translate
from .losses import LossWeights
from .models import ArchConfig
from .trainer import EVAL_NOISE_OFFSET, Trainer
from .validation import check_images, check_labels, check_same_geometry


class BidirectionalAdaptationClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Unsupervised domain adaptation with two coupled image-translation GANs.

    ``fit`` takes labeled source images and unlabeled target images (pixel
    values in [0, 255], shape ``(N, H, W[, C])``). Predictions on target images
    combine ``C_s`` applied to the source-style translation with ``C_t`` applied
    to the raw image, using ``sigma``; ``sigma="auto"`` picks it on the
    labeled validation subset passed to ``fit``.

    ``transform`` returns target images translated to the source style.
    """

    def __init__(self, epochs=500, eta_activation_epoch=None, batch_size=32,
                 alpha=1.0, beta=10.0, gamma=1.0, mu=10.0, eta=1.0, nu=1.0,
                 lr_generator=1e-4, lr_discriminator=1e-4, lr_classifier=1e-4,
                 arch="full", consistency="class", sigma="auto", random_state=0):
        self.epochs = epochs
        self.eta_activation_epoch = eta_activation_epoch
        self.batch_size = batch_size
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.mu = mu
        self.eta = eta
        self.nu = nu
        self.lr_generator = lr_generator
        self.lr_discriminator = lr_discriminator
        self.lr_classifier = lr_classifier
        self.arch = arch
        self.consistency = consistency
        self.sigma = sigma
        self.random_state = random_state

    def _arch(self):
        if isinstance(self.arch, ArchConfig):
            return self.arch
        if self.arch == "full":
            return ArchConfig()
        if self.arch == "desk":
            return ArchConfig.desk()
        if isinstance(self.arch, dict):
            return ArchConfig.from_dict(self.arch)
        raise ValueError(f"arch must be 'full', 'desk', a dict or an ArchConfig; got {self.arch!r}")

    def _config(self) -> ExperimentConfig:
        eta_epoch = self.epochs // 2 if self.eta_activation_epoch is None else self.eta_activation_epoch
        return ExperimentConfig(
            arch=self._arch(),
            loss_weights=LossWeights(self.alpha, self.beta, self.gamma, self.mu, self.eta, self.nu),
            schedule=TrainingSchedule(epochs=self.epochs, eta_activation_epoch=eta_epoch,
                                      batch_size=self.batch_size, lr_generator=self.lr_generator,
                                      lr_discriminator=self.lr_discriminator, lr_classifier=self.lr_classifier,
                                      checkpoint_every=max(self.epochs, 1), eval_every=max(self.epochs, 1)),
            consistency=self.consistency, seed=self.random_state,
        )

    def fit(self, X, y, X_target, target_val_idx=None, y_target_val=None):
        X = check_images(X)
        X_target = check_images(X_target, "X_target")
        check_same_geometry(X, X_target)
        y = check_labels(y, len(X))
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes in y")
        y_enc = self._encoder.transform(y).astype(np.int64)

        val_idx = np.asarray([] if target_val_idx is None else target_val_idx, dtype=np.int64)
        if (y_target_val is None) != (target_val_idx is None):
            raise ValueError("target_val_idx and y_target_val must be given together")
        pair = DomainPair(
            source_images=X, source_labels=y_enc, target_images=X_target, target_labels=None,
            target_val_idx=val_idx, n_classes=len(self.classes_),
        )
        config = self._config()
        self.trainer_ = Trainer(config, pair)
        try:
            self.trainer_.train()
        finally:
            self.trainer_.close()
        self.image_shape_ = X.shape[1:]

        if self.sigma == "auto":
            if len(val_idx):
                yv = self._encoder.transform(check_labels(y_target_val, len(val_idx), "y_target_val"))
                p_s, p_t, _ = self.trainer_.target_probabilities(X_target[val_idx])
                self.sigma_ = select_sigma_from_probs(p_s, p_t, yv).sigma
            else:
                warnings.warn("no labeled target validation data; using sigma=0.5", UserWarning, stacklevel=2)
                self.sigma_ = 0.5
        else:
            if not 0.0 <= float(self.sigma) <= 1.0:
                raise ValueError("sigma must be 'auto' or a value in [0, 1]")
            self.sigma_ = float(self.sigma)
        return self

    def _check_X(self, X):
        check_is_fitted(self, "trainer_")
        X = check_images(X)
        if X.shape[1:] != self.image_shape_:
            raise ValueError(f"expected images of shape {self.image_shape_}, got {X.shape[1:]}")
        return X

    def branch_proba(self, X):
        """``(p_s, p_t)``: C_s on translated images and C_t on raw images."""
        X = self._check_X(X)
        p_s, p_t, _ = self.trainer_.target_probabilities(X)
        return p_s, p_t

    def predict_proba(self, X):
        p_s, p_t = self.branch_proba(X)
        return combine(p_s, p_t, self.sigma_)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(1)]

    def transform(self, X, direction="target_to_source"):
        """Translate images with G_ts (default) or G_st; output in [0, 255]."""
        if direction not in ("target_to_source", "source_to_target"):
            raise ValueError("direction must be 'target_to_source' or 'source_to_target'")
        X = self._check_X(X)
        nets = self.trainer_.nets
        G = nets.G_ts if direction == "target_to_source" else nets.G_st
        return translate(G, X, seed=self.random_state + EVAL_NOISE_OFFSET)
