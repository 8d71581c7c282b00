"""Sklearn-style estimator face over classifier construction and training.

`LesionClassifier` follows the fit/predict contract so the pipeline composes
with the wider ecosystem (cloning, grid search, pipelines): constructor
arguments are stored verbatim, learned state lands in trailing-underscore
attributes, and `get_params`/`set_params` come from ``BaseEstimator``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import training
from .augment import AugmentationPolicy
from .errors import ValidationError
from .labels import NUM_CLASSES
from .models import ModelConfig, build_classifier
from .validation import check_image_batch, check_labels


class LesionClassifier(BaseEstimator, ClassifierMixin):
    """Fine-tunable image classifier with a pluggable pre-trained backbone.

    Parameters mirror the training configuration. X is an (N, H, W, 3)
    float array with values in [0, 1]; y holds integer class indices.
    When no validation set is passed to :meth:`fit`, a stratified
    `val_fraction` of the training data is held out for the plateau
    schedule and checkpoint selection.
    """

    def __init__(self, backbone="toy_cnn", num_classes=NUM_CLASSES, dropout=0.5,
                 learning_rate=1e-3, epochs=5, batch_size=16, lr_patience=5,
                 lr_factor=0.1, min_lr=1e-6, freeze_backbone=False, weights="random",
                 augmentation=None, val_fraction=0.1, seed=0, checkpoint_dir=None):
        self.backbone = backbone
        self.num_classes = num_classes
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_patience = lr_patience
        self.lr_factor = lr_factor
        self.min_lr = min_lr
        self.freeze_backbone = freeze_backbone
        self.weights = weights
        self.augmentation = augmentation
        self.val_fraction = val_fraction
        self.seed = seed
        self.checkpoint_dir = checkpoint_dir

    def _config(self, input_side: int) -> ModelConfig:
        return ModelConfig(
            backbone=self.backbone, num_classes=self.num_classes, dropout=self.dropout,
            learning_rate=self.learning_rate, epochs=self.epochs,
            batch_size=self.batch_size, lr_patience=self.lr_patience,
            lr_factor=self.lr_factor, min_lr=self.min_lr, seed=self.seed,
            freeze_backbone=self.freeze_backbone, input_side=input_side,
        )

    def _holdout(self, X, y):
        """Stratified validation holdout: last `val_fraction` of each class
        after a seeded shuffle."""
        rng = np.random.default_rng(self.seed)
        val_idx = []
        for c in np.unique(y):
            members = np.flatnonzero(y == c)
            members = members[rng.permutation(len(members))]
            n_val = max(1, round(self.val_fraction * len(members)))
            if n_val >= len(members):
                raise ValidationError(
                    f"class {c} has too few samples ({len(members)}) for a "
                    f"{self.val_fraction} validation holdout"
                )
            val_idx.extend(members[:n_val])
        val_mask = np.zeros(len(y), dtype=bool)
        val_mask[val_idx] = True
        return X[~val_mask], y[~val_mask], X[val_mask], y[val_mask]

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_image_batch(X, require_square=True)
        y = check_labels(y, num_classes=self.num_classes, length=len(X))
        if len(X) == 0:
            raise ValidationError("cannot fit on an empty dataset")

        if X_val is None:
            X_train, y_train, X_val, y_val = self._holdout(X, y)
        else:
            X_train, y_train = X, y
            X_val = check_image_batch(X_val, require_square=True)
            y_val = check_labels(y_val, num_classes=self.num_classes, length=len(X_val))

        policy = self.augmentation
        if policy is not None and not isinstance(policy, AugmentationPolicy):
            raise ValidationError("augmentation must be an AugmentationPolicy or None")

        config = self._config(input_side=int(X.shape[1]))
        handle = build_classifier(config, weights=self.weights)
        result = training.train(
            handle, X_train, y_train, X_val, y_val, config,
            policy=policy, out_dir=self.checkpoint_dir,
        )
        # restore the best-validation weights (kept in memory, or reload the
        # checkpoint when one was written to disk)
        if result.best_state is not None:
            handle.net.load_state_dict(result.best_state)
        elif result.best_checkpoint is not None:
            import torch

            state = torch.load(result.best_checkpoint / "weights.pt",
                               map_location="cpu", weights_only=True)
            handle.net.load_state_dict(state)

        self.model_ = handle
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.arange(self.num_classes)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_image_batch(X, require_square=True)
        return self.model_.forward(X)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)
