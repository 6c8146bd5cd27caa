"""scikit-learn style wrappers around pretraining and fine-tuning.

``MAEPretrainer`` is an unsupervised transformer: ``fit`` runs masked
reconstruction and ``transform`` returns Class-token features.
``RISMAEClassifier`` fine-tunes a pretrained encoder (or trains one from
scratch) and exposes ``predict`` / ``predict_proba`` / ``score``.
"""

from __future__ import annotations

import copy

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .model import ModelConfig, RISMAE, load_checkpoint
from .train import TrainConfig, finetune_arrays, pretrain_arrays, reconstruction_loss
from .validation import check_iq, check_labels


class _ArchitectureMixin:
    def _model_config(self, frame_length: int, num_classes: int = 1) -> ModelConfig:
        return ModelConfig(
            frame_length=frame_length, patch_size=self.patch_size, enc_dim=self.enc_dim,
            enc_layers=self.enc_layers, enc_heads=self.enc_heads, dec_dim=self.dec_dim,
            dec_layers=self.dec_layers, dec_heads=self.dec_heads, mask_ratio=self.mask_ratio,
            num_classes=num_classes, dtype=self.dtype, init_seed=self.random_state,
            pos_init=self.pos_init, weight_init=self.weight_init, dropout=self.dropout,
        )


class MAEPretrainer(_ArchitectureMixin, TransformerMixin, BaseEstimator):
    """Masked-autoencoder pretraining on unlabeled IQ frames."""

    def __init__(self, patch_size=8, enc_dim=768, enc_layers=12, enc_heads=12, dec_dim=512,
                 dec_layers=4, dec_heads=8, mask_ratio=0.75, epochs=100, batch_size=1024,
                 lr=1e-4, warmup_frac=0.05, weight_decay=0.05, random_state=0,
                 dtype="float32", val_max_frames=None, pos_init="sincos",
                 weight_init="trunc_normal", dropout=0.0):
        self.patch_size = patch_size
        self.enc_dim = enc_dim
        self.enc_layers = enc_layers
        self.enc_heads = enc_heads
        self.dec_dim = dec_dim
        self.dec_layers = dec_layers
        self.dec_heads = dec_heads
        self.mask_ratio = mask_ratio
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_frac = warmup_frac
        self.weight_decay = weight_decay
        self.random_state = random_state
        self.dtype = dtype
        self.val_max_frames = val_max_frames
        self.pos_init = pos_init
        self.weight_init = weight_init
        self.dropout = dropout

    def train_config(self) -> TrainConfig:
        return TrainConfig(stage="pretrain", epochs=self.epochs, batch_size=self.batch_size,
                           base_lr=self.lr, warmup_frac=self.warmup_frac,
                           weight_decay=self.weight_decay, seed=self.random_state,
                           val_max_frames=self.val_max_frames)

    def fit(self, X, y=None, X_val=None):
        X = check_iq(X, dtype=self.dtype)
        if X_val is not None:
            X_val = check_iq(X_val, X.shape[2], dtype=self.dtype)
        self.model_ = RISMAE(self._model_config(X.shape[2]), with_decoder=True, with_head=False)
        self.trace_ = pretrain_arrays(self.model_, X, self.train_config(), X_val)
        self.frame_length_ = X.shape[2]
        self.n_features_out_ = self.enc_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_iq(X, self.frame_length_, dtype=self.dtype)
        return self.model_.features(X)

    def score(self, X, y=None):
        """Negative masked reconstruction loss (higher is better)."""
        check_is_fitted(self, "model_")
        X = check_iq(X, self.frame_length_, dtype=self.dtype)
        return -reconstruction_loss(self.model_, X, self.mask_ratio, self.random_state)

    @classmethod
    def from_checkpoint(cls, path):
        model = load_checkpoint(path, with_decoder=True)
        c = model.config
        est = cls(patch_size=c.patch_size, enc_dim=c.enc_dim, enc_layers=c.enc_layers,
                  enc_heads=c.enc_heads, dec_dim=c.dec_dim, dec_layers=c.dec_layers,
                  dec_heads=c.dec_heads, mask_ratio=c.mask_ratio, dtype=c.dtype,
                  random_state=c.init_seed, pos_init=c.pos_init, weight_init=c.weight_init,
                  dropout=c.dropout)
        est.model_ = model
        est.frame_length_ = c.frame_length
        est.n_features_out_ = c.enc_dim
        return est


class RISMAEClassifier(_ArchitectureMixin, ClassifierMixin, BaseEstimator):
    """Class-token linear head on the transformer encoder.

    ``pretrained`` may be a fitted :class:`MAEPretrainer`, a checkpoint
    path, or None for supervised training from random initialization with
    the architecture given by the remaining parameters.
    """

    def __init__(self, pretrained=None, freeze_encoder=False, patch_size=8, enc_dim=768,
                 enc_layers=12, enc_heads=12, dec_dim=512, dec_layers=4, dec_heads=8,
                 mask_ratio=0.75, epochs=50, batch_size=512, lr=1e-4, warmup_frac=0.1,
                 weight_decay=0.0, random_state=0, dtype="float32", val_max_frames=None,
                 pos_init="sincos", weight_init="trunc_normal", dropout=0.0):
        self.pretrained = pretrained
        self.freeze_encoder = freeze_encoder
        self.patch_size = patch_size
        self.enc_dim = enc_dim
        self.enc_layers = enc_layers
        self.enc_heads = enc_heads
        self.dec_dim = dec_dim
        self.dec_layers = dec_layers
        self.dec_heads = dec_heads
        self.mask_ratio = mask_ratio
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_frac = warmup_frac
        self.weight_decay = weight_decay
        self.random_state = random_state
        self.dtype = dtype
        self.val_max_frames = val_max_frames
        self.pos_init = pos_init
        self.weight_init = weight_init
        self.dropout = dropout

    def train_config(self) -> TrainConfig:
        return TrainConfig(stage="finetune", epochs=self.epochs, batch_size=self.batch_size,
                           base_lr=self.lr, warmup_frac=self.warmup_frac,
                           weight_decay=self.weight_decay, seed=self.random_state,
                           freeze_encoder=self.freeze_encoder,
                           val_max_frames=self.val_max_frames)

    def _initial_model(self, frame_length, num_classes) -> RISMAE:
        src = self.pretrained
        if src is None:
            return RISMAE(self._model_config(frame_length, num_classes), with_decoder=False)
        if isinstance(src, MAEPretrainer):
            check_is_fitted(src, "model_")
            model = copy.deepcopy(src.model_)
            model.clear_cache()
            model.drop_decoder()
            model.attach_head(num_classes=num_classes)
        else:
            model = load_checkpoint(src, with_decoder=False, num_classes=num_classes)
        if model.config.frame_length != frame_length:
            raise ValueError(
                f"pretrained encoder expects frames of length {model.config.frame_length}"
            )
        return model

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_iq(X, dtype=self.dtype)
        y = check_labels(y, X.shape[0])
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if X_val is not None:
            X_val = check_iq(X_val, X.shape[2], dtype=self.dtype)
            y_val = check_labels(y_val, X_val.shape[0])
            unseen = set(np.unique(y_val)) - set(self.classes_)
            if unseen:
                raise ValueError(f"validation labels {sorted(unseen)} not seen in y")
            y_val = np.searchsorted(self.classes_, y_val)
        self.model_ = self._initial_model(X.shape[2], len(self.classes_))
        self.trace_ = finetune_arrays(self.model_, X, y_enc, self.train_config(), X_val, y_val)
        self.frame_length_ = X.shape[2]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_iq(X, self.frame_length_, dtype=self.model_.config.dtype)
        return self.model_.predict_proba(X)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_iq(X, self.frame_length_, dtype=self.model_.config.dtype)
        return self.model_._batched(self.model_.forward_logits, X, 256)
