"""scikit-learn compatible wrappers.

``PretextFeatureExtractor`` learns a backbone from unlabeled images and
transforms images into pooled feature vectors; ``ProbeClassifier`` trains
the downstream probe in frozen or unfrozen mode. Both follow the estimator
conventions (constructor stores parameters verbatim, learned state ends in
an underscore), so ``get_params``/``set_params``/``clone`` and pipelines
work as usual.
"""

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import CifarSplit, build_pretext_random, build_pretext_separate, normalization_stats
from .downstream import DownstreamConfig, predict_labels, train_downstream
from .geometry import apply_transform, make_transform_set
from .models import Checkpoint, images_to_tensor, model_from_checkpoint
from .pretext import PretextTrainConfig, pretext_accuracy, train_pretext
from .validation import check_class_labels, check_images


def _images(X):
    if isinstance(X, CifarSplit):
        return X.images
    return check_images(X)


class GeometricTransform(TransformerMixin, BaseEstimator):
    """Stateless transformer applying one member of a transform set."""

    def __init__(self, transform_set="rot4", label=0):
        self.transform_set = transform_set
        self.label = label

    def fit(self, X, y=None):
        _images(X)
        self.tset_ = make_transform_set(self.transform_set)
        return self

    def transform(self, X):
        check_is_fitted(self, "tset_")
        return apply_transform(_images(X), self.tset_, self.label)


class PretextFeatureExtractor(TransformerMixin, BaseEstimator):
    """Learn features by predicting which geometric transform was applied.

    Parameters mirror :class:`geossl.pretext.PretextTrainConfig`.
    ``method="random"`` builds the dataset with ``copies`` random
    transforms per image instead of every transform once.
    """

    def __init__(self, transform_set="rot4", arch="vgg16", num_blocks=2, width_multiplier=1.0,
                 method="separate", copies=None, epochs=100, batch_size=128, base_lr=1e-3,
                 optimizer="rmsprop", weight_decay=0.0, random_state=0, device=None, out_dir=None):
        self.transform_set = transform_set
        self.arch = arch
        self.num_blocks = num_blocks
        self.width_multiplier = width_multiplier
        self.method = method
        self.copies = copies
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.random_state = random_state
        self.device = device
        self.out_dir = out_dir

    def _config(self):
        return PretextTrainConfig(
            transform_set=self.transform_set, arch=self.arch, num_blocks=self.num_blocks,
            width_multiplier=self.width_multiplier, batch_size=self.batch_size,
            optimizer=self.optimizer, base_lr=self.base_lr, epochs=self.epochs,
            weight_decay=self.weight_decay, seed=self.random_state, device=self.device,
        )

    def _dataset(self, X):
        if self.method == "separate":
            return build_pretext_separate(X, self.transform_set)
        copies = self.copies or make_transform_set(self.transform_set).K
        return build_pretext_random(X, self.transform_set, copies, self.random_state)

    def fit(self, X, y=None, X_held_out=None):
        """Train on unlabeled images ``X``; ``y`` is ignored."""
        images = _images(X)
        config = self._config()
        data = self._dataset(images)
        held = build_pretext_separate(_images(X_held_out), self.transform_set) if X_held_out is not None else None
        self.checkpoint_, self.history_ = train_pretext(config, data, out_dir=self.out_dir, held_out=held)
        self._set_fitted_state()
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint):
        """Wrap an existing checkpoint (object or path) as a fitted extractor."""
        ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
        prov = ckpt.provenance
        est = cls(transform_set=prov.get("transform_set", "rot4"), arch=ckpt.spec.arch,
                  num_blocks=ckpt.spec.num_blocks, width_multiplier=ckpt.spec.width_multiplier,
                  epochs=prov.get("epochs", 100), random_state=prov.get("seed", 0))
        est.checkpoint_ = ckpt
        est.history_ = None
        est._set_fitted_state()
        return est

    def _set_fitted_state(self):
        self.model_ = model_from_checkpoint(self.checkpoint_)
        self.n_features_out_ = self.model_.backbone.feature_width
        self.K_ = self.model_.head.fc.out_features

    @torch.no_grad()
    def transform(self, X):
        """Pooled backbone features, shape ``(n_samples, n_features_out_)``."""
        check_is_fitted(self, "checkpoint_")
        images = _images(X)
        backbone = self.model_.backbone.eval()
        ck = self.checkpoint_
        out = [backbone(images_to_tensor(images[i:i + 500], ck.norm_mean, ck.norm_std)).numpy()
               for i in range(0, len(images), 500)]
        return np.concatenate(out)

    def pretext_score(self, X):
        """Transform-prediction accuracy over every transformed copy of ``X``."""
        check_is_fitted(self, "checkpoint_")
        data = build_pretext_separate(_images(X), self.transform_set)
        ck = self.checkpoint_
        return pretext_accuracy(self.model_, data, ck.norm_mean, ck.norm_std)


class ProbeClassifier(ClassifierMixin, BaseEstimator):
    """Downstream classifier: probe head over a (frozen or fine-tuned) backbone.

    ``checkpoint`` may be a :class:`Checkpoint`, a path, a fitted
    :class:`PretextFeatureExtractor`, or ``None`` for a randomly initialised
    backbone described by ``arch``/``num_blocks``/``width_multiplier``.
    """

    def __init__(self, checkpoint=None, mode="frozen", augmentation="none", optimizer="rmsprop",
                 epochs=50, batch_size=128, base_lr=1e-3, arch="vgg16", num_blocks=2,
                 width_multiplier=1.0, random_state=0, device=None):
        self.checkpoint = checkpoint
        self.mode = mode
        self.augmentation = augmentation
        self.optimizer = optimizer
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.arch = arch
        self.num_blocks = num_blocks
        self.width_multiplier = width_multiplier
        self.random_state = random_state
        self.device = device

    def _resolve_checkpoint(self):
        ck = self.checkpoint
        if ck is None or isinstance(ck, Checkpoint):
            return ck
        if isinstance(ck, PretextFeatureExtractor):
            check_is_fitted(ck, "checkpoint_")
            return ck.checkpoint_
        if isinstance(ck, (str, Path)):
            return Checkpoint.load(ck)
        raise TypeError(f"unsupported checkpoint type {type(ck).__name__}")

    def fit(self, X, y, eval_set=None):
        """Train on labeled images; ``eval_set=(X_test, y_test)`` feeds the test curve.

        Without ``eval_set`` the per-epoch test curve is measured on the
        training data itself.
        """
        images = _images(X)
        labels = check_class_labels(y, len(images))
        train = CifarSplit(images, labels)
        test = train if eval_set is None else CifarSplit(_images(eval_set[0]), np.asarray(eval_set[1]))
        ckpt = self._resolve_checkpoint()
        arch_fields = {} if ckpt is not None else {
            "arch": self.arch, "num_blocks": self.num_blocks, "width_multiplier": self.width_multiplier}
        config = DownstreamConfig(mode=self.mode, augmentation=self.augmentation, optimizer=self.optimizer,
                                  epochs=self.epochs, batch_size=self.batch_size, base_lr=self.base_lr,
                                  seed=self.random_state, device=self.device, **arch_fields)
        self.result_ = train_downstream(config, train, test, checkpoint=ckpt)
        self.model_ = self.result_.model
        if ckpt is not None:
            self.norm_ = (ckpt.norm_mean, ckpt.norm_std)
        else:
            self.norm_ = normalization_stats(images)
        self.classes_ = np.arange(10)
        return self

    @torch.no_grad()
    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        images = _images(X)
        self.model_.eval()
        out = [self.model_.predict_proba(images_to_tensor(images[i:i + 500], *self.norm_)).numpy()
               for i in range(0, len(images), 500)]
        return np.concatenate(out)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict_labels(self.model_, _images(X), *self.norm_)
