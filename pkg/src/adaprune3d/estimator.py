"""scikit-learn style wrappers around the two-step pipeline and the complexity scores."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .complexity import complexity_scores
from .errors import ValidationError
from .models import forward_eval
from .pipeline import RunConfig, evaluate, make_model, train_aap, train_ava

__all__ = ["AdaptivePruningClassifier", "ComplexityTransformer", "check_clips", "check_clips_labels"]


def check_clips(X, clip_shape=None) -> np.ndarray:
    """Validate a batch of clips shaped (N, T, C, H, W) and return it as finite float32."""
    X = np.asarray(X)
    if X.ndim != 5:
        raise ValidationError(f"expected clips shaped (N, T, C, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValidationError("no clips given")
    if not np.issubdtype(X.dtype, np.number):
        raise ValidationError(f"clips must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValidationError("clips contain NaN or infinite values")
    if clip_shape is not None and tuple(X.shape[1:]) != tuple(clip_shape):
        raise ValidationError(f"clip shape {X.shape[1:]} differs from the fitted {tuple(clip_shape)}")
    return X


def check_clips_labels(X, y):
    X = check_clips(X)
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != len(X):
        raise ValidationError(f"labels must be 1-D with {len(X)} entries, got shape {y.shape}")
    return X, y


class AdaptivePruningClassifier(ClassifierMixin, BaseEstimator):
    """Video classifier trained in two steps; prediction runs the pruned executor.

    Constructor arguments mirror :class:`RunConfig` fields.  After ``fit``,
    ``history_`` holds both training curves and ``model_`` the parameters.
    """

    def __init__(self, family="vgg3d", beta=1.0, lam=1.0, step1_epochs=30, step2_epochs=15,
                 batch_size=16, dims=("frame", "channel", "feature"), prune=True, seed=0):
        self.family = family
        self.beta = beta
        self.lam = lam
        self.step1_epochs = step1_epochs
        self.step2_epochs = step2_epochs
        self.batch_size = batch_size
        self.dims = dims
        self.prune = prune
        self.seed = seed

    def _run_config(self) -> RunConfig:
        return RunConfig(family=self.family, beta=self.beta, lam=self.lam, step1_epochs=self.step1_epochs,
                         step2_epochs=self.step2_epochs, step1_batch=self.batch_size,
                         step2_batch=self.batch_size, dims=tuple(self.dims), seed=self.seed)

    def fit(self, X, y):
        X, y = check_clips_labels(X, y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValidationError("need at least two classes")
        cfg = self._run_config()
        self.clip_shape_ = tuple(X.shape[1:])
        self.model_ = make_model(cfg, clip_shape=self.clip_shape_, num_classes=len(self.classes_))
        self.history_ = {"step1": train_ava(self.model_, X, y_idx, cfg),
                         "step2": train_aap(self.model_, X, y_idx, cfg)}
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        X = check_clips(X, self.clip_shape_)
        return np.stack([forward_eval(self.model_, clip, prune=self.prune).logits for clip in X])

    def predict_proba(self, X):
        z = self._logits(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def pruning_rate(self, X) -> float:
        """Aggregate dense-to-actual FLOP ratio on ``X`` (labels are not needed)."""
        check_is_fitted(self, "model_")
        X = check_clips(X, self.clip_shape_)
        return evaluate(self.model_, X, np.zeros(len(X), np.int64), prune=self.prune,
                        complexity=False).pruning_rate


class ComplexityTransformer(TransformerMixin, BaseEstimator):
    """Map clips to ``[R^s, R^t]`` feature rows."""

    def __init__(self, split=0.5):
        self.split = split

    def fit(self, X, y=None):
        X = check_clips(X)
        if not 0 < self.split < 1:
            raise ValidationError(f"split must lie in (0, 1), got {self.split}")
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_clips(X)
        rows = [complexity_scores(clip, self.split) for clip in X]
        return np.array([[r.r_spatial, r.r_temporal] for r in rows])

    def get_feature_names_out(self, input_features=None):
        return np.array(["r_spatial", "r_temporal"], dtype=object)
