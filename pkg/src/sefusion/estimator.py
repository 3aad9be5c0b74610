"""scikit-learn compatible wrapper around the fusion model."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .model import (
    EFFICIENT_STANDIN,
    RESIDUAL_STANDIN,
    BackboneConfig,
    FusionModelConfig,
    build_model,
    predict_proba,
    threshold,
)
from .training import AdamState, History, evaluate, metrics, train


def check_images(X, input_size=None) -> np.ndarray:
    """Validate an image batch [N, 3, H, W] and return it as float32."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images of shape [N, 3, H, W], got {X.shape}")
    if len(X) == 0:
        raise ValueError("found an empty image batch")
    if input_size is not None and tuple(X.shape[2:]) != tuple(input_size):
        raise ValueError(f"images are {X.shape[2]}x{X.shape[3]}, model expects {input_size[0]}x{input_size[1]}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    return X


def check_binary_labels(y, n: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"labels must be a 1-d vector, got shape {y.shape}")
    if n is not None and len(y) != n:
        raise ValueError(f"got {len(y)} labels for {n} images")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 (Others) or 1 (Monkeypox)")
    return y.astype(np.int64)


class FusionClassifier(ClassifierMixin, BaseEstimator):
    """Two-branch CNN with SE attention and a sigmoid binary head.

    Parameters mirror :class:`~sefusion.model.FusionModelConfig` plus the
    optimization settings. ``random_state`` seeds both initialization and
    batch shuffling.

    Attributes
    ----------
    model_ : FusionModel
    history_ : History
        Per-epoch loss/accuracy curves from the last ``fit``.
    classes_ : ndarray of shape (2,)
    """

    def __init__(
        self,
        branch_a: BackboneConfig = EFFICIENT_STANDIN,
        branch_b: BackboneConfig = RESIDUAL_STANDIN,
        se_ratio: int = 16,
        dense1_units: int = 256,
        dense1_dropout: float = 0.2,
        dense2_units: int = 128,
        dense2_dropout: float = 0.1,
        input_size: tuple[int, int] = (224, 224),
        epochs: int = 50,
        batch_size: int = 32,
        learning_rate: float = 1e-4,
        random_state: int = 0,
    ):
        self.branch_a = branch_a
        self.branch_b = branch_b
        self.se_ratio = se_ratio
        self.dense1_units = dense1_units
        self.dense1_dropout = dense1_dropout
        self.dense2_units = dense2_units
        self.dense2_dropout = dense2_dropout
        self.input_size = input_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def model_config(self) -> FusionModelConfig:
        return FusionModelConfig(
            branch_a=self.branch_a,
            branch_b=self.branch_b,
            se_ratio=self.se_ratio,
            dense1_units=self.dense1_units,
            dense1_dropout=self.dense1_dropout,
            dense2_units=self.dense2_units,
            dense2_dropout=self.dense2_dropout,
            input_size=tuple(self.input_size),
            seed=int(self.random_state),
        )

    @classmethod
    def from_config(cls, cfg: FusionModelConfig, **kw) -> "FusionClassifier":
        return cls(
            branch_a=cfg.branch_a, branch_b=cfg.branch_b, se_ratio=cfg.se_ratio,
            dense1_units=cfg.dense1_units, dense1_dropout=cfg.dense1_dropout,
            dense2_units=cfg.dense2_units, dense2_dropout=cfg.dense2_dropout,
            input_size=tuple(cfg.input_size), random_state=cfg.seed, **kw,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X, self.input_size)
        y = check_binary_labels(y, len(X))
        if X_val is not None:
            X_val = check_images(X_val, self.input_size)
            y_val = check_binary_labels(y_val, len(X_val))
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        self.classes_ = np.array([0, 1])
        self.model_ = build_model(self.model_config())
        self.optimizer_ = AdamState(self.learning_rate)
        self.history_: History = train(
            self.model_, X, y, X_val, y_val,
            epochs=self.epochs, batch_size=self.batch_size,
            seed=int(self.random_state), learning_rate=self.learning_rate,
            state=self.optimizer_,
        )
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        p = predict_proba(self.model_, check_images(X, self.input_size)).astype(np.float64)
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return threshold(predict_proba(self.model_, check_images(X, self.input_size)))

    def confusion(self, X, y):
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_images(X, self.input_size), check_binary_labels(y))

    def evaluate(self, X, y):
        """Accuracy/precision/recall/F1 (fractions) on ``(X, y)``."""
        return metrics(self.confusion(X, y))
