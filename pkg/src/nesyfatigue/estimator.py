"""scikit-learn compatible wrapper around the concept-bottleneck model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import SingleClassTraining
from .fuzzy import OperatorFamily
from .model import ForwardTrace, ModelParams, forward, init_params
from .train import TrainConfig, split_validation, train_model


class NeSyClassifier(ClassifierMixin, BaseEstimator):
    """Binary fatigue classifier: attention encoders -> 4 concepts -> fuzzy rules.

    Expects features already normalized (see
    :class:`~nesyfatigue.normalize.ParticipantNormalizer`); the first
    ``n_eye_features`` columns feed the eye encoder, the rest the fNIRS encoder.

    ``fit`` accepts ``groups`` so the early-stopping split can hold out whole
    participants. ``explain`` returns the full forward trace (concepts,
    thresholded concepts, rule firings).
    """

    def __init__(self, operator_family="product", head="logic", learn_thresholds=True, temperature=2.0,
                 hidden_dim=64, dropout=0.3, n_eye_features=42, lambda_div=0.05, lambda_sparse=0.001,
                 lr=5e-4, weight_decay=1e-3, batch_size=32, max_epochs=150, patience=20, grad_clip=1.0,
                 val_fraction=0.2, random_state=42):
        self.operator_family = operator_family
        self.head = head
        self.learn_thresholds = learn_thresholds
        self.temperature = temperature
        self.hidden_dim = hidden_dim
        self.dropout = dropout
        self.n_eye_features = n_eye_features
        self.lambda_div = lambda_div
        self.lambda_sparse = lambda_sparse
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.grad_clip = grad_clip
        self.val_fraction = val_fraction
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        seed = 0 if self.random_state is None else int(self.random_state)
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.patience, grad_clip=self.grad_clip,
                           lambda_div=self.lambda_div, lambda_sparse=self.lambda_sparse,
                           val_fraction=self.val_fraction, learn_thresholds=self.learn_thresholds, seed=seed)

    def fit(self, X, y, groups=None, callback=None):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        if len(self.classes_) != 2:
            raise SingleClassTraining(f"need both classes, got {self.classes_.tolist()}")
        if not set(self.classes_.tolist()) <= {0, 1}:
            raise ValueError("labels must be 0 (alert) and 1 (fatigued)")
        self.n_features_in_ = X.shape[1]
        config = self.train_config()
        val = split_validation(y, groups, config.val_fraction, np.random.SeedSequence([config.seed, 7]))
        if len(np.unique(y[~val])) < 2:
            val[:] = False
        seeds = np.random.SeedSequence(config.seed).spawn(1)
        params = init_params(np.random.default_rng(seeds[0]), n_eye=self.n_eye_features,
                             n_fnirs=X.shape[1] - self.n_eye_features, hidden=self.hidden_dim,
                             operator_family=OperatorFamily.parse(self.operator_family).value,
                             head=self.head, temperature=self.temperature, dropout=self.dropout)
        self.params_, self.training_log_ = train_model(
            X[~val], y[~val], X[val] if val.any() else None, y[val] if val.any() else None,
            config, params, callback=callback)
        return self

    def explain(self, X, knockout=()) -> ForwardTrace:
        check_is_fitted(self, "params_")
        X = check_array(X)
        return forward(self.params_, X, knockout=knockout)

    def decision_function(self, X):
        return self.explain(X).z

    def predict_proba(self, X, knockout=()):
        p = self.explain(X, knockout).yhat
        return np.column_stack([1.0 - p, p])

    def predict(self, X, knockout=()):
        return (self.explain(X, knockout).yhat >= 0.5).astype(int)

    @classmethod
    def from_params(cls, params: ModelParams, **kwargs) -> NeSyClassifier:
        """Wrap already-trained parameters (e.g. a loaded checkpoint)."""
        est = cls(operator_family=params.operator_family.value, head=params.head,
                  temperature=params.temperature, dropout=params.dropout, n_eye_features=params.n_eye,
                  hidden_dim=params.hidden, **kwargs)
        est.params_ = params
        est.classes_ = np.array([0, 1])
        est.n_features_in_ = params.n_eye + params.n_fnirs
        return est
