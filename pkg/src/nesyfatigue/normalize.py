"""Participant-aware, global and no-calibration feature normalization.

Every statistics object records the ``(participant_id, window_index, label)``
keys it was computed from, so a LOSO fold can prove that no held-out
fatigued window influenced any normalizer.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import DimensionMismatch, InsufficientAlertSamples, MissingCalibrationData

DEFAULT_EPSILON = 1e-6


class Strategy(str, enum.Enum):
    GLOBAL = "global"
    PARTICIPANT = "participant"
    NO_CALIBRATION = "no_calibration"

    @classmethod
    def parse(cls, value) -> Strategy:
        if isinstance(value, cls):
            return value
        aliases = {"participant_aware": "participant", "calibration": "participant",
                   "nocalibration": "no_calibration", "no-calibration": "no_calibration",
                   "train_only": "no_calibration"}
        key = str(value).lower()
        return cls(aliases.get(key, key))


Provenance = frozenset  # of (participant_id, window_index, label)


@dataclass(frozen=True)
class BaselineStats:
    participant_id: str
    mu: np.ndarray
    sigma: np.ndarray
    n_alert: int
    epsilon: float = DEFAULT_EPSILON
    provenance: Provenance = frozenset()

    def to_dict(self) -> dict:
        return {"participant_id": self.participant_id, "mu": self.mu.tolist(),
                "sigma": self.sigma.tolist(), "n_alert": self.n_alert, "epsilon": self.epsilon}


@dataclass(frozen=True)
class CohortStats:
    mu: np.ndarray
    sigma: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    provenance: Provenance = frozenset()

    def to_dict(self) -> dict:
        return {"participant_id": None, "mu": self.mu.tolist(), "sigma": self.sigma.tolist(),
                "n_windows": len(self.provenance), "epsilon": self.epsilon}


def _keys(pid_or_groups, window_index, y):
    groups = np.broadcast_to(np.asarray(pid_or_groups, dtype=object), np.shape(y))
    return frozenset(zip(groups.tolist(), np.asarray(window_index).tolist(), np.asarray(y).tolist()))


def fit_participant_baseline(X, y, participant_id="", window_index=None, epsilon=DEFAULT_EPSILON) -> BaselineStats:
    """Mean and population SD over the participant's alert (label 0) windows only."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y)
    alert = y == 0
    if alert.sum() < 2:
        raise InsufficientAlertSamples(
            f"participant {participant_id!r} has {int(alert.sum())} alert windows, need at least 2"
        )
    if window_index is None:
        window_index = np.arange(len(y))
    window_index = np.asarray(window_index)
    Xa = X[alert]
    return BaselineStats(participant_id, Xa.mean(axis=0), Xa.std(axis=0), int(alert.sum()), epsilon,
                         _keys(participant_id, window_index[alert], y[alert]))


def fit_cohort(X, y=None, groups=None, window_index=None, epsilon=DEFAULT_EPSILON) -> CohortStats:
    """Pooled mean and population SD over all supplied (training) windows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = len(X)
    y = np.zeros(n, dtype=int) if y is None else np.asarray(y)
    groups = np.full(n, "", dtype=object) if groups is None else np.asarray(groups, dtype=object)
    window_index = np.arange(n) if window_index is None else np.asarray(window_index)
    return CohortStats(X.mean(axis=0), X.std(axis=0), epsilon, _keys(groups, window_index, y))


def apply(stats: BaselineStats | CohortStats, X) -> np.ndarray:
    """``(x - mu) / (sigma + epsilon)`` elementwise."""
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != len(stats.mu):
        raise DimensionMismatch(f"stats have {len(stats.mu)} features, input has {X.shape[-1]}")
    return (X - stats.mu) / (stats.sigma + stats.epsilon)


def invert(stats: BaselineStats | CohortStats, Z) -> np.ndarray:
    return np.asarray(Z, dtype=float) * (stats.sigma + stats.epsilon) + stats.mu


class ParticipantNormalizer(TransformerMixin, BaseEstimator):
    """Feature normalizer implementing the three calibration strategies.

    ``fit(X, y, groups)`` estimates statistics from training windows; held-out
    subjects are added with :meth:`calibrate` (participant strategy) using
    their alert windows only. ``transform(X, groups)`` routes each row to the
    statistics of its participant, falling back to pooled training
    statistics where the strategy says so.

    ``train_rule`` only affects the no-calibration strategy: ``"participant"``
    normalizes training subjects against their own baselines, ``"pooled"``
    uses the cohort statistics for everyone.
    """

    def __init__(self, strategy="participant", epsilon=DEFAULT_EPSILON, train_rule="participant"):
        self.strategy = strategy
        self.epsilon = epsilon
        self.train_rule = train_rule

    def fit(self, X, y=None, groups=None, window_index=None):
        X = check_array(X)
        n = len(X)
        y = np.zeros(n, dtype=int) if y is None else np.asarray(y)
        groups = np.full(n, "", dtype=object) if groups is None else np.asarray(groups, dtype=object)
        window_index = np.arange(n) if window_index is None else np.asarray(window_index)
        self.n_features_in_ = X.shape[1]
        self.strategy_ = Strategy.parse(self.strategy)
        self.cohort_ = fit_cohort(X, y, groups, window_index, self.epsilon)
        self.baselines_ = {}
        per_subject = self.strategy_ is Strategy.PARTICIPANT or (
            self.strategy_ is Strategy.NO_CALIBRATION and self.train_rule == "participant")
        if per_subject:
            for pid in sorted(set(groups.tolist())):
                m = groups == pid
                self.baselines_[pid] = fit_participant_baseline(X[m], y[m], pid, window_index[m], self.epsilon)
        return self

    def calibrate(self, X_alert, participant_id, window_index=None):
        """Add a held-out participant's baseline from alert windows (labels are all 0 by construction)."""
        check_is_fitted(self, "cohort_")
        X_alert = np.atleast_2d(np.asarray(X_alert, dtype=float))
        if self.strategy_ is not Strategy.PARTICIPANT:
            return self
        self.baselines_[participant_id] = fit_participant_baseline(
            X_alert, np.zeros(len(X_alert), dtype=int), participant_id, window_index, self.epsilon)
        return self

    def stats_for(self, participant_id):
        check_is_fitted(self, "cohort_")
        if self.strategy_ is Strategy.GLOBAL:
            return self.cohort_
        if participant_id in self.baselines_:
            return self.baselines_[participant_id]
        if self.strategy_ is Strategy.NO_CALIBRATION:
            return self.cohort_
        raise MissingCalibrationData(f"no calibration baseline for participant {participant_id!r}")

    def transform(self, X, groups=None):
        check_is_fitted(self, "cohort_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatch(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        if groups is None:
            if self.strategy_ is Strategy.PARTICIPANT:
                raise MissingCalibrationData("participant strategy needs groups at transform time")
            groups = np.full(len(X), None, dtype=object)
        groups = np.asarray(groups, dtype=object)
        out = np.empty_like(X)
        for pid in dict.fromkeys(groups.tolist()):
            m = groups == pid
            out[m] = apply(self.stats_for(pid), X[m])
        return out

    def fit_transform(self, X, y=None, groups=None, window_index=None):
        return self.fit(X, y, groups, window_index).transform(X, groups)

    @property
    def provenance(self) -> frozenset:
        """Union of window keys that fed any statistic."""
        check_is_fitted(self, "cohort_")
        keys = set()
        if self.strategy_ is not Strategy.PARTICIPANT:
            keys |= self.cohort_.provenance
        for s in self.baselines_.values():
            keys |= s.provenance
        return frozenset(keys)

    def to_json(self) -> str:
        check_is_fitted(self, "cohort_")
        doc = {"strategy": self.strategy_.value, "epsilon": self.epsilon,
               "cohort": self.cohort_.to_dict(),
               "participants": [self.baselines_[k].to_dict() for k in sorted(self.baselines_)]}
        return json.dumps(doc)


def make_strategy(kind, X_train, y_train, groups_train, window_index=None,
                  calibration=None, epsilon=DEFAULT_EPSILON, train_rule="participant") -> ParticipantNormalizer:
    """Fit a normalizer for one fold.

    ``calibration`` is ``(X_alert, participant_id, window_index)`` for the
    held-out subject and is required by the participant strategy.
    """
    kind = Strategy.parse(kind)
    norm = ParticipantNormalizer(kind.value, epsilon, train_rule).fit(X_train, y_train, groups_train, window_index)
    if kind is Strategy.PARTICIPANT:
        if calibration is None:
            raise MissingCalibrationData("participant strategy needs the test subject's alert windows")
        X_alert, pid, idx = calibration
        norm.calibrate(X_alert, pid, idx)
    return norm
