import numpy as np
import pytest
from sklearn.base import clone
from sklearn.utils.validation import NotFittedError

from nesyfatigue import NeSyClassifier
from nesyfatigue.exceptions import SingleClassTraining
from nesyfatigue.model import init_params


def toy(n=64, seed=0):
    rng = np.random.default_rng(seed)
    y = np.tile([0, 1], n // 2)
    return rng.normal(size=(n, 90)) + 1.2 * y[:, None], y


def test_fit_predict_shapes():
    X, y = toy()
    est = NeSyClassifier(max_epochs=3, patience=2).fit(X, y)
    proba = est.predict_proba(X)
    assert proba.shape == (64, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(est.predict(X).tolist()) <= {0, 1}
    assert len(est.training_log_.rows) <= 3
    trace = est.explain(X[:4])
    assert trace.C.shape == (4, 4) and trace.f.shape == (4, 3)


def test_params_and_clone():
    est = NeSyClassifier(operator_family="goedel", lr=1e-3)
    params = est.get_params()
    assert params["operator_family"] == "goedel" and params["lr"] == 1e-3
    twin = clone(est)
    assert twin.get_params() == params
    with pytest.raises(NotFittedError):
        twin.predict(np.zeros((1, 90)))


def test_single_class_rejected():
    X, _ = toy()
    with pytest.raises(SingleClassTraining):
        NeSyClassifier(max_epochs=2, patience=1).fit(X, np.zeros(64, dtype=int))


def test_same_seed_same_model():
    X, y = toy()
    a = NeSyClassifier(max_epochs=4, patience=2, random_state=5).fit(X, y)
    b = NeSyClassifier(max_epochs=4, patience=2, random_state=5).fit(X, y)
    np.testing.assert_array_equal(a.predict_proba(X), b.predict_proba(X))


def test_from_params_wraps_checkpoint():
    params = init_params(3, operator_family="lukasiewicz")
    est = NeSyClassifier.from_params(params)
    assert est.operator_family == "lukasiewicz"
    X = np.random.default_rng(0).normal(size=(5, 90))
    np.testing.assert_array_equal(est.predict_proba(X)[:, 1], est.explain(X).yhat)
