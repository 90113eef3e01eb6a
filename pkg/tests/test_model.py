import numpy as np
import pytest
from oracles import forward_scalar

from nesyfatigue.exceptions import DimensionMismatch, NonFiniteActivation
from nesyfatigue.model import (ModelParams, aggregate, encode, fire_rules, forward, init_params,
                               neutral_firing, soft_threshold, zero_params)


@pytest.fixture
def params():
    return init_params(np.random.default_rng(3))


def test_shapes_and_init(params):
    assert params["eye.W_a"].shape == (42, 42)
    assert params["eye.W_h"].shape == (64, 42)
    assert params["fnirs.W_a"].shape == (48, 48)
    assert params["eye.V"].shape == (2, 64)
    assert params["fnirs.V"].shape == (1, 64)
    assert params["cross.v"].shape == (128,)
    np.testing.assert_array_equal(params["logic.tau_hat"], 0.0)
    np.testing.assert_array_equal(params["logic.beta"], 1.0)
    bound = 1 / np.sqrt(42)
    assert np.abs(params["eye.W_a"]).max() <= bound


def test_aggregation_bias_centres_neutral_window(params):
    f = neutral_firing("product")
    np.testing.assert_allclose(f, [0.5, 0.75, 0.5])
    _, y = aggregate(f, params["logic.agg_w"], params["logic.agg_b"])
    assert y[0] == pytest.approx(0.5)


def test_zero_params_give_half():
    p = zero_params()
    X = np.random.default_rng(0).normal(size=(5, 90))
    np.testing.assert_allclose(forward(p, X).yhat, 0.5)


def test_zero_input_symmetry(params):
    C, tr = encode(params, "eye", np.zeros((1, 42)))
    np.testing.assert_array_equal(tr.a, 0.5)
    np.testing.assert_array_equal(tr.h, 0.0)
    np.testing.assert_array_equal(C, 0.5)


def test_soft_threshold_values():
    assert soft_threshold(0.5, 0.0, 2.0) == 0.5
    # 1 / (1 + exp(-1))
    assert soft_threshold(1.0, 0.0, 2.0) == pytest.approx(0.7310585786300049, abs=1e-15)


def test_sharper_temperature_approaches_step():
    C = np.array([0.1, 0.3, 0.45, 0.55, 0.8])
    step = (C > 0.5).astype(float)
    gaps = [np.abs(soft_threshold(C, 0.0, T) - step).max() for T in (1, 2, 4, 8, 16, 32)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_rule_firings_examples():
    Ct = np.array([[0.2, 0.5, 0.5, 0.9]])
    for fam, want in (("product", 0.75), ("lukasiewicz", 1.0), ("goedel", 0.5)):
        f, *_ = fire_rules(Ct, np.ones(3), np.zeros(4), fam)
        assert f[0, 1] == want
    Ct0 = np.array([[0.2, 0.6, 0.0, 0.9]])
    for fam in ("product", "lukasiewicz", "goedel"):
        f, *_ = fire_rules(Ct0, np.ones(3), np.zeros(4), fam)
        assert f[0, 1] == 0.6
    f, _, _, alpha = fire_rules(Ct, np.ones(3), np.zeros(4))
    np.testing.assert_array_equal(alpha, 0.25)
    assert f[0, 2] == pytest.approx(Ct.mean())


def test_aggregate_limits():
    assert aggregate(np.ones(3), np.zeros(3), np.zeros(1))[1][0] == 0.5
    assert aggregate(np.ones(3), np.zeros(3), np.array([1e3]))[1][0] == 1.0


def test_forward_matches_scalar_oracle():
    rng = np.random.default_rng(11)
    for fam in ("product", "lukasiewicz", "goedel"):
        p = init_params(rng, n_eye=5, n_fnirs=4, hidden=6, operator_family=fam)
        for name in p.arrays:
            p.arrays[name] = p.arrays[name] + rng.normal(scale=0.3, size=p.arrays[name].shape)
        x = rng.normal(size=9)
        tr = forward(p, x)
        C, Ct, f, yhat = forward_scalar(p.arrays, x, 5, fam)
        np.testing.assert_allclose(tr.C[0], C, rtol=1e-12)
        np.testing.assert_allclose(tr.Ct[0], Ct, rtol=1e-12)
        np.testing.assert_allclose(tr.f[0], f, rtol=1e-12)
        assert tr.yhat[0] == pytest.approx(yhat, rel=1e-12)


def test_trace_ranges_and_determinism(params):
    X = np.random.default_rng(1).normal(size=(20, 90)) * 3
    a, b = forward(params, X), forward(params, X)
    np.testing.assert_array_equal(a.yhat, b.yhat)
    for arr in (a.C, a.Ct):
        assert arr.min() >= 0 and arr.max() <= 1
    assert np.all((a.yhat > 0) & (a.yhat < 1))


def test_saturated_attention_reduces_to_mlp():
    rng = np.random.default_rng(5)
    p = init_params(rng, n_eye=4, n_fnirs=3, hidden=5)
    x = np.abs(rng.normal(size=(3, 4))) + 0.5
    p.arrays["eye.W_a"] = np.full((4, 4), 1e3)
    _, tr = encode(p, "eye", x)
    pre = x @ p["eye.W_h"].T
    mu, var = pre.mean(1, keepdims=True), pre.var(1, keepdims=True)
    ln = (pre - mu) / np.sqrt(var + 1e-5)
    from scipy.stats import norm
    np.testing.assert_allclose(tr.h, ln * norm.cdf(ln), rtol=1e-10)


def test_dropout_only_in_training(params):
    X = np.random.default_rng(2).normal(size=(8, 90))
    tr = forward(params, X, training=True, rng=0)
    assert tr.eye.mask is not None
    kept = tr.eye.mask[tr.eye.mask > 0]
    np.testing.assert_allclose(kept, 1 / 0.7)
    assert forward(params, X).eye.mask is None


def test_knockout_c4_changes_only_f3(params):
    X = np.random.default_rng(4).normal(size=(10, 90))
    a, b = forward(params, X), forward(params, X, knockout=(3,))
    np.testing.assert_array_equal(a.f[:, :2], b.f[:, :2])
    assert np.all(a.f[:, 2] != b.f[:, 2])
    np.testing.assert_array_equal(b.C[:, 3], 0.0)


def test_monotone_in_first_concept():
    p = zero_params()
    p.arrays["logic.beta"][:] = 1.0
    p.arrays["logic.agg_w"][:] = 1.0
    Ct = np.linspace(0, 1, 11)
    f = np.column_stack([Ct, np.zeros(11), np.zeros(11)])
    y = aggregate(f, p["logic.agg_w"], p["logic.agg_b"])[1]
    assert np.all(np.diff(y) > 0)


def test_linear_head():
    p = init_params(0, head="linear")
    X = np.random.default_rng(0).normal(size=(4, 90))
    tr = forward(p, X)
    assert tr.f is None
    np.testing.assert_allclose(tr.z, tr.C @ p["head.u"] + p["head.c"][0])


def test_errors(params):
    with pytest.raises(DimensionMismatch):
        forward(params, np.zeros((2, 89)))
    bad = params.copy()
    bad.arrays["logic.agg_b"][:] = np.nan
    with pytest.raises(NonFiniteActivation):
        forward(bad, np.zeros((1, 90)))
    with pytest.raises(ValueError):
        ModelParams(params.arrays, head="tree")


def test_checkpoint_round_trip(tmp_path, params):
    path = tmp_path / "p.json"
    params.save(path)
    back = ModelParams.load(path)
    assert back.operator_family == params.operator_family
    for k, v in params.arrays.items():
        np.testing.assert_array_equal(back[k], v)
    doc = params.to_dict()
    doc["version"] = 99
    with pytest.raises(ValueError):
        ModelParams.from_dict(doc)
