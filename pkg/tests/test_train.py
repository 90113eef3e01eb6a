import math

import numpy as np
import pytest
from oracles import central_difference

from nesyfatigue.exceptions import MissingTrace, SingleClassTraining
from nesyfatigue.model import NO_DECAY, forward, init_params
from nesyfatigue.train import (AdamW, EarlyStopping, TrainConfig, backward, clip_by_global_norm, compute_loss,
                               cosine_lr, diversity_loss, entropy, global_norm, split_validation, train_model)


def small_model(rng, family="product", head="logic"):
    p = init_params(rng, n_eye=4, n_fnirs=3, hidden=5, operator_family=family, head=head)
    for k in p.arrays:
        p.arrays[k] = p.arrays[k] + rng.normal(scale=0.4, size=p.arrays[k].shape)
    return p


def fd_check(p, X, y, masks=None, learn_thresholds=True):
    tr = forward(p, X, training=masks is not None, masks=masks)
    grads = backward(p, tr, y, 0.05, 0.001, learn_thresholds)

    def loss():
        return compute_loss(forward(p, X, training=masks is not None, masks=masks), y, 0.05, 0.001).total

    num = central_difference(loss, p.arrays)
    for k in p.arrays:
        err = np.abs(grads[k] - num[k])
        scale = np.maximum(np.abs(grads[k]), np.abs(num[k]))
        ok = (err < 1e-7) | (err < 1e-4 * scale)
        assert ok.all(), (k, err.max())


@pytest.mark.parametrize("head", ["logic", "linear"])
def test_gradients_with_dropout_masks(head):
    rng = np.random.default_rng(8)
    p = small_model(rng, head=head)
    X = rng.normal(size=(6, 7))
    y = np.array([0, 1, 0, 1, 1, 0])
    tr = forward(p, X, training=True, rng=1)
    fd_check(p, X, y, masks=(tr.eye.mask, tr.fnirs.mask))


def test_gradients_full_size_sampled_coordinates():
    rng = np.random.default_rng(21)
    p = init_params(rng)
    X = rng.normal(size=(5, 90))
    y = np.array([0, 1, 1, 0, 1])
    grads = backward(p, forward(p, X), y)
    h = 1e-5
    for name in p.arrays:
        flat = p.arrays[name].reshape(-1)
        for i in rng.choice(flat.size, size=min(flat.size, 6), replace=False):
            old = flat[i]
            flat[i] = old + h
            up = compute_loss(forward(p, X), y).total
            flat[i] = old - h
            down = compute_loss(forward(p, X), y).total
            flat[i] = old
            num = (up - down) / (2 * h)
            g = grads[name].reshape(-1)[i]
            assert abs(g - num) < max(1e-7, 1e-4 * max(abs(g), abs(num))), name


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(0)
    p = small_model(rng)
    X = rng.normal(size=(4, 7))
    grads = backward(p, forward(p, X), np.array([0, 1, 0, 1]), upstream=0.0)
    assert all(not np.any(g) for g in grads.values())


def test_w_alpha_gradient_only_through_f3():
    rng = np.random.default_rng(1)
    p = small_model(rng)
    X = rng.normal(size=(5, 7))
    y = np.array([1, 0, 1, 0, 0])
    tr = forward(p, X)
    grads = backward(p, tr, y, 0.0, 0.0)
    # dL/dw_alpha = sum_n dz_n * w3 * beta3 * alpha * (Ct_n - alpha . Ct_n)
    dz = (tr.yhat - y) / len(y)
    alpha = tr.alpha
    want = sum(dz[n] * p["logic.agg_w"][2] * p["logic.beta"][2] * alpha * (tr.Ct[n] - alpha @ tr.Ct[n])
               for n in range(len(y)))
    np.testing.assert_allclose(grads["logic.w_alpha"], want, rtol=1e-12)


def test_knocked_out_concept_gets_no_gradient():
    rng = np.random.default_rng(2)
    p = small_model(rng)
    X = rng.normal(size=(5, 7))
    grads = backward(p, forward(p, X, knockout=(3,)), np.array([1, 0, 1, 0, 0]))
    assert not np.any(grads["cross.v"]) and not np.any(grads["cross.b"])


def test_missing_trace():
    with pytest.raises(MissingTrace):
        backward(init_params(0), None, np.zeros(2))


def test_loss_terms():
    rng = np.random.default_rng(3)
    p = init_params(rng)
    X = rng.normal(size=(8, 90))
    y = rng.integers(0, 2, 8)
    tr = forward(p, X)
    loss = compute_loss(tr, y)
    assert loss.total == pytest.approx(loss.ce + 0.05 * loss.diversity + 0.001 * loss.sparsity, abs=1e-12)
    assert loss.sparsity == pytest.approx(math.log(4))
    assert entropy([1.0, 0, 0, 0]) == 0.0


def test_diversity_near_zero_for_independent_concepts():
    C = np.random.default_rng(0).uniform(size=(1024, 4))
    assert diversity_loss(C) < 0.02


def test_diversity_constant_column_is_zero():
    C = np.random.default_rng(0).uniform(size=(16, 4))
    C[:, 2] = 0.3
    C[:, 1] = C[:, 0]
    # pairs (0,1) correlate perfectly, column 2 contributes nothing: 2 of 12 ordered pairs
    assert diversity_loss(C) == pytest.approx(2 / 12 + np.mean(
        [np.corrcoef(C[:, i], C[:, j])[0, 1] ** 2 for i, j in ((0, 3), (3, 0), (1, 3), (3, 1))]) * 4 / 12)


def test_clipping_bound():
    g = {"a": np.full(10, 3.0), "b": np.full(3, -4.0)}
    clip_by_global_norm(g, 1.0)
    assert global_norm(g) <= 1.0 + 1e-9
    small = {"a": np.full(2, 0.1)}
    clip_by_global_norm(small, 1.0)
    np.testing.assert_array_equal(small["a"], 0.1)


def test_cosine_endpoints():
    assert cosine_lr(0, 150, 5e-4) == 5e-4
    assert cosine_lr(150, 150, 5e-4) <= 1e-9 * 5e-4
    assert cosine_lr(150, 150, 5e-4, 1e-5) == pytest.approx(1e-5)
    lrs = [cosine_lr(e, 150, 5e-4) for e in range(151)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_adamw_leaves_no_decay_params_unchanged_on_zero_gradient():
    p = init_params(0)
    before = {k: v.copy() for k, v in p.arrays.items()}
    opt = AdamW(p.arrays, weight_decay=1e-3)
    opt.step(p.arrays, {k: np.zeros_like(v) for k, v in p.arrays.items()}, lr=5e-4)
    for k in p.arrays:
        if k in NO_DECAY:
            np.testing.assert_array_equal(p.arrays[k], before[k])
    np.testing.assert_allclose(p.arrays["eye.W_h"], before["eye.W_h"] * (1 - 5e-4 * 1e-3))


def test_adamw_frozen_parameter_untouched():
    p = init_params(0)
    before = p.arrays["logic.tau_hat"].copy()
    opt = AdamW(p.arrays)
    opt.step(p.arrays, {k: np.ones_like(v) for k, v in p.arrays.items()}, 1e-2, frozen=("logic.tau_hat",))
    np.testing.assert_array_equal(p.arrays["logic.tau_hat"], before)


def test_early_stopping_arithmetic():
    stop = EarlyStopping(20)
    epochs = [e for e in range(1, 100) if stop.update(e, float(e))]
    assert epochs[0] == 21
    assert stop.best_epoch == 1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=150, max_epochs=150)


def test_split_validation_by_subject_and_stratified():
    y = np.tile([0, 1], 50)
    groups = np.repeat([f"S{i}" for i in range(5)], 20)
    val = split_validation(y, groups, 0.2, 0)
    assert len(set(groups[val])) == 1
    val = split_validation(y, None, 0.2, 0)
    assert val[y == 0].sum() == 10 and val[y == 1].sum() == 10


def _toy(n=64, seed=0):
    rng = np.random.default_rng(seed)
    y = np.tile([0, 1], n // 2)
    X = rng.normal(size=(n, 90)) + 1.5 * y[:, None] * (rng.uniform(size=90) > 0.5)
    return X, y


def test_training_is_deterministic():
    X, y = _toy()
    cfg = TrainConfig(max_epochs=5, patience=3)
    a = train_model(X, y, config=cfg)
    b = train_model(X, y, config=cfg)
    assert a[1].rows == b[1].rows
    for k in a[0].arrays:
        np.testing.assert_array_equal(a[0][k], b[0][k])


def test_single_class_training():
    X, _ = _toy()
    with pytest.raises(SingleClassTraining):
        train_model(X, np.zeros(len(X), dtype=int), config=TrainConfig(max_epochs=2, patience=1))


def test_training_log_csv(tmp_path):
    X, y = _toy()
    _, log = train_model(X, y, X[:8], y[:8], TrainConfig(max_epochs=3, patience=2))
    log.to_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,train_ce,train_div,train_sparse,val_loss,val_acc"
    assert len(lines) == 4
