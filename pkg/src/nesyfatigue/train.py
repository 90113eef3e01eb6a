"""Loss, reverse-mode gradients and the AdamW training loop.

The compute graph is fixed, so the backward pass is written out by hand
against the cached :class:`~nesyfatigue.model.ForwardTrace`. Gradients are
checked against central finite differences in the test suite.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .exceptions import MissingTrace, SingleClassTraining
from .fuzzy import tconorm_grad
from .model import NO_DECAY, ForwardTrace, ModelParams, forward, gelu_grad, init_params


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 150
    patience: int = 20
    grad_clip: float = 1.0
    lambda_div: float = 0.05
    lambda_sparse: float = 0.001
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    min_lr: float = 0.0
    val_fraction: float = 0.2
    learn_thresholds: bool = True
    seed: int = 42

    def __post_init__(self):
        for name in ("lr", "batch_size", "max_epochs", "patience", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.lambda_div < 0 or self.lambda_sparse < 0:
            raise ValueError("weight_decay and loss weights must be non-negative")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    ce: float
    diversity: float
    sparsity: float
    lambda1: float = 0.05
    lambda2: float = 0.001


# ---------------------------------------------------------------------------
# loss terms


def _standardize(C):
    """Column z-scores (population SD); constant columns map to zero."""
    Z = C - C.mean(axis=0)
    sd = np.sqrt((Z * Z).mean(axis=0))
    ok = sd > 1e-12
    U = np.zeros_like(Z)
    U[:, ok] = Z[:, ok] / sd[ok]
    return U, sd, ok


def concept_correlation(C) -> np.ndarray:
    C = np.atleast_2d(C)
    U, _, _ = _standardize(C)
    return U.T @ U / len(C)


def diversity_loss(C):
    """Mean squared off-diagonal Pearson correlation between concept columns."""
    R = concept_correlation(C)
    k = R.shape[0]
    off = R[~np.eye(k, dtype=bool)]
    return float(np.mean(off * off))


def diversity_grad(C):
    C = np.atleast_2d(C)
    n, k = C.shape
    U, sd, ok = _standardize(C)
    R = U.T @ U / n
    G = 2.0 * R / (k * (k - 1))
    np.fill_diagonal(G, 0.0)
    dU = 2.0 * U @ G / n
    dC = np.zeros_like(C)
    # backward through column standardization
    m_g = dU.mean(axis=0)
    m_gu = (dU * U).mean(axis=0)
    dC[:, ok] = (dU[:, ok] - m_g[ok] - U[:, ok] * m_gu[ok]) / sd[ok]
    return dC


def entropy(p):
    p = np.asarray(p, dtype=float)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def bce_with_logits(z, y):
    """Mean binary cross-entropy evaluated on logits."""
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def compute_loss(trace: ForwardTrace, y, lambda1=0.05, lambda2=0.001) -> LossBreakdown:
    y = np.asarray(y, dtype=float)
    ce = bce_with_logits(trace.z, y)
    div = diversity_loss(trace.C) if len(y) >= 2 else 0.0
    sparse = entropy(trace.alpha) if trace.alpha is not None else 0.0
    return LossBreakdown(ce + lambda1 * div + lambda2 * sparse, ce, div, sparse, lambda1, lambda2)


# ---------------------------------------------------------------------------
# backward


def _encoder_backward(params, prefix, tr, dh_drop, grads):
    dh = dh_drop * tr.mask if tr.mask is not None else dh_drop
    dln = dh * gelu_grad(tr.ln)
    g = params[f"{prefix}.ln_g"]
    grads[f"{prefix}.ln_g"] = (dln * tr.xhat).sum(axis=0)
    grads[f"{prefix}.ln_b"] = dln.sum(axis=0)
    dxhat = dln * g
    dzh = tr.inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                        - tr.xhat * (dxhat * tr.xhat).mean(axis=1, keepdims=True))
    grads[f"{prefix}.W_h"] = dzh.T @ tr.u
    du = dzh @ params[f"{prefix}.W_h"]
    dza = du * tr.x * tr.a * (1.0 - tr.a)
    grads[f"{prefix}.W_a"] = dza.T @ tr.x


def backward(params: ModelParams, trace: ForwardTrace, y, lambda1=0.05, lambda2=0.001,
             learn_thresholds=True, upstream=1.0):
    """Gradients of :func:`compute_loss` w.r.t. every parameter array.

    ``upstream`` scales the loss gradient (0 gives all-zero gradients).
    Knocked-out concepts receive no gradient; with ``learn_thresholds``
    false the threshold gradient is forced to zero.
    """
    if trace is None or trace.eye is None:
        raise MissingTrace("backward needs the trace of a forward pass")
    y = np.asarray(y, dtype=float)
    n = len(y)
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    dz = upstream * (expit(trace.z) - y) / n
    dC = np.zeros_like(trace.C)
    if lambda1 and n >= 2:
        dC += upstream * lambda1 * diversity_grad(trace.C)

    if params.head == "logic":
        Ct, f, alpha = trace.Ct, trace.f, trace.alpha
        beta, w = params["logic.beta"], params["logic.agg_w"]
        grads["logic.agg_w"] = f.T @ dz
        grads["logic.agg_b"] = np.array([dz.sum()])
        df = dz[:, None] * w
        dCt = np.zeros_like(Ct)
        dbeta = np.empty(3)
        dbeta[0] = df[:, 0] @ Ct[:, 0]
        dCt[:, 0] += df[:, 0] * beta[0]
        dbeta[1] = df[:, 1] @ trace.s
        ds = df[:, 1] * beta[1]
        ga, gb = tconorm_grad(params.operator_family, Ct[:, 1], Ct[:, 2])
        dCt[:, 1] += ds * ga
        dCt[:, 2] += ds * gb
        dbeta[2] = df[:, 2] @ trace.g
        dg = df[:, 2] * beta[2]
        dCt += dg[:, None] * alpha
        grads["logic.beta"] = dbeta
        dalpha = Ct.T @ dg
        if lambda2:
            dalpha = dalpha - upstream * lambda2 * (np.log(alpha) + 1.0)
        grads["logic.w_alpha"] = alpha * (dalpha - alpha @ dalpha)
        dpre = dCt * Ct * (1.0 - Ct) * params.temperature
        dC += dpre
        if learn_thresholds:
            tau = trace.tau
            grads["logic.tau_hat"] = -dpre.sum(axis=0) * tau * (1.0 - tau)
    else:
        grads["head.u"] = trace.C.T @ dz
        grads["head.c"] = np.array([dz.sum()])
        dC += dz[:, None] * params["head.u"]

    if trace.knockout:
        dC[:, list(trace.knockout)] = 0.0
    dzc = dC * trace.C * (1.0 - trace.C)

    te, tf = trace.eye, trace.fnirs
    hid = params.hidden
    grads["eye.V"] = dzc[:, :2].T @ te.h_drop
    grads["eye.b"] = dzc[:, :2].sum(axis=0)
    grads["fnirs.V"] = dzc[:, 2:3].T @ tf.h_drop
    grads["fnirs.b"] = dzc[:, 2:3].sum(axis=0)
    joint = np.concatenate([te.h_drop, tf.h_drop], axis=1)
    grads["cross.v"] = joint.T @ dzc[:, 3]
    grads["cross.b"] = np.array([dzc[:, 3].sum()])
    v = params["cross.v"]
    dh_e = dzc[:, :2] @ params["eye.V"] + np.outer(dzc[:, 3], v[:hid])
    dh_f = dzc[:, 2:3] @ params["fnirs.V"] + np.outer(dzc[:, 3], v[hid:])
    _encoder_backward(params, "eye", te, dh_e, grads)
    _encoder_backward(params, "fnirs", tf, dh_f, grads)
    return grads


def loss_and_grads(params, X, y, config: TrainConfig, training=True, rng=None):
    trace = forward(params, X, training=training, rng=rng)
    loss = compute_loss(trace, y, config.lambda_div, config.lambda_sparse)
    grads = backward(params, trace, y, config.lambda_div, config.lambda_sparse, config.learn_thresholds)
    return loss, grads, trace


# ---------------------------------------------------------------------------
# optimizer pieces


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads, max_norm):
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def cosine_lr(epoch, max_epochs, base_lr, min_lr=0.0):
    """Cosine annealing from ``base_lr`` at epoch 0 to ``min_lr`` at ``max_epochs``."""
    frac = min(max(epoch / max_epochs, 0.0), 1.0)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay over a dict of arrays."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-3, no_decay=NO_DECAY):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = no_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float, frozen=()):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            if k in frozen:
                continue
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and k not in self.no_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True once
    ``patience`` consecutive epochs fail to improve on it."""

    def __init__(self, patience=20):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch, val_loss) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    COLUMNS = ("epoch", "lr", "train_loss", "train_ce", "train_div", "train_sparse", "val_loss", "val_acc")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def split_validation(y, groups=None, fraction=0.2, rng=None):
    """Boolean validation mask: whole subjects when at least 4 are present,
    otherwise a per-class random ``fraction`` of windows."""
    rng = np.random.default_rng(rng)
    y = np.asarray(y)
    val = np.zeros(len(y), dtype=bool)
    if fraction <= 0:
        return val
    if groups is not None:
        subjects = sorted(set(np.asarray(groups).tolist()))
        if len(subjects) >= 4:
            k = max(1, int(round(fraction * len(subjects))))
            chosen = set(rng.choice(np.array(subjects, dtype=object), size=k, replace=False).tolist())
            return np.array([g in chosen for g in groups])
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        k = int(round(fraction * len(idx)))
        if 0 < k < len(idx):
            val[rng.choice(idx, size=k, replace=False)] = True
    return val


def _accuracy(yhat, y):
    return float(np.mean((yhat >= 0.5).astype(int) == y))


def train_model(X_train, y_train, X_val=None, y_val=None, config: TrainConfig = TrainConfig(),
                params: ModelParams | None = None, callback=None, **init_kwargs):
    """Fit a model with AdamW, cosine annealing, clipping and early stopping.

    Returns ``(best_params, log)``; the best epoch is the one with the lowest
    validation loss (training loss when no validation set is given).
    ``callback(step, grads)`` is invoked after clipping on every step.
    """
    X_train = np.asarray(X_train, dtype=float)
    y_train = np.asarray(y_train, dtype=int)
    if len(np.unique(y_train)) < 2:
        raise SingleClassTraining("training data must contain both classes")
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in seeds)
    if params is None:
        n_eye = init_kwargs.pop("n_eye", 42)
        params = init_params(init_rng, n_eye=n_eye, n_fnirs=X_train.shape[1] - n_eye, **init_kwargs)
    params = params.copy()
    frozen = () if config.learn_thresholds or params.head != "logic" else ("logic.tau_hat",)
    if frozen:
        params.arrays["logic.tau_hat"][:] = 0.0
    opt = AdamW(params.arrays, config.betas, config.adam_eps, config.weight_decay)
    stopper = EarlyStopping(config.patience)
    log = TrainingLog()
    best = params.copy()
    has_val = X_val is not None and len(X_val) > 0
    n = len(X_train)
    step = 0

    for epoch in range(1, config.max_epochs + 1):
        lr = cosine_lr(epoch - 1, config.max_epochs, config.lr, config.min_lr)
        order = shuffle_rng.permutation(n)
        totals = np.zeros(4)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads, _ = loss_and_grads(params, X_train[idx], y_train[idx], config, True, dropout_rng)
            clip_by_global_norm(grads, config.grad_clip)
            if callback is not None:
                callback(step, grads)
            opt.step(params.arrays, grads, lr, frozen)
            step += 1
            totals += len(idx) * np.array([loss.total, loss.ce, loss.diversity, loss.sparsity])
        totals /= n
        if has_val:
            vt = forward(params, X_val)
            vloss = compute_loss(vt, y_val, config.lambda_div, config.lambda_sparse).total
            vacc = _accuracy(vt.yhat, np.asarray(y_val))
        else:
            vt = forward(params, X_train)
            vloss = compute_loss(vt, y_train, config.lambda_div, config.lambda_sparse).total
            vacc = _accuracy(vt.yhat, y_train)
        log.rows.append(dict(epoch=epoch, lr=lr, train_loss=float(totals[0]), train_ce=float(totals[1]),
                             train_div=float(totals[2]), train_sparse=float(totals[3]),
                             val_loss=float(vloss), val_acc=vacc))
        stop = stopper.update(epoch, vloss)
        if stopper.best_epoch == epoch:
            best = params.copy()
        log.stopped_epoch = epoch
        if stop:
            break
    log.best_epoch = stopper.best_epoch
    return best, log


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["betas"] = list(config.betas)
    return d
