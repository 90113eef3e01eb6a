"""Concept-bottleneck forward pass and the fuzzy rule layer.

Two attention-gated encoders map the normalized eye (42-d) and fNIRS (48-d)
slices to 64-d hidden states. Concept heads produce C1, C2 (eye), C3
(fNIRS) and C4 (from both hidden states concatenated). The rule layer
soft-thresholds the concepts and fires three rules::

    f1 = beta1 * Ct1
    f2 = beta2 * (Ct2 OR Ct3)
    f3 = beta3 * sum_i alpha_i * Ct_i,   alpha = softmax(w_alpha)

and outputs ``yhat = sigmoid(w . f + b)``. With ``head="linear"`` the rule
layer is replaced by ``sigmoid(u . C + c)``.

Parameters live in a flat ``{name: ndarray}`` mapping so that optimizers,
gradient checks and checkpoints can treat them uniformly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, ndtr

from .exceptions import DimensionMismatch, NonFiniteActivation
from .fuzzy import OperatorFamily, tconorm

N_CONCEPTS = 4
N_RULES = 3
CONCEPT_NAMES = ("oculomotor", "gaze_stability", "prefrontal", "multimodal")
EYE_CONCEPTS = (0, 1)
LN_EPS = 1e-5
CHECKPOINT_FORMAT = "nesyfatigue.params"
CHECKPOINT_VERSION = 1

# parameters excluded from weight decay
NO_DECAY = frozenset({
    "eye.ln_b", "eye.b", "fnirs.ln_b", "fnirs.b", "cross.b",
    "logic.tau_hat", "logic.w_alpha", "logic.beta", "logic.agg_b", "head.c",
})


def gelu(x):
    return x * ndtr(x)


def gelu_grad(x):
    return ndtr(x) + x * np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)


def softmax(w):
    e = np.exp(w - np.max(w))
    return e / e.sum()


@dataclass
class ModelParams:
    """All learnable arrays plus the fixed architectural settings.

    Array names: ``{eye,fnirs}.{W_a,W_h,ln_g,ln_b,V,b}``, ``cross.{v,b}`` and
    either ``logic.{tau_hat,w_alpha,beta,agg_w,agg_b}`` or ``head.{u,c}``.
    """

    arrays: dict[str, np.ndarray]
    operator_family: OperatorFamily = OperatorFamily.PRODUCT
    head: str = "logic"
    temperature: float = 2.0
    dropout: float = 0.3

    def __post_init__(self):
        self.operator_family = OperatorFamily.parse(self.operator_family)
        if self.head not in ("logic", "linear"):
            raise ValueError(f"head must be 'logic' or 'linear', got {self.head!r}")

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def n_eye(self) -> int:
        return self.arrays["eye.W_a"].shape[0]

    @property
    def n_fnirs(self) -> int:
        return self.arrays["fnirs.W_a"].shape[0]

    @property
    def hidden(self) -> int:
        return self.arrays["eye.W_h"].shape[0]

    def copy(self) -> ModelParams:
        return ModelParams({k: v.copy() for k, v in self.arrays.items()},
                           self.operator_family, self.head, self.temperature, self.dropout)

    def with_arrays(self, arrays) -> ModelParams:
        return ModelParams(arrays, self.operator_family, self.head, self.temperature, self.dropout)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())

    # checkpoint -----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "operator_family": self.operator_family.value,
            "head": self.head,
            "temperature": self.temperature,
            "dropout": self.dropout,
            "arrays": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in sorted(self.arrays.items())},
        }

    @classmethod
    def from_dict(cls, doc) -> ModelParams:
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a version-1 nesyfatigue parameter checkpoint")
        arrays = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in doc["arrays"].items()}
        return cls(arrays, doc["operator_family"], doc["head"], doc["temperature"], doc["dropout"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> ModelParams:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def neutral_firing(operator_family="product") -> np.ndarray:
    """Rule firings (beta = 1) when every thresholded concept sits at 0.5."""
    half = np.full((1, N_CONCEPTS), 0.5)
    return fire_rules(half, np.ones(N_RULES), np.zeros(N_CONCEPTS), operator_family)[0][0]


def init_params(rng=None, n_eye=42, n_fnirs=48, hidden=64, operator_family="product",
                head="logic", temperature=2.0, dropout=0.3) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases, tau_hat = w_alpha = 0, beta = w = 1.

    The aggregation bias starts at ``-w . f_neutral`` so a window whose
    concepts all sit at their thresholds scores exactly 0.5; with bias 0 the
    logit of every window would start between 1 and 2.2.
    """
    rng = np.random.default_rng(rng)
    a = {}
    for enc, d, k in (("eye", n_eye, len(EYE_CONCEPTS)), ("fnirs", n_fnirs, 1)):
        a[f"{enc}.W_a"] = _uniform(rng, (d, d), d)
        a[f"{enc}.W_h"] = _uniform(rng, (hidden, d), d)
        a[f"{enc}.ln_g"] = np.ones(hidden)
        a[f"{enc}.ln_b"] = np.zeros(hidden)
        a[f"{enc}.V"] = _uniform(rng, (k, hidden), hidden)
        a[f"{enc}.b"] = np.zeros(k)
    a["cross.v"] = _uniform(rng, (2 * hidden,), 2 * hidden)
    a["cross.b"] = np.zeros(1)
    if head == "logic":
        a["logic.tau_hat"] = np.zeros(N_CONCEPTS)
        a["logic.w_alpha"] = np.zeros(N_CONCEPTS)
        a["logic.beta"] = np.ones(N_RULES)
        a["logic.agg_w"] = np.ones(N_RULES)
        a["logic.agg_b"] = np.array([-neutral_firing(operator_family) @ a["logic.agg_w"]])
    else:
        a["head.u"] = _uniform(rng, (N_CONCEPTS,), N_CONCEPTS)
        a["head.c"] = np.zeros(1)
    return ModelParams(a, operator_family, head, temperature, dropout)


def zero_params(**kwargs) -> ModelParams:
    """Every array zeroed (LayerNorm gain included); forward then yields yhat = 0.5."""
    p = init_params(0, **kwargs)
    return p.with_arrays({k: np.zeros_like(v) for k, v in p.arrays.items()})


@dataclass
class EncoderTrace:
    x: np.ndarray
    a: np.ndarray  # attention
    u: np.ndarray  # x * a
    xhat: np.ndarray  # LayerNorm-standardized pre-activation
    inv_std: np.ndarray
    ln: np.ndarray
    h: np.ndarray  # GELU output
    mask: np.ndarray | None  # inverted-dropout multiplier, None at inference
    h_drop: np.ndarray


@dataclass
class ForwardTrace:
    """Intermediates of one batched forward pass (rows are windows)."""

    eye: EncoderTrace
    fnirs: EncoderTrace
    C: np.ndarray  # (n, 4) concept activations, after any knockout
    Ct: np.ndarray | None  # (n, 4) soft-thresholded
    s: np.ndarray | None  # (n,) t-conorm of Ct2, Ct3
    g: np.ndarray | None  # (n,) alpha-weighted concept sum
    f: np.ndarray | None  # (n, 3) rule firings
    z: np.ndarray  # (n,) logit
    yhat: np.ndarray
    knockout: tuple[int, ...] = ()
    alpha: np.ndarray | None = None
    tau: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def predictions(self) -> np.ndarray:
        return (self.yhat >= 0.5).astype(int)


def layer_norm(z, gain, bias):
    mu = z.mean(axis=1, keepdims=True)
    var = z.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (z - mu) * inv_std
    return xhat * gain + bias, xhat, inv_std


def encode(params: ModelParams, prefix: str, x, training=False, rng=None, mask=None):
    """Attention-gated encoder; returns ``(owned concepts, trace)``.

    ``a = sigmoid(W_a x)``, ``h = GELU(LN(W_h (x * a)))``, dropout on ``h``
    when training, then ``C = sigmoid(V h + b)``. A precomputed dropout
    ``mask`` may be supplied to replay a training pass exactly.
    """
    W_a, W_h = params[f"{prefix}.W_a"], params[f"{prefix}.W_h"]
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != W_a.shape[1]:
        raise DimensionMismatch(f"{prefix} encoder expects {W_a.shape[1]} inputs, got {x.shape[1]}")
    a = expit(x @ W_a.T)
    u = x * a
    ln, xhat, inv_std = layer_norm(u @ W_h.T, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])
    h = gelu(ln)
    if mask is None and training and params.dropout > 0:
        rng = np.random.default_rng(rng)
        keep = 1.0 - params.dropout
        mask = (rng.random(h.shape) < keep) / keep
    h_drop = h * mask if mask is not None else h
    concepts = expit(h_drop @ params[f"{prefix}.V"].T + params[f"{prefix}.b"])
    return concepts, EncoderTrace(x, a, u, xhat, inv_std, ln, h, mask, h_drop)


def soft_threshold(C, tau_hat, temperature=2.0):
    """``sigmoid(T * (C - sigmoid(tau_hat)))`` elementwise."""
    return expit(temperature * (np.asarray(C, dtype=float) - expit(tau_hat)))


def fire_rules(Ct, beta, w_alpha, family="product"):
    """Rule firings ``(n, 3)`` plus the intermediate OR and weighted sum."""
    Ct = np.atleast_2d(Ct)
    alpha = softmax(w_alpha)
    s = tconorm(family, Ct[:, 1], Ct[:, 2])
    g = Ct @ alpha
    f = np.column_stack([beta[0] * Ct[:, 0], beta[1] * s, beta[2] * g])
    return f, s, g, alpha


def aggregate(f, agg_w, agg_b):
    """Logit and probability of the fatigued class."""
    z = np.atleast_2d(f) @ agg_w + agg_b[0]
    return z, expit(z)


def forward(params: ModelParams, X, training=False, rng=None, knockout=(), masks=None) -> ForwardTrace:
    """Full pass from normalized 90-d features to ``yhat``.

    ``knockout`` lists 0-based concept indices zeroed before thresholding.
    ``masks`` replays dropout masks ``(eye_mask, fnirs_mask)`` from a
    previous trace.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ne, nf = params.n_eye, params.n_fnirs
    if X.shape[1] != ne + nf:
        raise DimensionMismatch(f"model expects {ne + nf} features, got {X.shape[1]}")
    if training and masks is None:
        rng = np.random.default_rng(rng)
    me, mf = masks if masks is not None else (None, None)
    c_eye, te = encode(params, "eye", X[:, :ne], training, rng, me)
    c_nirs, tf = encode(params, "fnirs", X[:, ne:], training, rng, mf)
    joint = np.concatenate([te.h_drop, tf.h_drop], axis=1)
    c_cross = expit(joint @ params["cross.v"] + params["cross.b"][0])
    C = np.column_stack([c_eye, c_nirs, c_cross])
    knockout = tuple(sorted(set(int(k) for k in knockout)))
    if knockout:
        C[:, list(knockout)] = 0.0

    if params.head == "logic":
        Ct = soft_threshold(C, params["logic.tau_hat"], params.temperature)
        f, s, g, alpha = fire_rules(Ct, params["logic.beta"], params["logic.w_alpha"], params.operator_family)
        z, yhat = aggregate(f, params["logic.agg_w"], params["logic.agg_b"])
        trace = ForwardTrace(te, tf, C, Ct, s, g, f, z, yhat, knockout, alpha, expit(params["logic.tau_hat"]))
    else:
        z = C @ params["head.u"] + params["head.c"][0]
        trace = ForwardTrace(te, tf, C, None, None, None, None, z, expit(z), knockout)
    if not np.all(np.isfinite(trace.z)):
        raise NonFiniteActivation("non-finite logit in forward pass")
    return trace


def predict_proba(params: ModelParams, X, knockout=()) -> np.ndarray:
    return forward(params, X, knockout=knockout).yhat
