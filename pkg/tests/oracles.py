"""Independent reference implementations the tests compare against.

Each oracle is deliberately naive (loops, enumeration, textbook formulas)
and shares no code with the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def sampen_direct(x, m=2, r=None):
    """O(n^2) sample entropy: count template pairs i < j among the first N - m starts."""
    x = [float(v) for v in x]
    n = len(x)
    if r is None:
        mean = sum(x) / n
        r = 0.2 * math.sqrt(sum((v - mean) ** 2 for v in x) / n)
    b = a = 0
    for i in range(n - m):
        for j in range(i + 1, n - m):
            if max(abs(x[i + k] - x[j + k]) for k in range(m)) <= r:
                b += 1
                if abs(x[i + m] - x[j + m]) <= r:
                    a += 1
    if a == 0 or b == 0:
        return float("nan")
    return -math.log(a / b)


def fgn_circulant(n, hurst, rng):
    """Fractional Gaussian noise by circulant embedding (Davies-Harte)."""
    k = np.arange(n + 1)
    gamma = 0.5 * (np.abs(k + 1) ** (2 * hurst) - 2 * np.abs(k) ** (2 * hurst) + np.abs(k - 1) ** (2 * hurst))
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    lam = np.fft.fft(row).real
    if np.any(lam < 0):
        raise ValueError("circulant embedding is not non-negative definite")
    m = len(row)
    w = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    z = np.fft.fft(np.sqrt(lam / m) * w)
    return z.real[:n]


def average_ranks(values):
    """1-based ranks of ``values`` with ties sharing the mean of their positions."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and values[order[j]] == values[order[i]]:
            j += 1
        for k in range(i, j):
            ranks[order[k]] = (i + 1 + j) / 2
        i = j
    return ranks


def wilcoxon_null(ranks):
    """W+ for every one of the 2^n sign assignments, by brute force."""
    return np.array([sum(r for r, s in zip(ranks, signs) if s)
                     for signs in itertools.product((0, 1), repeat=len(ranks))])


def wilcoxon_enumerate(diffs, null=None):
    """Exhaustive two-sided Wilcoxon test. Returns ``(W, W+, W-, p)``."""
    d = [v for v in diffs if v != 0]
    ranks = average_ranks([abs(v) for v in d])
    w_plus = sum(r for r, v in zip(ranks, d) if v > 0)
    w_minus = sum(r for r, v in zip(ranks, d) if v < 0)
    observed = min(w_plus, w_minus)
    if null is None:
        null = wilcoxon_null(ranks)
    p = min(1.0, 2 * float(np.mean(null <= observed + 1e-9)))
    return observed, w_plus, w_minus, p


def pearson_on_binary(x, y):
    """Plain Pearson correlation formula applied to a 0/1 label vector."""
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def central_difference(f, arrays, h=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of every array (mutated in place)."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def _encode_scalar(x, W_a, W_h, g, b):
    d = len(x)
    a = [_sig(sum(W_a[i][j] * x[j] for j in range(d))) for i in range(d)]
    u = [x[i] * a[i] for i in range(d)]
    pre = [sum(W_h[k][j] * u[j] for j in range(d)) for k in range(len(W_h))]
    mean = sum(pre) / len(pre)
    var = sum((p - mean) ** 2 for p in pre) / len(pre)
    ln = [g[k] * (pre[k] - mean) / math.sqrt(var + 1e-5) + b[k] for k in range(len(pre))]
    return [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in ln]


def forward_scalar(arrays, x, n_eye, family="product", temperature=2.0):
    """Single-window inference written with Python floats only. Returns (C, Ct, f, yhat)."""
    A = {k: np.asarray(v).tolist() for k, v in arrays.items()}
    x = list(map(float, x))
    he = _encode_scalar(x[:n_eye], A["eye.W_a"], A["eye.W_h"], A["eye.ln_g"], A["eye.ln_b"])
    hf = _encode_scalar(x[n_eye:], A["fnirs.W_a"], A["fnirs.W_h"], A["fnirs.ln_g"], A["fnirs.ln_b"])

    def dot(w, h):
        return sum(p * q for p, q in zip(w, h))

    C = [_sig(dot(A["eye.V"][0], he) + A["eye.b"][0]),
         _sig(dot(A["eye.V"][1], he) + A["eye.b"][1]),
         _sig(dot(A["fnirs.V"][0], hf) + A["fnirs.b"][0]),
         _sig(dot(A["cross.v"], he + hf) + A["cross.b"][0])]
    tau = [_sig(t) for t in A["logic.tau_hat"]]
    Ct = [_sig(temperature * (c - t)) for c, t in zip(C, tau)]
    p, q = Ct[1], Ct[2]
    s = {"product": p + q - p * q, "lukasiewicz": min(1.0, p + q), "goedel": max(p, q)}[family]
    e = [math.exp(w) for w in A["logic.w_alpha"]]
    alpha = [v / sum(e) for v in e]
    beta = A["logic.beta"]
    f = [beta[0] * Ct[0], beta[1] * s, beta[2] * sum(al * c for al, c in zip(alpha, Ct))]
    z = dot(A["logic.agg_w"], f) + A["logic.agg_b"][0]
    return C, Ct, f, _sig(z)
