"""Shared independent oracles for the test suite.

Everything here is deliberately naive (loops, finite differences) so it
stays independent of the library paths it checks.
"""
from __future__ import annotations

import numpy as np


def central_difference(f, x, step=1e-5):
    """Central finite-difference gradient of scalar f at flat vector x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


def naive_mlp_forward(widths, w_list, b_list, x, slope):
    """Straight-line re-evaluation of a plain leaky-ReLU MLP."""
    h = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(zip(w_list, b_list)):
        h = h @ w + b
        if i < len(w_list) - 1:
            h = np.where(h >= 0, h, slope * h)
    return h


def naive_gmm_log_density(weights, means, stds, x):
    """Direct (unstabilized) mixture log density."""
    total = 0.0
    d = means.shape[1]
    for wk, mk, sk in zip(weights, means, stds):
        sq = float(np.sum((x - mk) ** 2))
        total += wk * np.exp(-0.5 * sq / sk**2) / (2.0 * np.pi * sk**2) ** (d / 2)
    return np.log(total)


def reference_adam(values, grad_fn, lr, beta1, beta2, eps, steps, ascent=False):
    """Textbook Adam loop, kept separate from the library version."""
    x = np.array(values, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1**t)
        vh = v / (1 - beta2**t)
        upd = lr * mh / (np.sqrt(vh) + eps)
        x = x + upd if ascent else x - upd
    return x


def relative_error(approx, exact):
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = max(np.max(np.abs(exact)), 1e-12)
    return np.max(np.abs(approx - exact)) / denom
