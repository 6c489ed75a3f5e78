"""Shared oracles for the test suite.

Everything here is written independently of the library internals it checks:
plain loops and textbook formulas, no calls back into the code under test
beyond evaluating it as a black box.
"""

from __future__ import annotations

import numpy as np


def finite_difference_grad(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    base = x.copy()
    for i in range(x.size):
        bumped = base.copy().ravel()
        bumped[i] += eps
        hi = fn(bumped.reshape(x.shape))
        bumped[i] -= 2 * eps
        lo = fn(bumped.reshape(x.shape))
        flat[i] = (hi - lo) / (2 * eps)
    return grad


def finite_difference_pack_grad(fn, params: dict[str, np.ndarray], eps: float = 1e-6) -> dict[str, np.ndarray]:
    """Central-difference gradients for a scalar function of a parameter pack."""
    out = {}
    for name in params:
        def partial(value, _name=name):
            bumped = dict(params)
            bumped[_name] = value
            return fn(bumped)

        out[name] = finite_difference_grad(partial, params[name], eps=eps)
    return out


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = max(float(np.linalg.norm(exact)), 1e-12)
    return float(np.linalg.norm(approx - exact) / denom)


def mmd_unbiased_reference(x: np.ndarray, y: np.ndarray, bandwidths) -> float:
    """Textbook unbiased squared MMD with a Gaussian kernel mixture."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def gram(u, v):
        d2 = ((u[:, None, :] - v[None, :, :]) ** 2).sum(axis=-1)
        return sum(np.exp(-d2 / (2.0 * bw**2)) for bw in bandwidths)

    kxx, kyy, kxy = gram(x, x), gram(y, y), gram(x, y)
    n, m = len(x), len(y)
    return float(
        (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
        + (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
        - 2.0 * kxy.mean()
    )


def dense_reference(spec, params: dict, x: np.ndarray, prefix: str = "") -> np.ndarray:
    """Straight-line reimplementation of a dense forward pass."""
    acts = {
        "tanh": np.tanh,
        "relu": lambda v: np.maximum(v, 0.0),
        "swish": lambda v: v / (1.0 + np.exp(-v)),
    }
    n_layers = len(spec.layer_dims)
    out = np.asarray(x, dtype=np.float64)
    for k in range(n_layers):
        w = params[f"{prefix}w{k}"]
        b = params[f"{prefix}b{k}"]
        rows = []
        for row in out:
            rows.append([float(row @ w[:, j] + b[j]) for j in range(w.shape[1])])
        out = np.array(rows)
        if k < n_layers - 1:
            out = acts[spec.activation](out)
    return out
