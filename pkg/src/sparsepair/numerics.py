"""Stable scalar kernels and small dense-matrix helpers.

Everything runs in float64. Similarities are clipped to [-1, 1] before they
are divided by a temperature so exponent bounds stay at 1/tau.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import EmptyInput, ZeroRow

NORM_FLOOR = 1e-12


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains NaN or Inf")
    return a


def l2_normalize(m) -> np.ndarray:
    """Scale every row to unit Euclidean norm.

    Raises ZeroRow if any row has norm <= 1e-12.
    """
    a = as_matrix(m)
    norms = np.linalg.norm(a, axis=1)
    bad = np.flatnonzero(norms <= NORM_FLOOR)
    if bad.size:
        raise ZeroRow(f"row {int(bad[0])} has norm {norms[bad[0]]:.3g}")
    return a / norms[:, None]


def normalize_backward(w: np.ndarray, grad_z: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. ``z = w/|w|`` back to ``w`` (row-wise)."""
    norms = np.linalg.norm(w, axis=1, keepdims=True)
    z = w / norms
    radial = np.sum(grad_z * z, axis=1, keepdims=True)
    return (grad_z - radial * z) / norms


def pairwise_similarity(z) -> np.ndarray:
    """Dot-product similarity table, symmetrized and clipped to [-1, 1]."""
    a = as_matrix(z)
    s = a @ a.T
    s = 0.5 * (s + s.T)
    return np.clip(s, -1.0, 1.0)


def logsumexp(v: Sequence[float] | np.ndarray, scale: float = 1.0) -> float:
    """``scale * log(sum(exp(v / scale)))`` with a max shift."""
    x = np.asarray(v, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyInput("logsumexp of an empty sequence")
    if not scale > 0:
        raise ValueError("scale must be positive")
    top = x.max()
    return float(top + scale * np.log(np.sum(np.exp((x - top) / scale))))


def softmin(v: Sequence[float] | np.ndarray, scale: float = 1.0) -> float:
    """Smooth lower bound on ``min(v)``: ``-logsumexp(-v, scale)``."""
    return -logsumexp(-np.asarray(v, dtype=np.float64), scale)


def softmax_weights(v: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Gradient of ``logsumexp(v, scale)`` w.r.t. ``v``."""
    x = np.asarray(v, dtype=np.float64)
    e = np.exp((x - x.max()) / scale)
    return e / e.sum()


def stable_softplus(x):
    """``log(1 + e^x)`` as ``max(x, 0) + log1p(e^-|x|)``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest absolute discrepancy relative to the larger gradient scale."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), floor)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)
