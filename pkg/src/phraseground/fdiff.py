"""Central finite-difference utilities shared by the gradient checkers."""

from __future__ import annotations

import numpy as np

from .ops import as_f64


def finite_difference_gradient(f, arr, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. every element of `arr`.

    `arr` is perturbed in place and restored, so f may simply re-read the
    live parameter."""
    arr = np.asarray(arr)
    out = np.zeros_like(arr, dtype=np.float64)
    flat, g = arr.ravel(), out.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        lp = f()
        flat[i] = orig - step
        lm = f()
        flat[i] = orig
        g[i] = (lp - lm) / (2.0 * step)
    return out


def relative_errors(analytic, numeric, floor: float) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor) elementwise.

    The floor absorbs finite-difference roundoff on near-zero gradients; an
    absolute error above tol*floor still registers."""
    a, n = as_f64(analytic), as_f64(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom
