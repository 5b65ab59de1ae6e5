"""Float64 array operations with explicit forward/backward pairs.

Forward functions validate operand shapes and reject non-finite results: a
NaN or Inf is raised as NumericError, never returned.  Backward functions are
op-local vector-Jacobian products; callers compose them in reverse graph
order and keep their own caches.  There is no tape.

All functions are pure (operands are never mutated), so values can be shared
freely between threads.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, NumericError

Array = np.ndarray


def as_f64(x) -> Array:
    """View/convert input as a float64 ndarray."""
    return np.asarray(x, dtype=np.float64)


def ensure_finite(arr, context: str):
    """Raise NumericError if `arr` holds NaN or Inf; return `arr` unchanged."""
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {context}")
    return arr


# ---------------------------------------------------------------------------
# dense products

def matmul(a, b) -> Array:
    """Matrix product of a (m,k) and b (k,n)."""
    a, b = as_f64(a), as_f64(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes do not chain: {a.shape} and {b.shape}")
    return ensure_finite(a @ b, "matmul output")


def matmul_backward(g, a, b):
    """VJP of matmul: upstream g (m,n) -> (g @ b.T, a.T @ g)."""
    g, a, b = as_f64(g), as_f64(a), as_f64(b)
    if g.shape != (a.shape[0], b.shape[1]):
        raise DimensionError(f"matmul grad shape {g.shape} does not match {a.shape} @ {b.shape}")
    return g @ b.T, a.T @ g


# ---------------------------------------------------------------------------
# elementwise

def relu(x) -> Array:
    """Elementwise max(0, x)."""
    return ensure_finite(np.maximum(as_f64(x), 0.0), "relu output")


def relu_backward(g, x) -> Array:
    """Pass gradient where x > 0; the subgradient at exactly 0 is 0."""
    return as_f64(g) * (as_f64(x) > 0.0)


def sigmoid(x) -> Array:
    """Elementwise logistic 1/(1+exp(-x)), overflow-safe at either tail."""
    x = as_f64(x)
    pos = x >= 0
    z = np.exp(np.where(pos, -x, x))  # exp of a non-positive value
    return ensure_finite(np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)), "sigmoid output")


def sigmoid_backward(g, x) -> Array:
    s = sigmoid(x)
    return as_f64(g) * s * (1.0 - s)


def tanh(x) -> Array:
    return ensure_finite(np.tanh(as_f64(x)), "tanh output")


def tanh_backward(g, x) -> Array:
    t = np.tanh(as_f64(x))
    return as_f64(g) * (1.0 - t * t)


def add(a, b) -> Array:
    """Elementwise sum of two same-shape arrays."""
    a, b = as_f64(a), as_f64(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} and {b.shape}")
    return ensure_finite(a + b, "add output")


def add_backward(g):
    g = as_f64(g)
    return g, g


def mul(a, b) -> Array:
    """Elementwise product of two same-shape arrays."""
    a, b = as_f64(a), as_f64(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} and {b.shape}")
    return ensure_finite(a * b, "mul output")


def mul_backward(g, a, b):
    g = as_f64(g)
    return g * as_f64(b), g * as_f64(a)


def bias_add(m, bias) -> Array:
    """Add bias (d,) to every row of m (B,d); the only broadcast this module does."""
    m, bias = as_f64(m), as_f64(bias)
    if m.ndim != 2 or bias.ndim != 1 or m.shape[1] != bias.shape[0]:
        raise DimensionError(f"bias_add shapes incompatible: {m.shape} and {bias.shape}")
    return ensure_finite(m + bias, "bias_add output")


def bias_add_backward(g):
    g = as_f64(g)
    return g, g.sum(axis=0)


def concat(parts) -> Array:
    """Concatenate a non-empty list of 1-D vectors."""
    parts = [as_f64(p) for p in parts]
    if not parts or any(p.ndim != 1 for p in parts):
        raise DimensionError("concat expects a non-empty list of vectors")
    return np.concatenate(parts)


def concat_backward(g, sizes):
    g = as_f64(g)
    if g.shape != (int(sum(sizes)),):
        raise DimensionError(f"concat grad shape {g.shape} does not match sizes {sizes}")
    return np.split(g, np.cumsum(sizes)[:-1])


def reduce_sum(x) -> float:
    return float(ensure_finite(np.sum(as_f64(x)), "reduce_sum output"))


def reduce_sum_backward(g: float, shape) -> Array:
    return np.full(shape, float(g), dtype=np.float64)


def reduce_mean(x) -> float:
    x = as_f64(x)
    if x.size == 0:
        raise DimensionError("reduce_mean of an empty array")
    return float(ensure_finite(np.mean(x), "reduce_mean output"))


def reduce_mean_backward(g: float, shape) -> Array:
    n = int(np.prod(shape))
    return np.full(shape, float(g) / n, dtype=np.float64)


# ---------------------------------------------------------------------------
# softmax and log-likelihood

def softmax_stable(logits) -> Array:
    """Probabilities exp(x_i - max x) / sum(...) for a non-empty 1-D vector.

    Shifting by the max keeps exp in range; the result sums to 1 and
    preserves the ordering of the inputs.
    """
    v = as_f64(logits)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"softmax expects a non-empty vector, got shape {v.shape}")
    ensure_finite(v, "softmax input")
    e = np.exp(v - v.max())
    return ensure_finite(e / e.sum(), "softmax output")


def softmax_backward(g, probs) -> Array:
    """VJP through softmax given its output probs: p * (g - p.g)."""
    g, p = as_f64(g), as_f64(probs)
    return p * (g - float(p @ g))


def log_likelihood_from_logits(logits, target: int) -> float:
    """Negative log softmax probability of `target`, evaluated in log space.

    loss = logsumexp(logits) - logits[target]; the probability itself is
    never materialized, so tiny values do not underflow to -inf.
    """
    v = as_f64(logits)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"log likelihood expects a non-empty vector, got shape {v.shape}")
    target = int(target)
    if not 0 <= target < v.size:
        raise IndexError(f"target {target} out of range for {v.size} logits")
    ensure_finite(v, "log likelihood input")
    # Shift by the target logit, not the max: when the target dominates the
    # loss is log1p(sum of tiny terms), which survives where
    # logsumexp(v) - v[target] would cancel to noise.
    shift = v - v[target]
    m = float(shift.max())  # >= 0 because shift[target] == 0
    if m == 0.0:
        rest = float(np.exp(np.delete(shift, target)).sum())
        return float(np.log1p(rest))
    return m + math.log(float(np.exp(shift - m).sum()))


def log_likelihood_backward(logits, target: int, upstream: float = 1.0) -> Array:
    """Gradient of the negative log likelihood: softmax(logits) - onehot(target)."""
    p = softmax_stable(logits)
    p[int(target)] -= 1.0
    return p * float(upstream)
