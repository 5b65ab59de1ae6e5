"""Parameterized building blocks: embeddings, a single LSTM cell, batch
normalization, and the weight initialization schemes.

Backward functions follow the same op-local VJP convention as ops.py: they
take the upstream gradient plus the forward cache and return gradients for
inputs and parameters.  Parameter objects are mutated only by their declared
single writer (batchnorm running stats during training, the optimizer for
weights); all math here is otherwise pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .ops import Array, as_f64, ensure_finite, sigmoid

INIT_SCHEMES = ("uniform", "xavier", "msra")


def init_params(shape, scheme: str, seed, *, uniform_limit: float = 0.1) -> Array:
    """Create a float64 tensor initialized per `scheme`; deterministic per seed.

    fan_in is shape[0] and fan_out is shape[-1].  "uniform" draws from
    U(-uniform_limit, uniform_limit); "xavier" draws uniform with variance
    2/(fan_in+fan_out); "msra" draws normal with variance 2/fan_in.  `seed`
    may be an int or a np.random.Generator.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise DimensionError(f"invalid parameter shape {shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if scheme == "uniform":
        return rng.uniform(-uniform_limit, uniform_limit, shape)
    fan_in, fan_out = shape[0], shape[-1]
    if scheme == "xavier":
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, shape)
    if scheme == "msra":
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
    raise ConfigError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")


# ---------------------------------------------------------------------------
# embeddings

@dataclass
class EmbeddingTable:
    """Token-id -> row lookup; weights (vocab_size, dim)."""

    weights: Array

    def __post_init__(self):
        self.weights = as_f64(self.weights)
        if self.weights.ndim != 2:
            raise DimensionError(f"embedding weights must be 2-D, got {self.weights.shape}")

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def create(cls, vocab_size: int, dim: int, seed) -> "EmbeddingTable":
        return cls(init_params((vocab_size, dim), "xavier", seed))

    def lookup(self, tokens) -> Array:
        """Rows for a sequence of token ids -> (len, dim).  Out-of-range ids raise IndexError."""
        ids = np.asarray(tokens, dtype=np.intp)
        if ids.ndim != 1 or ids.size == 0:
            raise DimensionError("token sequence must be a non-empty 1-D list of ids")
        if np.any(ids < 0) or np.any(ids >= self.vocab_size):
            raise IndexError(f"token id out of range for vocab of {self.vocab_size}")
        return self.weights[ids]


def embedding_backward(grad_rows, tokens, grad_weights: Array) -> None:
    """Scatter-add per-row gradients into the table gradient buffer."""
    np.add.at(grad_weights, np.asarray(tokens, dtype=np.intp), as_f64(grad_rows))


# ---------------------------------------------------------------------------
# LSTM cell

@dataclass
class LSTMCellParams:
    """Single-layer LSTM cell weights, gates fused in order (input, forget, output, candidate).

    w_x: (4H, input_dim), w_h: (4H, H), b: (4H,).
    """

    w_x: Array
    w_h: Array
    b: Array

    def __post_init__(self):
        self.w_x, self.w_h, self.b = as_f64(self.w_x), as_f64(self.w_h), as_f64(self.b)
        h4 = self.w_x.shape[0]
        if h4 % 4 or self.w_h.shape != (h4, h4 // 4) or self.b.shape != (h4,):
            raise DimensionError(
                f"inconsistent LSTM shapes: w_x {self.w_x.shape}, w_h {self.w_h.shape}, b {self.b.shape}"
            )

    @property
    def hidden_dim(self) -> int:
        return self.w_x.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[1]

    @classmethod
    def create(cls, input_dim: int, hidden_dim: int, seed, *,
               uniform_limit: float = 0.1, forget_bias: float = 1.0) -> "LSTMCellParams":
        # uniform init for recurrent weights; forget gate bias starts at 1 so
        # early steps keep their cell state
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        w_x = init_params((4 * hidden_dim, input_dim), "uniform", rng, uniform_limit=uniform_limit)
        w_h = init_params((4 * hidden_dim, hidden_dim), "uniform", rng, uniform_limit=uniform_limit)
        b = np.zeros(4 * hidden_dim)
        b[hidden_dim:2 * hidden_dim] = forget_bias
        return cls(w_x, w_h, b)


def _lstm_gates(params: LSTMCellParams, x: Array, h_prev: Array, c_prev: Array):
    hd = params.hidden_dim
    if x.shape != (params.input_dim,) or h_prev.shape != (hd,) or c_prev.shape != (hd,):
        raise DimensionError(
            f"lstm_step shapes: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} vs "
            f"input_dim {params.input_dim}, hidden_dim {hd}"
        )
    z = params.w_x @ x + params.w_h @ h_prev + params.b
    i = sigmoid(z[:hd])
    f = sigmoid(z[hd:2 * hd])
    o = sigmoid(z[2 * hd:3 * hd])
    g = np.tanh(z[3 * hd:])
    return i, f, o, g


def lstm_step_with_cache(params: LSTMCellParams, x, h_prev, c_prev):
    """One LSTM step -> (h, c, cache for the backward pass)."""
    x, h_prev, c_prev = as_f64(x), as_f64(h_prev), as_f64(c_prev)
    i, f, o, g = _lstm_gates(params, x, h_prev, c_prev)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    ensure_finite(h, "lstm_step output")
    return h, c, (x, h_prev, c_prev, i, f, o, g, tc)


def lstm_step(params: LSTMCellParams, x, h_prev, c_prev):
    """One LSTM step -> (h, c)."""
    h, c, _ = lstm_step_with_cache(params, x, h_prev, c_prev)
    return h, c


def lstm_step_backward(params: LSTMCellParams, cache, dh, dc, grads: dict):
    """VJP of one step.  Accumulates w_x/w_h/b grads into `grads` under the
    given keys ("w_x", "w_h", "b") and returns (dx, dh_prev, dc_prev)."""
    x, h_prev, c_prev, i, f, o, g, tc = cache
    dh, dc = as_f64(dh), as_f64(dc)
    do = dh * tc
    dct = dc + dh * o * (1.0 - tc * tc)
    di, df, dg = dct * g, dct * c_prev, dct * i
    dc_prev = dct * f
    dz = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        do * o * (1.0 - o),
        dg * (1.0 - g * g),
    ])
    grads["w_x"] += np.outer(dz, x)
    grads["w_h"] += np.outer(dz, h_prev)
    grads["b"] += dz
    return params.w_x.T @ dz, params.w_h.T @ dz, dc_prev


def encode_sequence_with_cache(params: LSTMCellParams, embeddings):
    """Run the cell over a sequence of input vectors from zero state.

    Returns (final hidden state, list of per-step caches)."""
    embeddings = as_f64(embeddings)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise DimensionError(f"encode_sequence expects (T, input_dim) with T >= 1, got {embeddings.shape}")
    h = np.zeros(params.hidden_dim)
    c = np.zeros(params.hidden_dim)
    caches = []
    for x in embeddings:
        h, c, cache = lstm_step_with_cache(params, x, h, c)
        caches.append(cache)
    return h, caches


def encode_sequence(params: LSTMCellParams, embeddings) -> Array:
    """Final hidden state of the cell run over (T, input_dim) from zero state."""
    h, _ = encode_sequence_with_cache(params, embeddings)
    return h


def encode_sequence_backward(params: LSTMCellParams, caches, dh_final, grads: dict) -> Array:
    """Backprop through time; returns d_embeddings (T, input_dim)."""
    dh = as_f64(dh_final)
    dc = np.zeros(params.hidden_dim)
    d_emb = np.empty((len(caches), params.input_dim))
    for t in range(len(caches) - 1, -1, -1):
        dx, dh, dc = lstm_step_backward(params, caches[t], dh, dc, grads)
        d_emb[t] = dx
    return d_emb


# ---------------------------------------------------------------------------
# batch normalization

@dataclass
class BatchNormParams:
    """Per-feature scale/shift with running statistics for inference.

    Training (the single writer) folds each batch's mean/var into the running
    stats by `momentum`; inference reads them and never writes.
    """

    scale: Array
    shift: Array
    running_mean: Array
    running_var: Array
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        self.scale, self.shift = as_f64(self.scale), as_f64(self.shift)
        self.running_mean, self.running_var = as_f64(self.running_mean), as_f64(self.running_var)
        d = self.scale.shape
        if any(a.shape != d for a in (self.shift, self.running_mean, self.running_var)) or len(d) != 1:
            raise DimensionError("batchnorm parameter shapes must all be (dim,)")
        if not self.eps > 0:
            raise ConfigError("batchnorm eps must be > 0")

    @property
    def dim(self) -> int:
        return self.scale.shape[0]

    @classmethod
    def create(cls, dim: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormParams":
        return cls(np.ones(dim), np.zeros(dim), np.zeros(dim), np.ones(dim), momentum, eps)


def _bn_check(params: BatchNormParams, batch: Array):
    if batch.ndim != 2 or batch.shape[1] != params.dim:
        raise DimensionError(f"batchnorm expects (B, {params.dim}), got {batch.shape}")


def batchnorm_train_with_cache(params: BatchNormParams, batch, update_running: bool = True):
    """Normalize by batch statistics (biased variance) -> (out, cache).

    Requires B >= 2.  When `update_running` the running stats absorb this
    batch: r <- (1-momentum)*r + momentum*batch_stat."""
    batch = as_f64(batch)
    _bn_check(params, batch)
    if batch.shape[0] < 2:
        raise DimensionError(f"batchnorm train mode needs a batch of >= 2 rows, got {batch.shape[0]}")
    mu = batch.mean(axis=0)
    var = batch.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (batch - mu) * inv_std
    out = xhat * params.scale + params.shift
    if update_running:
        m = params.momentum
        params.running_mean = (1.0 - m) * params.running_mean + m * mu
        params.running_var = (1.0 - m) * params.running_var + m * var
    return ensure_finite(out, "batchnorm output"), (xhat, inv_std)


def batchnorm_infer(params: BatchNormParams, batch) -> Array:
    """Fixed affine map using running statistics; no state is touched."""
    batch = as_f64(batch)
    _bn_check(params, batch)
    inv_std = 1.0 / np.sqrt(params.running_var + params.eps)
    return ensure_finite((batch - params.running_mean) * inv_std * params.scale + params.shift,
                         "batchnorm output")


def batchnorm_forward(params: BatchNormParams, batch, mode: str) -> Array:
    """Batch normalization in "train" (batch stats, updates running stats) or
    "infer" (running stats) mode over rows of (B, dim)."""
    if mode == "train":
        out, _ = batchnorm_train_with_cache(params, batch)
        return out
    if mode == "infer":
        return batchnorm_infer(params, batch)
    raise ConfigError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")


def batchnorm_backward(params: BatchNormParams, cache, dout):
    """VJP of train-mode batchnorm -> (dbatch, dscale, dshift)."""
    xhat, inv_std = cache
    dout = as_f64(dout)
    n = xhat.shape[0]
    dshift = dout.sum(axis=0)
    dscale = (dout * xhat).sum(axis=0)
    dxhat = dout * params.scale
    dbatch = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dbatch, dscale, dshift
