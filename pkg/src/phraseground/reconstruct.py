"""Phrase reconstruction branch: attention-weighted visual aggregation, the
visual re-encoder, and the LSTM decoder that scores the original phrase.

The decoder consumes the re-encoded visual vector only at its first step and
is teacher forced: step 0 takes the visual input and predicts the first
token, step t >= 1 takes the embedding of target token t-1, and the final
step predicts end-of-sequence.  A phrase of T tokens therefore produces
T + 1 logit vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import (
    EmbeddingTable,
    LSTMCellParams,
    embedding_backward,
    init_params,
    lstm_step_backward,
    lstm_step_with_cache,
)
from .ops import Array, as_f64, ensure_finite, log_likelihood_from_logits


def aggregate_visual(weights, features) -> Array:
    """Attention-weighted sum of feature rows: (N,) x (N, d) -> (d,)."""
    weights, features = as_f64(weights), as_f64(features)
    if weights.ndim != 1 or features.ndim != 2 or weights.shape[0] != features.shape[0]:
        raise DimensionError(f"aggregate shapes: weights {weights.shape}, features {features.shape}")
    return ensure_finite(weights @ features, "aggregated visual")


def aggregate_visual_backward(g, weights, features):
    """VJP of aggregate_visual -> (dweights, dfeatures)."""
    g, weights, features = as_f64(g), as_f64(weights), as_f64(features)
    return features @ g, np.outer(weights, g)


@dataclass
class RecEncoderParams:
    """Re-encodes the aggregated visual vector for the decoder: relu(w_a @ v + b_a).

    w_a: (e, d) where e equals the decoder input width."""

    w_a: Array
    b_a: Array

    def __post_init__(self):
        self.w_a, self.b_a = as_f64(self.w_a), as_f64(self.b_a)
        if self.w_a.ndim != 2 or self.b_a.shape != (self.w_a.shape[0],):
            raise DimensionError(f"rec encoder shapes: w_a {self.w_a.shape}, b_a {self.b_a.shape}")

    @classmethod
    def create(cls, feature_dim: int, out_dim: int, seed) -> "RecEncoderParams":
        return cls(init_params((out_dim, feature_dim), "xavier", seed), np.zeros(out_dim))


def encode_visual_with_cache(params: RecEncoderParams, v_att):
    v_att = as_f64(v_att)
    if v_att.shape != (params.w_a.shape[1],):
        raise DimensionError(f"visual vector {v_att.shape} vs w_a {params.w_a.shape}")
    z = params.w_a @ v_att + params.b_a
    return np.maximum(z, 0.0), (v_att, z)


def encode_visual(params: RecEncoderParams, v_att) -> Array:
    """relu(w_a @ v_att + b_a) -> decoder-ready visual vector."""
    out, _ = encode_visual_with_cache(params, v_att)
    return out


def encode_visual_backward(params: RecEncoderParams, cache, dout, grads: dict) -> Array:
    """Accumulates w_a/b_a grads into `grads`; returns dv_att."""
    v_att, z = cache
    dz = as_f64(dout) * (z > 0.0)
    grads["w_a"] += np.outer(dz, v_att)
    grads["b_a"] += dz
    return params.w_a.T @ dz


@dataclass
class DecoderParams:
    """LSTM decoder with an output projection to vocab logits.

    `embed` is the decoder's own token table; the model may alias it to the
    encoder table when embedding sharing is configured."""

    lstm: LSTMCellParams
    proj_w: Array
    proj_b: Array
    embed: EmbeddingTable

    def __post_init__(self):
        self.proj_w, self.proj_b = as_f64(self.proj_w), as_f64(self.proj_b)
        if (self.proj_w.ndim != 2 or self.proj_w.shape[1] != self.lstm.hidden_dim
                or self.proj_b.shape != (self.proj_w.shape[0],)):
            raise DimensionError(f"decoder projection shapes: {self.proj_w.shape}, {self.proj_b.shape}")
        if self.embed.dim != self.lstm.input_dim:
            raise DimensionError(
                f"decoder embedding width {self.embed.dim} != LSTM input width {self.lstm.input_dim}"
            )

    @property
    def vocab_size(self) -> int:
        return self.proj_w.shape[0]

    @classmethod
    def create(cls, vocab_size: int, input_dim: int, hidden_dim: int, seed, *,
               embed: EmbeddingTable = None, uniform_limit: float = 0.1,
               forget_bias: float = 1.0) -> "DecoderParams":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        lstm = LSTMCellParams.create(input_dim, hidden_dim, rng,
                                     uniform_limit=uniform_limit, forget_bias=forget_bias)
        proj_w = init_params((vocab_size, hidden_dim), "xavier", rng)
        if embed is None:
            embed = EmbeddingTable.create(vocab_size, input_dim, rng)
        return cls(lstm, proj_w, np.zeros(vocab_size), embed)


def decode_phrase_logits_with_cache(params: DecoderParams, visual_input, target_tokens):
    """Teacher-forced decode -> (list of T+1 logit vectors, cache)."""
    visual_input = as_f64(visual_input)
    tokens = [int(t) for t in target_tokens]
    if not tokens:
        raise DimensionError("cannot decode an empty phrase")
    inputs = [visual_input] + [params.embed.lookup([t])[0] for t in tokens]
    h = np.zeros(params.lstm.hidden_dim)
    c = np.zeros(params.lstm.hidden_dim)
    logits_steps, caches = [], []
    for x in inputs:
        h, c, cache = lstm_step_with_cache(params.lstm, x, h, c)
        logits_steps.append(params.proj_w @ h + params.proj_b)
        caches.append((cache, h))
    return logits_steps, (tokens, caches)


def decode_phrase_logits(params: DecoderParams, visual_input, target_tokens):
    """Logit vectors for predicting tokens 1..T then end-of-sequence."""
    logits_steps, _ = decode_phrase_logits_with_cache(params, visual_input, target_tokens)
    return logits_steps


def decode_backward(params: DecoderParams, cache, dlogits_steps, grads: dict,
                    embed_grad_key: str = "embed") -> Array:
    """VJP of the decode.  Accumulates lstm (w_x/w_h/b), proj_w/proj_b and
    embedding grads into `grads`; returns d(visual_input)."""
    tokens, caches = cache
    dh_next = np.zeros(params.lstm.hidden_dim)
    dc_next = np.zeros(params.lstm.hidden_dim)
    lstm_grads = {"w_x": grads["w_x"], "w_h": grads["w_h"], "b": grads["b"]}
    dvisual = None
    for t in range(len(caches) - 1, -1, -1):
        step_cache, h_t = caches[t]
        dlog = as_f64(dlogits_steps[t])
        grads["proj_w"] += np.outer(dlog, h_t)
        grads["proj_b"] += dlog
        dh = params.proj_w.T @ dlog + dh_next
        dx, dh_next, dc_next = lstm_step_backward(params.lstm, step_cache, dh, dc_next, lstm_grads)
        if t == 0:
            dvisual = dx
        else:
            embedding_backward(dx[None, :], [tokens[t - 1]], grads[embed_grad_key])
    return dvisual


def reconstruction_loss(step_logits, targets_with_eos, batch_size: int) -> float:
    """Mean over the batch of per-phrase summed token negative log likelihoods.

    step_logits: per phrase, the list of T+1 logit vectors; targets_with_eos:
    per phrase, tokens 1..T followed by the end-of-sequence id."""
    if len(step_logits) != batch_size or len(targets_with_eos) != batch_size or batch_size == 0:
        raise DimensionError(
            f"batch size {batch_size} vs {len(step_logits)} logit lists, {len(targets_with_eos)} target lists"
        )
    total = 0.0
    for logits_list, targets in zip(step_logits, targets_with_eos):
        if len(logits_list) != len(targets):
            raise DimensionError(
                f"{len(logits_list)} decode steps vs {len(targets)} targets (phrase + eos)"
            )
        for logits, target in zip(logits_list, targets):
            total += log_likelihood_from_logits(logits, target)
    return total / batch_size


def combined_loss(l_att: float, l_rec: float, att_weight: float) -> float:
    """Weighted training objective att_weight * l_att + l_rec."""
    if att_weight < 0:
        raise ConfigError(f"attention loss weight must be >= 0, got {att_weight}")
    return att_weight * l_att + l_rec
