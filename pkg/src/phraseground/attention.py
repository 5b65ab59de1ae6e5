"""Phrase-to-proposal attention: core value types, the two-layer scoring
perceptron, softmax normalization with deterministic selection, and the
supervised attention loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError, DimensionError
from .layers import init_params
from .ops import (
    Array,
    as_f64,
    ensure_finite,
    log_likelihood_backward,
    log_likelihood_from_logits,
    softmax_stable,
)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with x_min < x_max and y_min < y_max."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DataError(f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass
class Phrase:
    """One noun phrase: token ids plus optional ground truth.

    gt_box is the annotated region (already unioned if the annotation had
    several boxes); gt_attention is the index of the proposal standing in for
    it, or None when no proposal overlaps it well enough.
    """

    tokens: tuple
    sentence_id: str
    phrase_type: Optional[str] = None
    gt_box: Optional[Box] = None
    gt_attention: Optional[int] = None

    def __post_init__(self):
        self.tokens = tuple(int(t) for t in self.tokens)
        if not self.tokens:
            raise DataError("phrase has no tokens")


@dataclass
class ProposalSet:
    """N candidate boxes with their feature rows (N, d)."""

    boxes: list
    features: Array

    def __post_init__(self):
        self.features = as_f64(self.features)
        if len(self.boxes) == 0:
            raise DataError("proposal set is empty")
        if self.features.ndim != 2 or self.features.shape[0] != len(self.boxes):
            raise DataError(
                f"feature rows {self.features.shape} do not match {len(self.boxes)} boxes"
            )

    @property
    def count(self) -> int:
        return len(self.boxes)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class AttentionParams:
    """Two-layer scoring perceptron.

    Score of proposal feature v against phrase encoding h:
        w2 @ relu(w_h @ h + w_v @ v + b1) + b2
    w_h: (k, h_dim), w_v: (k, d), b1: (k,), w2: (1, k), b2: (1,).
    """

    w_h: Array
    w_v: Array
    b1: Array
    w2: Array
    b2: Array

    def __post_init__(self):
        self.w_h, self.w_v = as_f64(self.w_h), as_f64(self.w_v)
        self.b1, self.w2, self.b2 = as_f64(self.b1), as_f64(self.w2), as_f64(self.b2)
        k = self.w_h.shape[0]
        ok = (self.w_v.ndim == 2 and self.w_v.shape[0] == k and self.b1.shape == (k,)
              and self.w2.shape == (1, k) and self.b2.shape == (1,))
        if not ok:
            raise DimensionError(
                f"inconsistent attention shapes: w_h {self.w_h.shape}, w_v {self.w_v.shape}, "
                f"b1 {self.b1.shape}, w2 {self.w2.shape}, b2 {self.b2.shape}"
            )

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[0]

    @classmethod
    def create(cls, h_dim: int, feature_dim: int, k: int, seed) -> "AttentionParams":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        # Score head starts at zero so every proposal opens with identical
        # weight; scores then grow only where the losses reward them, instead
        # of an arbitrary init peak getting reinforced before the phrase
        # signal kicks in.
        return cls(
            init_params((k, h_dim), "xavier", rng),
            init_params((k, feature_dim), "xavier", rng),
            np.zeros(k),
            np.zeros((1, k)),
            np.zeros(1),
        )


@dataclass
class AttentionOutput:
    """Raw scores, their softmax weights, and the selected proposal index."""

    raw_scores: Array
    weights: Array
    selected: int


def score_forward(params: AttentionParams, h, features):
    """Raw attention scores for all N proposal features -> (scores (N,), cache).

    The w_h @ h term is computed once and shared across proposals."""
    h, features = as_f64(h), as_f64(features)
    if h.shape != (params.w_h.shape[1],):
        raise DimensionError(f"phrase encoding shape {h.shape} vs w_h {params.w_h.shape}")
    if features.ndim != 2 or features.shape[1] != params.w_v.shape[1]:
        raise DimensionError(f"feature shape {features.shape} vs w_v {params.w_v.shape}")
    hh = params.w_h @ h + params.b1                      # (k,)
    z = params.w_v @ features.T + hh[:, None]            # (k, N)
    a = np.maximum(z, 0.0)
    scores = (params.w2 @ a)[0] + params.b2[0]           # (N,)
    ensure_finite(scores, "attention scores")
    return scores, (h, features, z, a)


def score_backward(params: AttentionParams, cache, dscores, grads: dict):
    """VJP of score_forward.  Accumulates parameter grads into `grads`
    (keys w_h/w_v/b1/w2/b2) and returns (dh, dfeatures)."""
    h, features, z, a = cache
    dscores = as_f64(dscores)
    grads["w2"] += dscores[None, :] @ a.T
    grads["b2"] += dscores.sum(keepdims=True)
    dz = (params.w2.T @ dscores[None, :]) * (z > 0.0)    # (k, N)
    grads["w_v"] += dz @ features
    dhh = dz.sum(axis=1)
    grads["w_h"] += np.outer(dhh, h)
    grads["b1"] += dhh
    return params.w_h.T @ dhh, (params.w_v.T @ dz).T


def score_attention(params: AttentionParams, h, proposals) -> Array:
    """Raw (pre-softmax) scores of every proposal for one phrase encoding."""
    features = proposals.features if isinstance(proposals, ProposalSet) else proposals
    scores, _ = score_forward(params, h, features)
    return scores


def normalize_and_select(raw_scores) -> AttentionOutput:
    """Softmax the raw scores and select the argmax weight.

    Ties break to the lowest index, so selection is deterministic."""
    raw_scores = as_f64(raw_scores)
    weights = softmax_stable(raw_scores)
    return AttentionOutput(raw_scores, weights, int(np.argmax(weights)))


def attention_loss(batch_scores, batch_targets) -> float:
    """Mean negative log attention probability of the annotated proposal.

    batch_scores: raw score vectors, one per phrase; batch_targets: matching
    proposal indices or None.  A phrase without a target contributes exactly
    zero.  Evaluated in log space from the raw scores, never by taking the
    log of a materialized softmax."""
    if len(batch_scores) != len(batch_targets) or len(batch_scores) == 0:
        raise DimensionError(
            f"batch sizes differ or empty: {len(batch_scores)} scores, {len(batch_targets)} targets"
        )
    total = 0.0
    for scores, target in zip(batch_scores, batch_targets):
        if target is not None:
            total += log_likelihood_from_logits(scores, target)
    return total / len(batch_scores)


def attention_loss_backward(batch_scores, batch_targets):
    """Per-phrase raw-score gradients of attention_loss.

    (softmax - onehot)/B where a target exists, exact zeros where it is None."""
    if len(batch_scores) != len(batch_targets) or len(batch_scores) == 0:
        raise DimensionError("batch sizes differ or empty")
    b = len(batch_scores)
    out = []
    for scores, target in zip(batch_scores, batch_targets):
        if target is None:
            out.append(np.zeros_like(as_f64(scores)))
        else:
            out.append(log_likelihood_backward(scores, target, 1.0 / b))
    return out
