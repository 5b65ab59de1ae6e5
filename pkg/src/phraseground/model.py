"""Model assembly: the parameter container, batch forward/backward for each
training regime, grounding-only inference, and the end-to-end gradient
checker.

The training graph per phrase: encode tokens with the encoder LSTM, score
every proposal with the attention perceptron, softmax into weights, then
(except in the fully supervised regime) aggregate the proposal features by
those weights, re-encode, and decode the phrase back out.  When batch
normalization is active it is applied to the phrase encodings and to the
proposal features before the attention perceptron, which couples the phrases
of a batch; the backward pass undoes that coupling explicitly.  At inference
only the grounding half runs.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import (
    AttentionOutput,
    AttentionParams,
    Phrase,
    ProposalSet,
    normalize_and_select,
    score_backward,
    score_forward,
)
from .errors import ConfigError, DimensionError
from .fdiff import finite_difference_gradient, relative_errors
from .layers import (
    BatchNormParams,
    EmbeddingTable,
    LSTMCellParams,
    batchnorm_backward,
    batchnorm_infer,
    batchnorm_train_with_cache,
    embedding_backward,
    encode_sequence_backward,
    encode_sequence_with_cache,
)
from .ops import log_likelihood_backward, log_likelihood_from_logits, softmax_backward
from .reconstruct import (
    DecoderParams,
    RecEncoderParams,
    aggregate_visual,
    aggregate_visual_backward,
    decode_backward,
    decode_phrase_logits_with_cache,
    encode_visual_backward,
    encode_visual_with_cache,
)

MODES = ("unsup", "semi", "full", "eval")


@dataclass
class ModelConfig:
    vocab_size: int
    feature_dim: int
    embed_dim: int = 64
    hidden_dim: int = 128
    attn_hidden_dim: int = 128
    rec_dim: int = 64            # decoder input width; also the decoder embedding width
    dec_hidden_dim: int = 128
    batchnorm: bool = False
    share_embeddings: bool = False
    eos_id: int = 2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    init_uniform_limit: float = 0.1
    forget_bias: float = 1.0

    def validate(self) -> "ModelConfig":
        dims = (self.vocab_size, self.feature_dim, self.embed_dim, self.hidden_dim,
                self.attn_hidden_dim, self.rec_dim, self.dec_hidden_dim)
        if any(int(d) <= 0 for d in dims):
            raise ConfigError(f"model dimensions must be positive, got {dims}")
        if not 0 <= self.eos_id < self.vocab_size:
            raise ConfigError(f"eos id {self.eos_id} outside vocab of {self.vocab_size}")
        if self.share_embeddings and self.rec_dim != self.embed_dim:
            raise ConfigError("shared embeddings require rec_dim == embed_dim")
        return self


class ModelParams:
    """Every learnable tensor of the model, addressable by dotted group names.

    named() returns live references in a fixed order; the optimizer mutates
    them in place, so iteration order (and therefore every reduction over
    parameters) is deterministic."""

    def __init__(self, config: ModelConfig, embed_enc, enc_lstm, attn, rec, dec,
                 bn_h=None, bn_v=None):
        self.config = config
        self.embed_enc: EmbeddingTable = embed_enc
        self.enc_lstm: LSTMCellParams = enc_lstm
        self.attn: AttentionParams = attn
        self.rec: RecEncoderParams = rec
        self.dec: DecoderParams = dec
        self.bn_h: Optional[BatchNormParams] = bn_h
        self.bn_v: Optional[BatchNormParams] = bn_v

    @property
    def shared_embeddings(self) -> bool:
        return self.dec.embed is self.embed_enc

    @classmethod
    def initialize(cls, config: ModelConfig, seed) -> "ModelParams":
        config.validate()
        rng = np.random.default_rng(seed)
        embed_enc = EmbeddingTable.create(config.vocab_size, config.embed_dim, rng)
        enc_lstm = LSTMCellParams.create(config.embed_dim, config.hidden_dim, rng,
                                         uniform_limit=config.init_uniform_limit,
                                         forget_bias=config.forget_bias)
        attn = AttentionParams.create(config.hidden_dim, config.feature_dim,
                                      config.attn_hidden_dim, rng)
        rec = RecEncoderParams.create(config.feature_dim, config.rec_dim, rng)
        dec = DecoderParams.create(config.vocab_size, config.rec_dim, config.dec_hidden_dim, rng,
                                   embed=embed_enc if config.share_embeddings else None,
                                   uniform_limit=config.init_uniform_limit,
                                   forget_bias=config.forget_bias)
        bn_h = bn_v = None
        if config.batchnorm:
            bn_h = BatchNormParams.create(config.hidden_dim, config.bn_momentum, config.bn_eps)
            bn_v = BatchNormParams.create(config.feature_dim, config.bn_momentum, config.bn_eps)
        return cls(config, embed_enc, enc_lstm, attn, rec, dec, bn_h, bn_v)

    def named(self) -> dict:
        out = {"embed.encoder": self.embed_enc.weights,
               "enc_lstm.w_x": self.enc_lstm.w_x,
               "enc_lstm.w_h": self.enc_lstm.w_h,
               "enc_lstm.b": self.enc_lstm.b}
        if self.bn_h is not None:
            out["bn_h.scale"] = self.bn_h.scale
            out["bn_h.shift"] = self.bn_h.shift
            out["bn_v.scale"] = self.bn_v.scale
            out["bn_v.shift"] = self.bn_v.shift
        out.update({"attn.w_h": self.attn.w_h, "attn.w_v": self.attn.w_v,
                    "attn.b1": self.attn.b1, "attn.w2": self.attn.w2, "attn.b2": self.attn.b2,
                    "rec.w_a": self.rec.w_a, "rec.b_a": self.rec.b_a})
        if not self.shared_embeddings:
            out["embed.decoder"] = self.dec.embed.weights
        out.update({"dec_lstm.w_x": self.dec.lstm.w_x, "dec_lstm.w_h": self.dec.lstm.w_h,
                    "dec_lstm.b": self.dec.lstm.b,
                    "dec_proj.w": self.dec.proj_w, "dec_proj.b": self.dec.proj_b})
        return out

    def zero_grads(self) -> dict:
        return {name: np.zeros_like(arr) for name, arr in self.named().items()}

    def clone(self) -> "ModelParams":
        return copy.deepcopy(self)


@dataclass
class BatchResult:
    outputs: list
    loss: Optional[float] = None
    l_att: Optional[float] = None
    l_rec: Optional[float] = None
    feature_grads: Optional[list] = None


def _grad_adapter(grads: dict, prefix: str, keys) -> dict:
    return {k: grads[f"{prefix}.{k}"] for k in keys}


def run_batch(model: ModelParams, items, mode: str, att_weight: float = 0.0,
              grads: Optional[dict] = None, *, bn_train: bool = False,
              update_running: bool = False,
              att_norm_supervised_only: bool = False) -> BatchResult:
    """Forward (and, when `grads` is given, backward) over a batch of
    (Phrase, ProposalSet) pairs.

    mode selects the objective: "unsup" reconstruction only, "semi" weighted
    attention loss plus reconstruction, "full" attention loss only
    (reconstruction branch skipped entirely), "eval" grounding only with no
    losses.  Gradients of the scalar batch loss are accumulated into `grads`
    (keys as in ModelParams.named())."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if not items:
        raise DimensionError("empty batch")
    if mode == "semi" and att_weight < 0:
        raise ConfigError(f"attention loss weight must be >= 0, got {att_weight}")
    b_total = len(items)
    use_att = mode in ("semi", "full")
    use_rec = mode in ("unsup", "semi")
    use_bn = model.bn_h is not None

    # --- encode phrases ------------------------------------------------
    enc_caches = []
    H = np.empty((b_total, model.enc_lstm.hidden_dim))
    for i, (phrase, _) in enumerate(items):
        h, caches = encode_sequence_with_cache(model.enc_lstm, model.embed_enc.lookup(phrase.tokens))
        H[i] = h
        enc_caches.append(caches)

    bn_h_cache = bn_v_cache = None
    if use_bn:
        if bn_train:
            Hn, bn_h_cache = batchnorm_train_with_cache(model.bn_h, H, update_running)
        else:
            Hn = batchnorm_infer(model.bn_h, H)
    else:
        Hn = H

    # --- normalize proposal features ------------------------------------
    raw_feats = [props.features for _, props in items]
    if use_bn:
        stacked = np.concatenate(raw_feats, axis=0)
        if bn_train:
            vn_all, bn_v_cache = batchnorm_train_with_cache(model.bn_v, stacked, update_running)
        else:
            vn_all = batchnorm_infer(model.bn_v, stacked)
        feats, pos = [], 0
        for f in raw_feats:
            feats.append(vn_all[pos:pos + f.shape[0]])
            pos += f.shape[0]
    else:
        feats = raw_feats

    # --- attention and losses -------------------------------------------
    outputs, att_caches = [], []
    for i in range(b_total):
        scores, cache = score_forward(model.attn, Hn[i], feats[i])
        outputs.append(normalize_and_select(scores))
        att_caches.append(cache)

    if mode == "eval":
        return BatchResult(outputs)

    sup = [i for i, (ph, _) in enumerate(items) if ph.gt_attention is not None]
    att_norm = len(sup) if (att_norm_supervised_only and sup) else b_total
    l_att = 0.0
    if use_att:
        for i in sup:
            l_att += log_likelihood_from_logits(outputs[i].raw_scores, items[i][0].gt_attention)
        l_att /= att_norm

    rec_caches = []
    l_rec = 0.0
    if use_rec:
        for i, (phrase, _) in enumerate(items):
            v_att = aggregate_visual(outputs[i].weights, feats[i])
            v_enc, rc = encode_visual_with_cache(model.rec, v_att)
            logits_steps, dc = decode_phrase_logits_with_cache(model.dec, v_enc, phrase.tokens)
            targets = list(phrase.tokens) + [model.config.eos_id]
            l_rec += sum(log_likelihood_from_logits(lg, t) for lg, t in zip(logits_steps, targets))
            rec_caches.append((v_att, rc, dc, logits_steps, targets))
        l_rec /= b_total

    loss = {"unsup": l_rec, "full": l_att,
            "semi": att_weight * l_att + l_rec}[mode]
    result = BatchResult(outputs, loss, l_att, l_rec)
    if grads is None:
        return result

    # --- backward ---------------------------------------------------------
    attn_grads = _grad_adapter(grads, "attn", ("w_h", "w_v", "b1", "w2", "b2"))
    enc_grads = _grad_adapter(grads, "enc_lstm", ("w_x", "w_h", "b"))
    dec_grads = {"w_x": grads["dec_lstm.w_x"], "w_h": grads["dec_lstm.w_h"],
                 "b": grads["dec_lstm.b"], "proj_w": grads["dec_proj.w"],
                 "proj_b": grads["dec_proj.b"],
                 "embed": grads["embed.encoder" if model.shared_embeddings else "embed.decoder"]}
    rec_grads = _grad_adapter(grads, "rec", ("w_a", "b_a"))

    dHn = np.zeros_like(Hn)
    dfeats = [np.zeros_like(f) for f in feats]
    for i, (phrase, _) in enumerate(items):
        out = outputs[i]
        dscores = np.zeros_like(out.raw_scores)
        if use_att and phrase.gt_attention is not None:
            scale = (att_weight if mode == "semi" else 1.0) / att_norm
            if scale:
                dscores += log_likelihood_backward(out.raw_scores, phrase.gt_attention, scale)
        if use_rec:
            v_att, rc, dc, logits_steps, targets = rec_caches[i]
            dlogits = [log_likelihood_backward(lg, t, 1.0 / b_total)
                       for lg, t in zip(logits_steps, targets)]
            dv_enc = decode_backward(model.dec, dc, dlogits, dec_grads)
            dv_att = encode_visual_backward(model.rec, rc, dv_enc, rec_grads)
            dweights, dagg = aggregate_visual_backward(dv_att, out.weights, feats[i])
            dfeats[i] += dagg
            dscores += softmax_backward(dweights, out.weights)
        dh, dfeat = score_backward(model.attn, att_caches[i], dscores, attn_grads)
        dfeats[i] += dfeat
        dHn[i] = dh

    if use_bn:
        if bn_train:
            dH, dscale, dshift = batchnorm_backward(model.bn_h, bn_h_cache, dHn)
            grads["bn_h.scale"] += dscale
            grads["bn_h.shift"] += dshift
            dvn_all, dscale, dshift = batchnorm_backward(
                model.bn_v, bn_v_cache, np.concatenate(dfeats, axis=0))
        else:
            dH, dscale, dshift = _batchnorm_infer_backward(model.bn_h, H, dHn)
            grads["bn_h.scale"] += dscale
            grads["bn_h.shift"] += dshift
            dvn_all, dscale, dshift = _batchnorm_infer_backward(
                model.bn_v, stacked, np.concatenate(dfeats, axis=0))
        grads["bn_v.scale"] += dscale
        grads["bn_v.shift"] += dshift
        dfeats_in, pos = [], 0
        for f in raw_feats:
            dfeats_in.append(dvn_all[pos:pos + f.shape[0]])
            pos += f.shape[0]
    else:
        dH, dfeats_in = dHn, dfeats

    for i, (phrase, _) in enumerate(items):
        d_emb = encode_sequence_backward(model.enc_lstm, enc_caches[i], dH[i], enc_grads)
        embedding_backward(d_emb, phrase.tokens, grads["embed.encoder"])

    result.feature_grads = dfeats_in
    return result


def _batchnorm_infer_backward(params, x, dout):
    """VJP through the fixed affine infer map (running stats held constant)."""
    inv_std = 1.0 / np.sqrt(params.running_var + params.eps)
    xhat = (x - params.running_mean) * inv_std
    return dout * params.scale * inv_std, (dout * xhat).sum(axis=0), dout.sum(axis=0)


def full_forward(model: ModelParams, phrase: Phrase, proposals: ProposalSet,
                 mode: str, att_weight: float = 0.0):
    """Single-sample end-to-end pass -> (AttentionOutput, losses dict or None).

    losses carries "att", "rec" and "combined"; a branch a regime does not
    compute is None.  mode "eval" returns (output, None).  Batchnorm, when
    present, runs in infer mode here; batch-statistics training passes go
    through run_batch."""
    res = run_batch(model, [(phrase, proposals)], mode, att_weight)
    if mode == "eval":
        return res.outputs[0], None
    losses = {"att": res.l_att if mode in ("semi", "full") else None,
              "rec": res.l_rec if mode in ("unsup", "semi") else None,
              "combined": res.loss}
    return res.outputs[0], losses


def ground_phrase(model: ModelParams, tokens, proposals: ProposalSet) -> AttentionOutput:
    """Grounding-only inference for one phrase: scores, weights, selection."""
    h, _ = encode_sequence_with_cache(model.enc_lstm, model.embed_enc.lookup(tokens))
    feats = proposals.features
    if model.bn_h is not None:
        h = batchnorm_infer(model.bn_h, h[None, :])[0]
        feats = batchnorm_infer(model.bn_v, feats)
    scores, _ = score_forward(model.attn, h, feats)
    return normalize_and_select(scores)


# ---------------------------------------------------------------------------
# end-to-end gradient check

@dataclass
class GradCheckGroup:
    group: str
    max_rel_err: float
    passed: bool


def _gradcheck_batch(config: ModelConfig, mode: str, batch: int, proposals: int, rng):
    """Random but fixed batch for the checker; semi mode mixes phrases with
    and without attention targets to exercise the zero-contribution path."""
    from .attention import Box  # local to avoid polluting module namespace

    items = []
    for i in range(batch):
        n_tok = int(rng.integers(1, 4))
        tokens = tuple(int(t) for t in rng.integers(3, config.vocab_size, n_tok))
        feats = rng.normal(0.0, 1.0, (proposals, config.feature_dim))
        boxes = [Box(10.0 * j, 0.0, 10.0 * j + 8.0, 8.0) for j in range(proposals)]
        gt = None
        if mode == "full" or (mode == "semi" and i % 2 == 0):
            gt = int(rng.integers(0, proposals))
        phrase = Phrase(tokens, sentence_id=f"s{i}", gt_attention=gt)
        items.append((phrase, ProposalSet(boxes, feats)))
    return items


def gradcheck_model(mode: str, *, vocab_size: int = 10, proposals: int = 4,
                    feature_dim: int = 6, embed_dim: int = 8, hidden_dim: int = 8,
                    attn_hidden_dim: int = 8, rec_dim: int = 8, dec_hidden_dim: int = 8,
                    batch: int = 3, att_weight: float = 2.5, seed: int = 0,
                    step: float = 1e-5, tol: float = 1e-4,
                    rel_floor: float = 1e-3):
    """Compare analytic batch-loss gradients against central finite
    differences for every parameter group of the given training graph.

    Batchnorm participates whenever the regime carries supervision (semi or
    full), matching the training default.  Returns a list of GradCheckGroup,
    one per dotted-name prefix."""
    if mode not in ("unsup", "semi", "full"):
        raise ConfigError(f"gradcheck mode must be a training mode, got {mode!r}")
    config = ModelConfig(vocab_size=vocab_size, feature_dim=feature_dim,
                         embed_dim=embed_dim, hidden_dim=hidden_dim,
                         attn_hidden_dim=attn_hidden_dim, rec_dim=rec_dim,
                         dec_hidden_dim=dec_hidden_dim,
                         batchnorm=(mode != "unsup")).validate()
    rng = np.random.default_rng(seed)
    model = ModelParams.initialize(config, rng.integers(2 ** 31))
    # Nudge every array off its init point: zero-initialised arrays (score
    # head, biases) would otherwise sit where their own gradients vanish and
    # the check of their upstream paths would be vacuous.
    for arr in model.named().values():
        arr += rng.normal(scale=0.05, size=arr.shape)
    items = _gradcheck_batch(config, mode, batch, proposals, rng)
    kwargs = dict(bn_train=config.batchnorm, update_running=False)

    grads = model.zero_grads()
    run_batch(model, items, mode, att_weight, grads, **kwargs)

    def loss():
        return run_batch(model, items, mode, att_weight, **kwargs).loss

    worst: dict = {}
    for name, arr in model.named().items():
        numeric = finite_difference_gradient(loss, arr, step)
        err = float(relative_errors(grads[name], numeric, rel_floor).max())
        group = name.split(".")[0]
        worst[group] = max(worst.get(group, 0.0), err)
    return [GradCheckGroup(g, e, e < tol) for g, e in worst.items()]
