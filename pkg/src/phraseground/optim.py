"""Training: Adam with bias correction, decoupled L2 weight decay on weight
matrices, global-norm gradient clipping, and the epoch loop with per-epoch
validation and best-snapshot selection.

Determinism contract: for a fixed config and seed, initialization, the
supervision mask, and per-epoch shuffles are all driven by independent
seeded streams, every reduction runs in a fixed order, and two runs produce
bit-identical metric logs.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import mask_supervision
from .errors import ConfigError, DataError, DivergenceError, NumericError
from .evaluate import ground_dataset, iou, IOU_THRESHOLD
from .model import ModelParams, run_batch

TRAIN_MODES = ("unsup", "semi", "full")

# reserved spawn-key channels off the run seed
SEED_MODEL, SEED_SHUFFLE = 0, 1


def seeded_rng(seed: int, channel: int) -> np.random.Generator:
    """Independent deterministic stream `channel` derived from the run seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(channel,)))


def default_att_loss_weight(fraction: float) -> float:
    """Default attention-loss weight for a supervision fraction.

    Anchored at 0.0312 -> 200 and 0.125 -> 50, log-linear in fraction in
    between and extrapolated outside; 0 when there is no supervision."""
    if fraction <= 0.0:
        return 0.0
    slope = math.log(50.0 / 200.0) / math.log(0.125 / 0.0312)
    return 200.0 * (fraction / 0.0312) ** slope


@dataclass
class TrainConfig:
    mode: str = "semi"
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    supervision_fraction: float = 1.0
    # None fields resolve from the regime: the attention-loss weight from the
    # supervision fraction, weight decay on only for unsupervised runs, and
    # batchnorm on whenever supervision is present.
    att_loss_weight: Optional[float] = None
    weight_decay: Optional[float] = None
    batchnorm: Optional[bool] = None
    grad_clip: float = 5.0
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    att_loss_over_supervised_only: bool = False

    def validate(self) -> "TrainConfig":
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if int(self.epochs) < 0 or int(self.batch_size) < 1:
            # epochs == 0 is allowed: it checkpoints the untrained model,
            # which is the chance-level baseline.
            raise ConfigError(f"epochs must be >= 0 and batch_size >= 1, "
                              f"got {self.epochs}, {self.batch_size}")
        if not 0.0 <= self.supervision_fraction <= 1.0:
            raise ConfigError(f"supervision_fraction must be in [0, 1], got {self.supervision_fraction}")
        if self.learning_rate < 0 or self.grad_clip < 0:
            raise ConfigError("learning_rate and grad_clip must be >= 0")
        for name in ("att_loss_weight", "weight_decay"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be >= 0, got {v}")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1 or self.adam_eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")
        return self

    def resolve(self) -> "TrainConfig":
        """Fill regime-dependent None fields with their defaults."""
        self.validate()
        att = self.att_loss_weight
        if self.mode != "semi":
            att = 0.0
        elif att is None:
            att = default_att_loss_weight(self.supervision_fraction)
        wd = self.weight_decay if self.weight_decay is not None else (
            0.0005 if self.mode == "unsup" else 0.0)
        bn = self.batchnorm if self.batchnorm is not None else self.mode in ("semi", "full")
        return replace(self, att_loss_weight=att, weight_decay=wd, batchnorm=bn)


# ---------------------------------------------------------------------------
# optimizer primitives

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, named: dict, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in named.items()},
                   {k: np.zeros_like(a) for k, a in named.items()}, 0, beta1, beta2, eps)


def adam_step(named: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, theta in named.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter group {name}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def apply_weight_decay(named: dict, grads: dict, coefficient: float) -> None:
    """Decoupled L2: g <- g + coefficient * theta, weight matrices only.

    Biases and batchnorm scale/shift are 1-D and are left alone."""
    if coefficient == 0.0:
        return
    for name, theta in named.items():
        if theta.ndim >= 2:
            grads[name] += coefficient * theta


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Accumulation runs in fixed key order.  Returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    model: ModelParams
    adam: AdamState
    metrics: list
    best_epoch: int
    best_val_accuracy: float
    final_model: ModelParams = None


def _samples(dataset):
    return dataset.samples if hasattr(dataset, "samples") else list(dataset)


def _val_accuracy(model: ModelParams, val_samples) -> float:
    grounded = ground_dataset(model, val_samples)
    pairs = [(g.selected_box, g.phrase.gt_box) for g in grounded if g.phrase.gt_box is not None]
    if not pairs:
        raise DataError("validation split has no phrases with ground-truth boxes")
    return sum(1 for sel, gt in pairs if iou(sel, gt) > IOU_THRESHOLD) / len(pairs)


def train(train_dataset, val_dataset, config: TrainConfig, model: ModelParams) -> TrainResult:
    """Run the epoch loop and return the snapshot with best validation accuracy.

    The supervision mask (seeded by config.seed) is applied up front; the
    fully supervised regime then trains only on phrases that kept a target,
    and the unsupervised regime ignores targets entirely.  Metrics carry one
    record per epoch: epoch, train_loss, l_att, l_rec, val_accuracy."""
    cfg = config.resolve()
    train_samples = _samples(train_dataset)
    val_samples = _samples(val_dataset)
    if not train_samples or not val_samples:
        raise DataError("train and validation splits must be non-empty")

    if cfg.mode == "unsup":
        train_samples = mask_supervision(train_samples, 0.0, cfg.seed)
    else:
        train_samples = mask_supervision(train_samples, cfg.supervision_fraction, cfg.seed)

    items = [(ph, s.proposals) for s in train_samples for ph in s.phrases]
    if cfg.mode == "full":
        items = [(ph, props) for ph, props in items if ph.gt_attention is not None]
    if not items:
        raise DataError("no trainable phrases for this regime (no attention targets kept?)")

    if model.config.batchnorm != cfg.batchnorm:
        raise ConfigError(
            f"model was built with batchnorm={model.config.batchnorm} but the "
            f"resolved train config wants {cfg.batchnorm}")

    named = model.named()
    adam = AdamState.create(named, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    shuffle_rng = seeded_rng(cfg.seed, SEED_SHUFFLE)
    metrics = []
    best = None  # (accuracy, epoch, model clone, adam clone)

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(items))
        chunks = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        if cfg.batchnorm and len(chunks) > 1 and len(chunks[-1]) < 2:
            # batch statistics need >= 2 rows; fold a trailing singleton in
            chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
            chunks.pop()
        att_sum = rec_sum = 0.0
        seen = 0
        for batch_no, chunk in enumerate(chunks):
            batch_items = [items[i] for i in chunk]
            grads = model.zero_grads()
            res = run_batch(model, batch_items, cfg.mode, cfg.att_loss_weight, grads,
                            bn_train=cfg.batchnorm, update_running=True,
                            att_norm_supervised_only=cfg.att_loss_over_supervised_only)
            if not math.isfinite(res.loss):
                raise DivergenceError(f"loss diverged at epoch {epoch}, batch {batch_no}")
            apply_weight_decay(named, grads, cfg.weight_decay)
            clip_global_norm(grads, cfg.grad_clip)
            adam_step(named, grads, adam, cfg.learning_rate)
            att_sum += res.l_att * len(batch_items)
            rec_sum += res.l_rec * len(batch_items)
            seen += len(batch_items)
        l_att = att_sum / seen
        l_rec = rec_sum / seen
        train_loss = {"unsup": l_rec, "full": l_att,
                      "semi": cfg.att_loss_weight * l_att + l_rec}[cfg.mode]
        val_acc = _val_accuracy(model, val_samples)
        metrics.append({"epoch": epoch, "train_loss": train_loss, "l_att": l_att,
                        "l_rec": l_rec, "val_accuracy": val_acc})
        if best is None or val_acc > best[0]:
            best = (val_acc, epoch, model.clone(), copy.deepcopy(adam))

    if best is None:  # zero-epoch run: the untrained model is the snapshot
        best = (_val_accuracy(model, val_samples), 0, model.clone(), copy.deepcopy(adam))
    return TrainResult(model=best[2], adam=best[3], metrics=metrics,
                       best_epoch=best[1], best_val_accuracy=best[0], final_model=model)
