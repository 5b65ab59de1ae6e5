"""Evaluation protocol: box IoU, grounding accuracy, the proposal-set upper
bound, the sentence-level unique-box assignment, and report generation.

A phrase counts as correctly grounded only when the selected proposal box
overlaps its ground-truth box with IoU strictly greater than 0.5; exactly
0.5 is a miss.  Phrases without a ground-truth box are not evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import Box
from .errors import ConstraintError, DataError, DimensionError
from .model import ModelParams, ground_phrase
from .ops import as_f64

IOU_THRESHOLD = 0.5


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area of two boxes; 0.0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def grounding_accuracy(pairs) -> float:
    """Fraction of (selected_box, gt_box) pairs with IoU > 0.5 (strict)."""
    pairs = list(pairs)
    if not pairs:
        raise DataError("no phrases to evaluate")
    hits = sum(1 for sel, gt in pairs if iou(sel, gt) > IOU_THRESHOLD)
    return hits / len(pairs)


def proposal_upperbound(samples) -> float:
    """Fraction of ground-truth phrases for which any proposal box at all
    clears the IoU threshold; no model involved."""
    total = hits = 0
    for sample in samples:
        for phrase in sample.phrases:
            if phrase.gt_box is None:
                continue
            total += 1
            if any(iou(box, phrase.gt_box) > IOU_THRESHOLD for box in sample.proposals.boxes):
                hits += 1
    if total == 0:
        raise DataError("no phrases with ground-truth boxes")
    return hits / total


def sentence_constraint_assign(score_vectors) -> list:
    """Assign each phrase of a sentence a distinct proposal index, greedily.

    Repeatedly commits the highest remaining score over (unassigned phrase,
    unselected box) pairs; ties break to the lower phrase index, then the
    lower box index.  Raises ConstraintError when there are more phrases
    than boxes."""
    vectors = [as_f64(v) for v in score_vectors]
    p = len(vectors)
    if p == 0:
        raise DimensionError("no phrases to assign")
    n = vectors[0].shape[0]
    if any(v.shape != (n,) for v in vectors):
        raise DimensionError("phrases of one sentence must score the same proposal set")
    if p > n:
        raise ConstraintError(f"{p} phrases but only {n} proposal boxes")
    assigned = [-1] * p
    used = [False] * n
    for _ in range(p):
        best_i = best_j = -1
        best_s = None
        for i in range(p):
            if assigned[i] >= 0:
                continue
            for j in range(n):
                if used[j]:
                    continue
                s = float(vectors[i][j])
                if best_s is None or s > best_s:  # strict: first (i, j) wins ties
                    best_i, best_j, best_s = i, j, s
        assigned[best_i] = best_j
        used[best_j] = True
    return assigned


# ---------------------------------------------------------------------------
# dataset grounding and reports

@dataclass
class GroundedPhrase:
    phrase: object
    selected: int
    selected_box: Box
    weights: np.ndarray


def ground_dataset(model: ModelParams, samples, constraint: bool = False):
    """Ground every phrase of every sample -> list of GroundedPhrase.

    With `constraint` on, phrases sharing a sentence_id within a sample are
    assigned distinct boxes by sentence_constraint_assign over their softmax
    weights; otherwise each phrase takes its own argmax."""
    out = []
    for sample in samples:
        outputs = [ground_phrase(model, ph.tokens, sample.proposals) for ph in sample.phrases]
        selections = [o.selected for o in outputs]
        if constraint:
            groups: dict = {}
            for idx, ph in enumerate(sample.phrases):
                groups.setdefault(ph.sentence_id, []).append(idx)
            for idxs in groups.values():
                assigned = sentence_constraint_assign([outputs[i].weights for i in idxs])
                for i, j in zip(idxs, assigned):
                    selections[i] = j
        for ph, out_i, sel in zip(sample.phrases, outputs, selections):
            out.append(GroundedPhrase(ph, sel, sample.proposals.boxes[sel], out_i.weights))
    return out


@dataclass
class TypeStats:
    accuracy: Optional[float]
    count: int

    def to_dict(self):
        return {"accuracy": self.accuracy, "count": self.count}


@dataclass
class EvalReport:
    overall_accuracy: float
    evaluated_phrases: int
    per_type: dict
    novel: Optional[TypeStats]
    proposal_upperbound: float
    constraint: bool

    def to_dict(self):
        return {
            "constraint": self.constraint,
            "evaluated_phrases": self.evaluated_phrases,
            "novel": self.novel.to_dict() if self.novel is not None else None,
            "overall_accuracy": self.overall_accuracy,
            "per_type": {k: v.to_dict() for k, v in sorted(self.per_type.items())},
            "proposal_upperbound": self.proposal_upperbound,
        }


def collect_phrase_set(samples) -> set:
    """Exact token-id sequences occurring in the given samples."""
    return {tuple(ph.tokens) for sample in samples for ph in sample.phrases}


def report(samples, model: ModelParams, *, constraint: bool = False,
           train_phrases: Optional[set] = None) -> EvalReport:
    """Grounding accuracy report over all phrases that carry a gt box.

    Aggregates overall, per phrase_type, and (when `train_phrases` is given)
    over novel phrases, i.e. token sequences absent from the training set.
    Also reports the proposal upper bound of the dataset."""
    samples = list(samples)
    grounded = ground_dataset(model, samples, constraint)
    scored = [(g, iou(g.selected_box, g.phrase.gt_box) > IOU_THRESHOLD)
              for g in grounded if g.phrase.gt_box is not None]
    if not scored:
        raise DataError("no phrases with ground-truth boxes to evaluate")

    def stats(items):
        if not items:
            return TypeStats(None, 0)
        return TypeStats(sum(hit for _, hit in items) / len(items), len(items))

    by_type: dict = {}
    for g, hit in scored:
        by_type.setdefault(g.phrase.phrase_type or "untyped", []).append((g, hit))
    novel = None
    if train_phrases is not None:
        novel = stats([(g, hit) for g, hit in scored if tuple(g.phrase.tokens) not in train_phrases])
    overall = stats(scored)
    return EvalReport(
        overall_accuracy=overall.accuracy,
        evaluated_phrases=overall.count,
        per_type={k: stats(v) for k, v in by_type.items()},
        novel=novel,
        proposal_upperbound=proposal_upperbound(samples),
        constraint=constraint,
    )
