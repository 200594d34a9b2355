"""Set-matching training objective: class-agnostic Hungarian matching of boxes,
person-score BCE, L1 and GIoU box losses, and the matched-query action loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .box_ops import cxcywh_to_xyxy, generalized_box_iou, paired_generalized_box_iou
from .errors import InputError

PROB_CLAMP = 1e-6


@dataclass
class MatchResult:
    assignment: list  # [(query_index, target_index)]
    unmatched_queries: list

    @property
    def query_indices(self):
        return [q for q, _ in self.assignment]

    @property
    def target_indices(self):
        return [t for _, t in self.assignment]


@dataclass
class Target:
    boxes: torch.Tensor   # G x 4 normalized cxcywh
    labels: torch.Tensor  # G class indices into the training vocabulary

    def __len__(self):
        return self.boxes.shape[0]


@dataclass
class LossBreakdown:
    per_stage: list = field(default_factory=list)  # [(bce, l1, giou, act)] as tensors
    total: torch.Tensor | None = None

    def as_floats(self):
        return {
            "total": float(self.total.detach()),
            "stages": [dict(zip(("bce", "l1", "giou", "act"), (float(t.detach()) for t in s))) for s in self.per_stage],
        }


@dataclass
class CostWeights:
    score: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


def giou_distance(a, b):
    """1 - GIoU for two corner-form boxes (x1, y1, x2, y2); lies in [0, 2]."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    for name, box in (("a", a), ("b", b)):
        if not (box[2] > box[0] and box[3] > box[1]):
            raise InputError(f"box {name} has zero area: {box.tolist()}")
    return float(1 - paired_generalized_box_iou(a, b))


def match_hungarian(cost):
    """Minimum-cost one-to-one assignment of every target (column) to a query (row)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InputError("cost must be a 2-D matrix")
    n, g = cost.shape
    if g > n:
        raise InputError(f"{g} targets but only {n} queries")
    if not np.all(np.isfinite(cost)):
        raise InputError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    assignment = sorted(zip(rows.tolist(), cols.tolist()))
    matched = {r for r, _ in assignment}
    return MatchResult(assignment, [i for i in range(n) if i not in matched])


def matching_cost(boxes, person_scores, target_boxes, weights=None):
    """N x G class-agnostic matching cost between predicted and target cxcywh boxes."""
    w = weights or CostWeights()
    if target_boxes.shape[0] == 0:
        return boxes.new_zeros((boxes.shape[0], 0))
    l1 = torch.cdist(boxes, target_boxes, p=1)
    giou = generalized_box_iou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(target_boxes))
    return w.score * (1 - person_scores)[:, None] + w.l1 * l1 + w.giou * (1 - giou)


def _bce(scores, targets):
    p = scores.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(targets * torch.log(p) + (1 - targets) * torch.log(1 - p)).mean()


def set_loss(boxes, person_scores, target: Target, match: MatchResult):
    """(bce, l1, giou) for one clip at one stage.

    BCE averages over all N queries (matched -> 1, others -> 0); L1 (summed over the four
    coordinates) and GIoU distance average over matched pairs.
    """
    labels = torch.zeros_like(person_scores)
    if match.assignment:
        qi = torch.as_tensor(match.query_indices)
        ti = torch.as_tensor(match.target_indices)
        labels[qi] = 1.0
        pred = boxes[qi]
        gt = target.boxes[ti].to(boxes.dtype)
        l1 = (pred - gt).abs().sum(-1).mean()
        giou = (1 - paired_generalized_box_iou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt))).mean()
    else:
        l1 = giou = boxes.sum() * 0
    return _bce(person_scores, labels), l1, giou


def action_loss(action_logits, match: MatchResult, target_classes):
    """Cross-entropy over matched queries only (mean); zero when nothing is matched."""
    num_classes = action_logits.shape[-1]
    target_classes = torch.as_tensor(target_classes, dtype=torch.long)
    if target_classes.numel() and (target_classes.min() < 0 or target_classes.max() >= num_classes):
        raise InputError(f"target class outside vocabulary of {num_classes}")
    if not match.assignment:
        return action_logits.sum() * 0
    qi = torch.as_tensor(match.query_indices)
    ti = torch.as_tensor(match.target_indices)
    return F.cross_entropy(action_logits[qi], target_classes[ti])


def match_stage(boxes, person_scores, target: Target, weights=None):
    with torch.no_grad():
        cost = matching_cost(boxes, person_scores, target.boxes.to(boxes.dtype), weights)
    return match_hungarian(cost.cpu().numpy())


def total_loss(stages, targets, w1=2.0, w2=48.0, cost_weights=None):
    """Sum over stages of ``w1 * (bce + l1 + giou) + w2 * act``, each stage matched afresh.

    ``stages`` are batched QueryStates; ``targets`` holds one Target per clip. Per-stage
    terms are averaged over the clips of the batch.
    """
    if not w1 > 0 or not w2 > 0:
        raise InputError("loss weights must be positive")
    breakdown = LossBreakdown()
    total = 0
    for state in stages:
        terms = []
        for i, target in enumerate(targets):
            match = match_stage(state.boxes[i], state.person_scores[i], target, cost_weights)
            bce, l1, giou = set_loss(state.boxes[i], state.person_scores[i], target, match)
            act = action_loss(state.action_logits[i], match, target.labels)
            terms.append(torch.stack([bce, l1, giou, act]))
        stage_terms = torch.stack(terms).mean(0)
        breakdown.per_stage.append(tuple(stage_terms.unbind()))
        bce, l1, giou, act = stage_terms
        total = total + w1 * (bce + l1 + giou) + w2 * act
    breakdown.total = total
    return breakdown
