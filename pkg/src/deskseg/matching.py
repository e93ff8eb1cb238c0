"""Bipartite matching between query predictions and ground-truth instances,
and the set-prediction loss built on it."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit
from scipy.special import softmax as np_softmax

from . import tensor as T
from .tensor import Tensor

BCE_EPS = 1e-7


class CapacityError(ValueError):
    """More ground truths than queries."""


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (query, ground truth), ordered by ground truth
    unmatched: list[int]
    cost: float = 0.0

    @property
    def query_indices(self) -> list[int]:
        return [q for q, _ in self.pairs]

    @property
    def gt_indices(self) -> list[int]:
        return [g for _, g in self.pairs]


def assignment_cost(cost: np.ndarray, assign) -> float:
    """Total cost of giving ground truth g to query assign[g], summed in g order."""
    return sum(float(cost[q, g]) for g, q in enumerate(assign))


def _solve(cost: np.ndarray) -> list[int]:
    if cost.shape[1] == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    assign = [0] * cost.shape[1]
    for r, c in zip(rows, cols):
        assign[c] = int(r)
    return assign


def hungarian(cost) -> MatchResult:
    """Minimum-cost matching of every column (ground truth) to a distinct row (query).

    Among equal-cost optima the one whose query sequence, read in ground-truth
    order, is lexicographically smallest wins.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, g = cost.shape
    if g > n:
        raise CapacityError(f"{g} ground truths cannot be matched to {n} queries")
    if not np.isfinite(cost).all():
        raise ValueError("matching costs must be finite")
    witness = _solve(cost)
    best = assignment_cost(cost, witness)
    fixed: list[int] = []
    for col in range(g):
        chosen = None
        for q in range(n):
            if q in fixed:
                continue
            rows = [r for r in range(n) if r not in fixed and r != q]
            rest = _solve(cost[np.ix_(rows, list(range(col + 1, g)))])
            cand = fixed + [q] + [rows[i] for i in rest]
            total = assignment_cost(cost, cand)
            if total <= best:
                best, witness, chosen = total, cand, q
                break
        fixed.append(witness[col] if chosen is None else chosen)
    pairs = [(q, gi) for gi, q in enumerate(fixed)]
    used = set(fixed)
    return MatchResult(pairs, [q for q in range(n) if q not in used], best)


# ---------------------------------------------------------------------------
# matching cost


@dataclass
class LossWeights:
    class_weight: float = 2.0
    bce_weight: float = 5.0
    dice_weight: float = 5.0
    no_object_weight: float = 0.1


def matching_cost(
    class_probs: np.ndarray,
    mask_probs: np.ndarray,
    gt_classes,
    gt_masks: np.ndarray,
    weights: LossWeights = LossWeights(),
) -> np.ndarray:
    """N×G cost from class probabilities (N×(C+1)) and soft masks (N×H×W)."""
    gt_classes = np.asarray(gt_classes, dtype=int)
    n = mask_probs.shape[0]
    if gt_classes.size == 0:
        return np.zeros((n, 0))
    p = np.clip(mask_probs.reshape(n, -1), BCE_EPS, 1.0 - BCE_EPS)
    t = np.asarray(gt_masks, dtype=np.float64).reshape(gt_classes.size, -1)
    pixels = p.shape[1]
    bce = -(np.log(p) @ t.T + np.log1p(-p) @ (1.0 - t).T) / pixels
    dice = (2.0 * (mask_probs.reshape(n, -1) @ t.T) + 1.0) / (
        mask_probs.reshape(n, -1).sum(1)[:, None] + t.sum(1)[None, :] + 1.0
    )
    cls = 1.0 - class_probs[:, gt_classes]
    return weights.class_weight * cls + weights.bce_weight * bce + weights.dice_weight * (1.0 - dice)


def downsample_masks(masks: np.ndarray, factor: int = 4) -> np.ndarray:
    _, h, w = masks.shape
    return T.interpolate_array(np.asarray(masks, dtype=np.float64), h // factor, w // factor, "bilinear")


def match_outputs(
    class_logits: np.ndarray,
    mask_logits: np.ndarray,
    gt_classes,
    gt_masks: np.ndarray,
    weights: LossWeights = LossWeights(),
    factor: int = 4,
) -> MatchResult:
    """Match on final-layer outputs, comparing masks at 1/``factor`` resolution."""
    probs = np_softmax(class_logits, axis=-1)
    pred = downsample_masks(expit(mask_logits), factor)
    gts = downsample_masks(np.asarray(gt_masks, dtype=np.float64), factor) if len(gt_classes) else gt_masks
    return hungarian(matching_cost(probs, pred, gt_classes, gts, weights))


# ---------------------------------------------------------------------------
# set loss


@dataclass
class LossReport:
    total: Tensor
    class_term: float
    mask_bce_term: float
    dice_term: float
    aux_terms: list[dict] = field(default_factory=list)  # per auxiliary layer

    def terms(self) -> dict[str, float]:
        return {
            "total": float(self.total.data),
            "class": self.class_term,
            "bce": self.mask_bce_term,
            "dice": self.dice_term,
        }


def _layer_loss(class_logits: Tensor, mask_logits: Tensor, gt_classes, gt_masks, match, weights):
    n, num_cls = class_logits.shape
    no_object = num_cls - 1
    target = np.full(n, no_object)
    sample_w = np.full(n, weights.no_object_weight)
    q_idx, g_idx = match.query_indices, match.gt_indices
    target[q_idx] = np.asarray(gt_classes, dtype=int)[g_idx]
    sample_w[q_idx] = 1.0
    onehot = np.zeros((n, num_cls))
    onehot[np.arange(n), target] = sample_w / sample_w.sum()
    cls = T.mul(T.tsum(T.mul(T.log_softmax(class_logits, axis=-1), onehot)), -1.0)
    if not q_idx:
        zero = Tensor(0.0)
        return cls, zero, zero
    x = T.getitem(mask_logits, np.asarray(q_idx))
    g = len(q_idx)
    t = np.asarray(gt_masks, dtype=np.float64)[g_idx].reshape(x.shape)
    pixels = x.size // g
    # BCE with logits: softplus(x) - x·t
    bce = T.mul(T.tsum(T.sub(T.softplus(x), T.mul(x, t))), 1.0 / (pixels * g))
    p = T.reshape(T.sigmoid(x), (g, pixels))
    tf = t.reshape(g, pixels)
    inter = T.tsum(T.mul(p, tf), axis=1)
    denom = T.add(T.tsum(p, axis=1), tf.sum(axis=1) + 1.0)
    dice = T.sub(1.0, T.mean(T.div(T.add(T.mul(inter, 2.0), 1.0), denom)))
    return cls, bce, dice


def set_loss(
    class_logits: list[Tensor],
    mask_logits: list[Tensor],
    gt_classes,
    gt_masks: np.ndarray,
    match: MatchResult,
    weights: LossWeights = LossWeights(),
) -> LossReport:
    """Weighted class/BCE/dice loss summed over layers; the last layer is final.

    The same matching (computed on the final layer) supervises every layer.
    """
    total = None
    aux = []
    for i, (cl, ml) in enumerate(zip(class_logits, mask_logits)):
        cls, bce, dice = _layer_loss(cl, ml, gt_classes, gt_masks, match, weights)
        layer_total = T.add(
            T.add(T.mul(cls, weights.class_weight), T.mul(bce, weights.bce_weight)),
            T.mul(dice, weights.dice_weight),
        )
        total = layer_total if total is None else T.add(total, layer_total)
        terms = {"class": float(cls.data), "bce": float(bce.data), "dice": float(dice.data)}
        if i < len(class_logits) - 1:
            aux.append(terms)
    return LossReport(total, terms["class"], terms["bce"], terms["dice"], aux)
