"""Training objectives for relationship prediction.

All losses return (scalar tensor, skipped flag); a skipped loss is an
exact zero with no graph, used when a scene offers no supervision for
that term (for example, no positive pairs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, exp, mul, relu, sigmoid, softplus, sub, \
    tmax, tsum


@dataclass
class GroundTruthRelations:
    targets: np.ndarray       # P x n x n, 1 where (subject, predicate, object) is annotated
    pair_targets: np.ndarray  # n x n, 1 where the ordered pair has any predicate
    num_positive: int         # annotated triplet count
    n: int
    P: int

    @classmethod
    def from_triplets(cls, triplets: list, n: int, P: int) -> "GroundTruthRelations":
        targets = np.zeros((P, n, n), dtype=np.float64)
        for s, p, o in triplets:
            targets[p, s, o] = 1.0
        pair = (targets.sum(axis=0) > 0).astype(np.float64)
        return cls(targets=targets, pair_targets=pair, num_positive=int(targets.sum()),
                   n=n, P=P)


def offdiagonal(n: int) -> np.ndarray:
    return 1.0 - np.eye(n, dtype=np.float64)


def predicate_gammas(priors: np.ndarray, gamma_base: float) -> np.ndarray:
    """Per-predicate focusing strength, largest for the most frequent
    predicate: gamma_base * (pi - min pi) / (max pi - min pi). A uniform
    prior gives all zeros."""
    priors = np.asarray(priors, dtype=np.float64)
    if priors.ndim != 1 or priors.size == 0:
        raise ValueError(f"priors must be a non-empty vector, got shape {priors.shape}")
    if (priors <= 0).any():
        raise ValueError("priors must be strictly positive")
    if abs(priors.sum() - 1.0) > 1e-6:
        raise ValueError("priors must sum to 1")
    lo, hi = priors.min(), priors.max()
    if hi == lo:
        return np.zeros_like(priors)
    return gamma_base * (priors - lo) / (hi - lo)


def _focal_terms(logits: Tensor, gammas: np.ndarray) -> tuple:
    """Stable per-entry focal cross-entropy pieces.

    positive: (1 - sigmoid(x))^g * -log sigmoid(x)  = exp(-g*sp(x)) * sp(-x)
    negative: sigmoid(x)^g * -log(1 - sigmoid(x))   = exp(-g*sp(-x)) * sp(x)
    with sp = softplus, so no term ever sees a saturated log.
    """
    g = Tensor(gammas)
    sp_pos = softplus(logits)
    sp_neg = softplus(mul(logits, -1.0))
    pos = mul(exp(mul(g, mul(sp_pos, -1.0))), sp_neg)
    neg = mul(exp(mul(g, mul(sp_neg, -1.0))), sp_pos)
    return pos, neg


def focal_bce(logits: Tensor, gt: GroundTruthRelations, alpha: float,
              gammas: np.ndarray) -> tuple:
    """Focal binary cross-entropy over every off-diagonal (predicate,
    subject, object) cell, both branches normalized by the positive count."""
    P, n, _ = logits.shape
    gammas = np.asarray(gammas, dtype=np.float64)
    if gammas.shape != (P,):
        raise ValueError(f"gammas must have shape ({P},), got {gammas.shape}")
    if gt.num_positive == 0:
        return Tensor(0.0), True
    off = offdiagonal(n)[None, :, :]
    pos_mask = gt.targets * off
    neg_mask = (1.0 - gt.targets) * off
    pos, neg = _focal_terms(logits, gammas.reshape(P, 1, 1))
    total = add(tsum(mul(pos, Tensor(alpha * pos_mask))),
                tsum(mul(neg, Tensor((1.0 - alpha) * neg_mask))))
    return mul(total, 1.0 / gt.num_positive), False


def mask_loss(rel_logits: Tensor, gt: GroundTruthRelations, alpha: float,
              gamma: float, neg_ratio: int, rng: np.random.Generator) -> tuple:
    """Focal BCE on the relatedness grid with negative subsampling: at most
    neg_ratio negatives per positive pair, drawn without replacement."""
    n = gt.n
    off = offdiagonal(n)
    pos_mask = gt.pair_targets * off
    n_pos = int(pos_mask.sum())
    if n_pos == 0:
        return Tensor(0.0), True
    neg_flat = np.flatnonzero(((1.0 - gt.pair_targets) * off).reshape(-1))
    quota = min(neg_ratio * n_pos, neg_flat.size)
    chosen = rng.choice(neg_flat, size=quota, replace=False) if quota else np.array([], dtype=np.intp)
    neg_mask = np.zeros(n * n, dtype=np.float64)
    neg_mask[chosen] = 1.0
    neg_mask = neg_mask.reshape(n, n)
    pos, neg = _focal_terms(rel_logits, np.asarray(gamma, dtype=np.float64))
    total = add(tsum(mul(pos, Tensor(alpha * pos_mask))),
                tsum(mul(neg, Tensor((1.0 - alpha) * neg_mask))))
    return mul(total, 1.0 / n_pos), False


def margin_ranking_loss(logits: Tensor, gt: GroundTruthRelations) -> tuple:
    """Push every negative below its predicate's weakest positive: mean
    hinge of sigmoid(negative) above the per-predicate minimum positive
    sigmoid, over all off-diagonal negatives of predicates that have at
    least one positive in the scene."""
    P, n, _ = logits.shape
    if gt.num_positive == 0:
        return Tensor(0.0), True
    off = offdiagonal(n)[None, :, :]
    pos_mask = gt.targets * off
    has_pos = pos_mask.reshape(P, -1).sum(axis=1) > 0
    elig = (1.0 - gt.targets) * off * has_pos[:, None, None]
    n_neg = int(elig.sum())
    if n_neg == 0:
        return Tensor(0.0), True
    sig = sigmoid(logits)
    # Min over positives via max of the negation; non-positives are pushed
    # above any sigmoid value so they never win.
    shifted = add(mul(sig, Tensor(pos_mask)), Tensor(2.0 * (1.0 - pos_mask)))
    floor = mul(tmax(mul(shifted, -1.0), axis=(1, 2), keepdims=True), -1.0)  # P x 1 x 1
    hinge = mul(relu(sub(sig, floor)), Tensor(elig))
    return mul(tsum(hinge), 1.0 / n_neg), False


def union_enclosing_boxes(triplets: list, boxes: np.ndarray) -> tuple:
    """Per entity, the enclosing box of the subject-object union boxes of
    every triplet the entity participates in. Returns (n x 4 array, n mask)."""
    n = boxes.shape[0]
    enc = np.empty((n, 4), dtype=np.float64)
    enc[:, :2] = np.inf
    enc[:, 2:] = -np.inf
    involved = np.zeros(n, dtype=bool)
    for s, _p, o in triplets:
        union = np.array([min(boxes[s, 0], boxes[o, 0]), min(boxes[s, 1], boxes[o, 1]),
                          max(boxes[s, 2], boxes[o, 2]), max(boxes[s, 3], boxes[o, 3])])
        for e in (s, o):
            involved[e] = True
            enc[e, 0] = min(enc[e, 0], union[0])
            enc[e, 1] = min(enc[e, 1], union[1])
            enc[e, 2] = max(enc[e, 2], union[2])
            enc[e, 3] = max(enc[e, 3], union[3])
    enc[~involved] = 0.0
    return enc, involved


def rep_point_margin_loss(mean_points: list, triplets: list, boxes: np.ndarray) -> tuple:
    """Keep accumulated offset means spatially near each entity's
    relations: hinge on how far the x and y of every (entity, group) mean
    falls outside the entity's enclosing relation box, averaged over
    contributing coordinates and summed over the provided point sets.
    The scale coordinate is unconstrained."""
    if not triplets or not mean_points:
        return Tensor(0.0), True
    enc, involved = union_enclosing_boxes(triplets, boxes)
    if not involved.any():
        return Tensor(0.0), True
    total = None
    for pts in mean_points:
        n, K, _ = pts.shape
        mask = Tensor(involved.astype(np.float64).reshape(n, 1))
        count = float(involved.sum() * K * 2)
        x = pts[:, :, 0]
        y = pts[:, :, 1]
        lo_x = Tensor(enc[:, 0:1])
        lo_y = Tensor(enc[:, 1:2])
        hi_x = Tensor(enc[:, 2:3])
        hi_y = Tensor(enc[:, 3:4])
        hinge = add(add(relu(sub(x, hi_x)), relu(sub(lo_x, x))),
                    add(relu(sub(y, hi_y)), relu(sub(lo_y, y))))
        term = mul(tsum(mul(hinge, mask)), 1.0 / count)
        total = term if total is None else add(total, term)
    return total, False
