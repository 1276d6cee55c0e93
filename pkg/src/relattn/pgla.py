"""Performance-guided logit adjustment for long-tailed predicates.

A running per-predicate performance estimate (recall or precision over
prior-matched candidate budgets) steers a multiplicative weight W and an
additive bias B applied to the logits of annotated pairs during training.
A confusion matrix of logit gaps toward more frequent predicates adds a
per-instance correction. Uniform performance reduces the scheme exactly
to prior-based logit adjustment. Inference never sees any of this.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .losses import GroundTruthRelations
from .tensor import Tensor, add, mul

RHO_BASE = 0.9999


@dataclass(frozen=True)
class PglaState:
    priors: np.ndarray       # (P,) positive, sums to 1
    r: np.ndarray            # (P,) running performance estimate
    confusion: np.ndarray    # (P, P) running confusion logits, zero diagonal
    rho: np.ndarray          # (P,) per-predicate EMA momentum
    lam: float               # spread of the bias interpolation
    metric: str              # "recall" or "precision"
    iteration: int = 0

    @classmethod
    def create(cls, priors: np.ndarray, lam: float = 1.0,
               metric: str = "recall") -> "PglaState":
        priors = np.asarray(priors, dtype=np.float64)
        if priors.ndim != 1 or priors.size == 0:
            raise ValueError(f"priors must be a non-empty vector, got shape {priors.shape}")
        if (priors <= 0).any() or abs(priors.sum() - 1.0) > 1e-6:
            raise ValueError("priors must be positive and sum to 1")
        if lam <= 0:
            raise ValueError(f"lambda must be positive, got {lam}")
        if metric not in ("recall", "precision"):
            raise ValueError(f"unknown metric {metric!r}")
        P = priors.size
        rho = RHO_BASE ** (-np.log(priors))
        return cls(priors=priors, r=np.zeros(P), confusion=np.zeros((P, P)),
                   rho=rho, lam=float(lam), metric=metric)

    @property
    def P(self) -> int:
        return self.priors.size


def compute_wb(state: PglaState) -> tuple:
    """Weight and bias from the centered performance estimate:
    W = 1 - tanh(dr), B = -tanh(dr / lambda) * log(1 / P) + log(priors).
    With uniform r this is exactly W = 1, B = log(priors)."""
    dr = state.r - state.r.mean()
    W = 1.0 - np.tanh(dr)
    B = -np.tanh(dr / state.lam) * np.log(1.0 / state.P) + np.log(state.priors)
    return W, B


def adjust_logits(logits: Tensor, gt: GroundTruthRelations, W: np.ndarray,
                  B: np.ndarray, confusion: np.ndarray) -> Tensor:
    """Per-instance adjustment, applied only where the pair has at least
    one annotated predicate: every predicate logit of such a pair becomes
    W * logit + B + max over the pair's annotated predicates of that
    predicate's confusion row. Unannotated pairs pass through unchanged."""
    P, n, _ = logits.shape
    pair = gt.pair_targets  # n x n
    w_full = np.where(pair[None, :, :] > 0, W[:, None, None], 1.0)

    # Row-wise max of confusion rows selected by the pair's positives.
    sel = np.where(gt.targets[:, :, :, None] > 0, confusion[:, None, None, :], -np.inf)
    row = sel.max(axis=0)                       # n x n x P
    row = np.where(np.isfinite(row), row, 0.0)  # pairs with no positives
    b_full = (B[:, None, None] + row.transpose(2, 0, 1)) * pair[None, :, :]
    return add(mul(logits, Tensor(w_full)), Tensor(b_full))


def _ranked_candidates(scores: np.ndarray) -> np.ndarray:
    """All off-diagonal (predicate, subject, object) candidates sorted by
    score descending, ties broken by ascending predicate, subject, object.
    Returns an (M, 3) integer array."""
    P, n, _ = scores.shape
    pred, sub, obj = np.indices((P, n, n))
    keep = sub != obj
    pred, sub, obj = pred[keep], sub[keep], obj[keep]
    vals = scores[keep]
    order = np.lexsort((obj, sub, pred, -vals))
    return np.stack([pred[order], sub[order], obj[order]], axis=1)


def _budgets(priors: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Top-list budget per predicate: ground-truth counts accumulated in
    ascending-prior order, so rarer predicates get tighter budgets."""
    nu = np.argsort(priors, kind="stable")
    kappa = np.empty_like(counts)
    kappa[nu] = np.cumsum(counts[nu])
    return kappa


def batch_performance(scores: np.ndarray, gt: GroundTruthRelations,
                      priors: np.ndarray, metric: str = "recall") -> tuple:
    """Per-predicate performance of one scene under prior-matched budgets.

    For predicate p with budget kappa_p (cumulative GT counts in
    ascending-prior order), take the kappa_p highest-scoring candidates:
    recall = matched GT triplets of p / GT count of p; precision = matched
    GT triplets of p / candidates of p in that top list. Returns
    (values, updated) where updated marks predicates with a defined value.
    """
    P = priors.size
    counts = gt.targets.sum(axis=(1, 2)).astype(np.int64)
    values = np.zeros(P, dtype=np.float64)
    updated = np.zeros(P, dtype=bool)
    if counts.sum() == 0:
        return values, updated
    ranked = _ranked_candidates(scores)
    kappa = _budgets(priors, counts)
    rank_of = {tuple(row): i for i, row in enumerate(ranked)}
    for p in range(P):
        budget = int(kappa[p])
        subs, objs = np.nonzero(gt.targets[p])
        matched = sum(1 for s, o in zip(subs, objs) if rank_of[(p, s, o)] < budget)
        if metric == "recall":
            if counts[p] > 0:
                values[p] = matched / counts[p]
                updated[p] = True
        else:
            predicted = int((ranked[:budget, 0] == p).sum())
            if predicted > 0:
                values[p] = matched / predicted
                updated[p] = True
    return values, updated


def update_performance(state: PglaState, scores: np.ndarray,
                       gt: GroundTruthRelations) -> PglaState:
    """Fold one scene into the running estimate: r <- rho * r +
    (1 - rho) * batch value, only for predicates the scene measured."""
    values, updated = batch_performance(scores, gt, state.priors, state.metric)
    r = np.where(updated, state.rho * state.r + (1.0 - state.rho) * values, state.r)
    return replace(state, r=r, iteration=state.iteration + 1)


def update_confusion(state: PglaState, logits: np.ndarray,
                     gt: GroundTruthRelations) -> PglaState:
    """Fold one scene into the confusion matrix. For each annotated
    instance of predicate p, the row over candidates q is
    relu(logit_q - logit_p) * tanh(relu(log prior_q - log prior_p)):
    the logit surplus toward more frequent predicates, gated by how much
    more frequent they are. Rows average per predicate, then EMA."""
    P = state.P
    log_pi = np.log(state.priors)
    gate = np.tanh(np.maximum(log_pi[None, :] - log_pi[:, None], 0.0))  # rows p, cols q
    rows = np.zeros((P, P), dtype=np.float64)
    hits = np.zeros(P, dtype=np.int64)
    for p in range(P):
        subs, objs = np.nonzero(gt.targets[p])
        for s, o in zip(subs, objs):
            surplus = np.maximum(logits[:, s, o] - logits[p, s, o], 0.0)
            rows[p] += surplus * gate[p]
            hits[p] += 1
    confusion = state.confusion.copy()
    present = hits > 0
    if present.any():
        rows[present] /= hits[present, None]
        rho = state.rho[present, None]
        confusion[present] = rho * confusion[present] + (1.0 - rho) * rows[present]
    return replace(state, confusion=confusion)
