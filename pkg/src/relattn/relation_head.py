"""Relationship prediction from decoded entity states.

Attention logits between every subject state and every object state are
the relationship signal itself: per-head logits are projected linearly
into per-predicate logits and a single relatedness logit, then the K x K
state-pair combinations for each ordered entity pair collapse to one
value. Training collapses with a Gumbel-softmax weighting so the choice
of pair stays differentiable; inference takes the maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ConfigError
from .params import LinearParams, ParameterRegistry
from .tensor import Tensor, add, gumbel_softmax, matmul, mul, reshape, sigmoid, sqrt, \
    swap_last, tmax, transpose, tsum

TAU_START = 10.0
TAU_END = 0.5
TAU_WARM_FRACTION = 0.3


def annealing_temperature(iteration: int, total_iterations: int) -> float:
    """Linear decay from TAU_START at iteration 0 to TAU_END at 30% of
    total iterations, constant afterwards."""
    if total_iterations <= 0:
        raise ConfigError(f"total_iterations must be positive, got {total_iterations}")
    warm = TAU_WARM_FRACTION * total_iterations
    if iteration >= warm:
        return TAU_END
    return TAU_START + (TAU_END - TAU_START) * (iteration / warm)


@dataclass
class RelationPrediction:
    predicate_logits: Tensor   # P x n x n
    relatedness_logits: Tensor  # n x n
    scores: Tensor             # P x n x n, diagonal zeroed
    pair_weights: Tensor | None = None  # P x n x n x K^2, training only


def offdiagonal_mask(n: int) -> np.ndarray:
    return 1.0 - np.eye(n, dtype=np.float64)


def final_scores(predicate_logits: Tensor, relatedness_logits: Tensor) -> Tensor:
    """Geometric mean of the two sigmoid branches, diagonal forced to 0."""
    P, n, _ = predicate_logits.shape
    blended = mul(sigmoid(reshape(relatedness_logits, (1, n, n))), sigmoid(predicate_logits))
    return mul(sqrt(blended), Tensor(offdiagonal_mask(n)[None, :, :]))


class RelationHead:
    def __init__(self, registry: ParameterRegistry, d: int, heads: int, head_dim: int,
                 num_predicates: int, rng: np.random.Generator, prefix: str = "head"):
        self.heads, self.head_dim, self.d = heads, head_dim, d
        self.num_predicates = num_predicates
        width = heads * head_dim
        self.wq = LinearParams(registry, f"{prefix}.q", d, width, rng)
        self.wk = LinearParams(registry, f"{prefix}.k", d, width, rng)
        self.head_bias = registry.add(f"{prefix}.bias", np.zeros(heads))
        self.to_predicates = LinearParams(registry, f"{prefix}.predicates", heads,
                                          num_predicates, rng)
        self.to_relatedness = LinearParams(registry, f"{prefix}.relatedness", heads, 1, rng)

    def attention_logits(self, sub: Tensor, obj: Tensor, sub_box: Tensor,
                         obj_box: Tensor) -> Tensor:
        """Scaled dot-product logits per head between every subject state
        and every object state, plus a learned per-head bias: h x nK x nK."""
        n, K, d = sub.shape
        N = n * K
        q_in = reshape(add(sub, reshape(sub_box, (n, 1, d))), (N, d))
        k_in = reshape(add(obj, reshape(obj_box, (n, 1, d))), (N, d))
        q = transpose(reshape(self.wq(q_in), (N, self.heads, self.head_dim)), (1, 0, 2))
        k = transpose(reshape(self.wk(k_in), (N, self.heads, self.head_dim)), (1, 0, 2))
        scaled = matmul(q, swap_last(k)) * (1.0 / math.sqrt(self.head_dim))
        return add(scaled, reshape(self.head_bias, (self.heads, 1, 1)))

    def project_heads(self, logits: Tensor) -> tuple:
        """Per-predicate logits (P x nK x nK) and relatedness logits
        (nK x nK) as linear maps over the head axis."""
        N = logits.shape[1]
        stacked = transpose(logits, (1, 2, 0))  # N x N x h
        pred = transpose(self.to_predicates(stacked), (2, 0, 1))
        rel = reshape(self.to_relatedness(stacked), (N, N))
        return pred, rel

    @staticmethod
    def group_pairs(pred: Tensor, rel: Tensor, n: int, K: int) -> tuple:
        """Regroup state-level grids to P x n x n x K^2 and n x n x K^2."""
        P = pred.shape[0]
        pred = reshape(transpose(reshape(pred, (P, n, K, n, K)), (0, 1, 3, 2, 4)),
                       (P, n, n, K * K))
        rel = reshape(transpose(reshape(rel, (n, K, n, K)), (0, 2, 1, 3)), (n, n, K * K))
        return pred, rel

    def reduce_pairs(self, pred: Tensor, rel: Tensor, mode: str, tau: float = None,
                     rng: np.random.Generator = None, hard: bool = False,
                     noise: np.ndarray = None) -> tuple:
        """Collapse the K^2 state-pair axis.

        Training weighs predicate logits by a Gumbel-softmax sample at
        temperature tau (exactly one-hot when hard=True, via the
        straight-through estimator); inference takes the maximum.
        Relatedness always reduces by maximum.
        """
        if mode == "train":
            if tau is None:
                raise ValueError("train-mode reduction needs a temperature")
            weights = gumbel_softmax(pred, tau, rng=rng, hard=hard, noise=noise)
            out_pred = tsum(mul(weights, pred), axis=-1)
        elif mode == "infer":
            weights = None
            out_pred = tmax(pred, axis=-1)
        else:
            raise ValueError(f"unknown reduction mode {mode!r}")
        out_rel = tmax(rel, axis=-1)
        return out_pred, out_rel, weights

    def forward(self, sub: Tensor, obj: Tensor, sub_box: Tensor, obj_box: Tensor,
                n: int, K: int, mode: str, tau: float = None,
                rng: np.random.Generator = None, hard: bool = False) -> RelationPrediction:
        logits = self.attention_logits(sub, obj, sub_box, obj_box)
        pred_full, rel_full = self.project_heads(logits)
        pred_grp, rel_grp = self.group_pairs(pred_full, rel_full, n, K)
        pred, rel, weights = self.reduce_pairs(pred_grp, rel_grp, mode, tau=tau,
                                               rng=rng, hard=hard)
        scores = final_scores(pred, rel)
        return RelationPrediction(predicate_logits=pred, relatedness_logits=rel,
                                  scores=scores, pair_weights=weights)
